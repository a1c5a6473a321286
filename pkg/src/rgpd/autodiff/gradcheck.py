"""Central finite-difference verification of backward rules."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad


def _as_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    seed: int = 0,
    projection: Optional[np.ndarray] = None,
) -> float:
    """Max elementwise relative error between analytic and numeric gradients.

    ``f`` is called as ``f(*inputs)``. Non-scalar outputs are reduced to
    ``sum(f(x) * w)`` with a fixed random ``w`` so every output element
    contributes. The error per element is
    ``|analytic - central| / (|analytic| + |central| + 1e-12)``.
    """
    inputs = _as_list(x)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.zero_grad()

    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("f(x) is not finite")
    if projection is None:
        projection = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    w = projection
    (out * Tensor(w)).sum().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(np.sum(f(*inputs).data * w))
                flat[i] = orig - eps
                fm = float(np.sum(f(*inputs).data * w))
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"f is not finite near element {i}")
                num = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - num) / (abs(gflat[i]) + abs(num) + 1e-12)
                worst = max(worst, err)
    for t in inputs:
        t.zero_grad()
    return worst
