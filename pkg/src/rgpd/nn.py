"""Parameter initialisation, small dense building blocks and the Adam optimiser."""

from __future__ import annotations

from typing import Dict, Iterable, List, Sequence

import numpy as np

from .autodiff import Tensor, ops

ParamGroup = Dict[str, Tensor]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = ops.matmul(x, W)
    return y if b is None else y + b


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str = "") -> ParamGroup:
    """Weights ``{prefix}W{i}`` and biases ``{prefix}b{i}`` for consecutive ``sizes``."""
    params: ParamGroup = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}W{i}"] = xavier_uniform(rng, n_in, n_out)
        params[f"{prefix}b{i}"] = zeros(n_out)
    return params


def mlp(x: Tensor, params: ParamGroup, n_layers: int, prefix: str = "", act=ops.tanh) -> Tensor:
    """Dense stack with ``act`` between layers and a linear output."""
    h = x
    for i in range(n_layers):
        h = linear(h, params[f"{prefix}W{i}"], params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def count_params(group: ParamGroup) -> int:
    return int(sum(t.size for t in group.values()))


def flatten_groups(groups: Dict[str, ParamGroup]) -> List[Tensor]:
    return [groups[g][k] for g in groups for k in groups[g]]


class Adam:
    """Adaptive-moment gradient descent on a fixed list of leaf tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out
