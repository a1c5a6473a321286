"""DeepHPM dynamics network and the four physics residual losses."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import debug_enabled
from .nn import ParamGroup, init_mlp, mlp

SOH_BROKEN_THRESHOLD = 0.8


@dataclass(frozen=True)
class PhysicsWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0

    def __post_init__(self):
        for name, v in zip(("w1", "w2", "w3", "w4"), self.as_tuple()):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"physics weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    def scaled(self, s: float) -> "PhysicsWeights":
        return PhysicsWeights(*(w * s for w in self.as_tuple()))


@dataclass
class PhysicsReport:
    diff1: Tensor
    diff2: Tensor
    residual: Tensor
    monotonicity: Tensor
    smoothness: Tensor
    consistency: Tensor
    broken: Tensor
    total: Tensor
    weights: PhysicsWeights

    def terms(self) -> Tuple[float, float, float, float]:
        return (self.monotonicity.item(), self.smoothness.item(),
                self.consistency.item(), self.broken.item())

    def row(self, step: int) -> list:
        return [step, *self.terms(), self.total.item(), *self.weights.as_tuple()]


REPORT_HEADER = ["step", "monotonicity", "smoothness", "consistency", "broken", "pde_loss",
                 "w1", "w2", "w3", "w4"]


def write_report_csv(path, rows: Iterable[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def monotonicity_loss(y_seq: Tensor) -> Tuple[Tensor, Tensor]:
    """``diff1 = ŷ[t+1] − ŷ[t]``; loss ``mean(max(0, diff1)²)`` penalises rising predictions."""
    if y_seq.shape[-1] < 2:
        raise ValueError("monotonicity needs at least 2 time steps")
    diff1 = y_seq[..., 1:] - y_seq[..., :-1]
    return diff1, ops.mean(ops.square(ops.relu(diff1)))


def smoothness_loss(y_seq: Tensor) -> Tuple[Tensor, Tensor]:
    """Second difference ``(ŷ[t+2] − ŷ[t+1]) − (ŷ[t+1] − ŷ[t])`` and its mean square."""
    if y_seq.shape[-1] < 3:
        raise ValueError("smoothness needs at least 3 time steps")
    diff2 = (y_seq[..., 2:] - y_seq[..., 1:-1]) - (y_seq[..., 1:-1] - y_seq[..., :-2])
    return diff2, ops.mean(ops.square(diff2))


def hpm_consistency_loss(diff1: Tensor, n_u: Tensor) -> Tuple[Tensor, Tensor]:
    """``residual = diff1 − N_u[:, :−1, 0]`` and ``mean(residual²)``."""
    if n_u.shape[-2] != diff1.shape[-1] + 1:
        raise ValueError(f"N_u length {n_u.shape[-2]} does not match diff1 length {diff1.shape[-1]} + 1")
    residual = diff1 - n_u[..., :-1, 0]
    return residual, ops.mean(ops.square(residual))


def broken_loss(y_last: Tensor, broken_mask) -> Tensor:
    """``mean(mask · ŷ_last²)`` over the whole batch."""
    mask = np.asarray(broken_mask, dtype=float)
    if mask.shape != y_last.shape:
        raise ValueError(f"mask shape {mask.shape} != prediction shape {y_last.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("broken mask must be binary")
    return ops.mean(Tensor(mask, _check=False) * ops.square(y_last))


def broken_mask_for(labels: np.ndarray, target_kind: str = "rul") -> np.ndarray:
    """1 where the device has failed: RUL == 0, or SOH ≤ 0.8."""
    labels = np.asarray(labels, dtype=float)
    if target_kind == "rul":
        return (labels == 0).astype(float)
    if target_kind == "soh":
        return (labels <= SOH_BROKEN_THRESHOLD).astype(float)
    raise ValueError(f"unknown target kind {target_kind!r}")


def total_pde_loss(terms, weights: PhysicsWeights):
    """``w1·mono + w2·smooth + w3·consistency + w4·broken`` (terms may be floats or tensors)."""
    w = weights.as_tuple()
    total = w[0] * terms[0]
    for wi, ti in zip(w[1:], terms[1:]):
        total = total + wi * ti
    return total


# -- dynamics network ---------------------------------------------------------------

def init_dynamics_params(rng: np.random.Generator, feature_dim: int, width: int = 64) -> ParamGroup:
    """Two tanh hidden layers over ``[features, ŷ_t, t]``."""
    return init_mlp(rng, [feature_dim + 2, width, width, 1])


def dynamics_forward(features: Tensor, y_seq: Tensor, t_norm, params: ParamGroup) -> Tensor:
    """Per-step dynamics estimate ``N_u`` of shape ``[B, T, 1]``.

    Spatial derivatives have no analogue for per-window scalar targets, so the
    network sees only the hidden features, the prediction and time.
    """
    t = t_norm if isinstance(t_norm, Tensor) else Tensor(t_norm, _check=False)
    if debug_enabled() and (np.any(t.data < 0) or np.any(t.data > 1)):
        raise ValueError("normalized time must lie in [0, 1]")
    if features.shape[:-1] != y_seq.shape or t.shape != y_seq.shape:
        raise ValueError(f"dynamics input shapes disagree: {features.shape}, {y_seq.shape}, {t.shape}")
    expand = lambda v: ops.reshape(v, v.shape + (1,))  # noqa: E731
    inp = ops.concat([features, expand(y_seq), expand(t)], axis=-1)
    return mlp(inp, params, n_layers=3)


def physics_report(y_seq: Tensor, n_u: Tensor, broken_mask, weights: PhysicsWeights) -> PhysicsReport:
    diff1, mono = monotonicity_loss(y_seq)
    diff2, smooth = smoothness_loss(y_seq)
    residual, cons = hpm_consistency_loss(diff1, n_u)
    broken = broken_loss(y_seq[..., -1], broken_mask)
    total = total_pde_loss((mono, smooth, cons, broken), weights)
    return PhysicsReport(diff1, diff2, residual, mono, smooth, cons, broken, total, weights)


def physics_states(diff1: np.ndarray, diff2: np.ndarray, n_u: np.ndarray, y_last: np.ndarray,
                   broken_mask: np.ndarray) -> Tuple[float, float, float, float]:
    """Agent observations: ``E[diff1²]``, ``E[diff2²]``, ``E[(diff1 − N_u)²]``, ``E[𝕀(broken)·ŷ²]``."""
    res = diff1 - n_u[..., :-1, 0]
    return (float(np.mean(diff1 ** 2)), float(np.mean(diff2 ** 2)), float(np.mean(res ** 2)),
            float(np.mean(broken_mask * y_last ** 2)))
