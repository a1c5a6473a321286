"""Prognostics metrics: MAE, RMSE, MAPE and the asymmetric PHM score."""

from __future__ import annotations

import numpy as np


def _pair(y_pred, y_true):
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1)
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"prediction/target length mismatch: {y_pred.size} vs {y_true.size}")
    if y_pred.size == 0:
        raise ValueError("metrics need at least one sample")
    return y_pred, y_true


def metric_mae(y_pred, y_true) -> float:
    p, y = _pair(y_pred, y_true)
    return float(np.mean(np.abs(p - y)))


def metric_rmse(y_pred, y_true) -> float:
    p, y = _pair(y_pred, y_true)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def metric_mape(y_pred, y_true) -> float:
    """Percentage error ``100/N · Σ|e_i / y_i|``; undefined when any target is zero."""
    p, y = _pair(y_pred, y_true)
    if np.any(y == 0):
        raise ZeroDivisionError("MAPE is undefined for zero targets")
    return float(100.0 * np.mean(np.abs((y - p) / y)))


def metric_phm_score(y_pred, y_true, convention: str = "paper") -> float:
    """Sum of asymmetric exponential penalties.

    ``paper``: ``e = y − ŷ``; ``exp(−e/13) − 1`` if ``e < 0`` else ``exp(e/10) − 1``.
    This charges over-prediction with the /13 branch, the reverse of the
    ``classic`` C-MAPSS convention (``d = ŷ − y``, same branches on ``d``).
    """
    p, y = _pair(y_pred, y_true)
    if convention == "paper":
        e = y - p
    elif convention == "classic":
        e = p - y
    else:
        raise ValueError(f"unknown score convention {convention!r}")
    with np.errstate(over="ignore"):
        return float(np.sum(np.where(e < 0, np.exp(-e / 13.0) - 1.0, np.exp(e / 10.0) - 1.0)))
