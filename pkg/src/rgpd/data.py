"""Dataset ingestion, labelling, windowing, normalisation, Mixup and a synthetic generator."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .physics import broken_mask_for

logger = logging.getLogger(__name__)

N_SETTINGS = 3
N_SENSORS = 21
N_COLUMNS = 2 + N_SETTINGS + N_SENSORS
SENSOR_NAMES = [f"s{i}" for i in range(1, N_SENSORS + 1)]


class DataFormatError(ValueError):
    pass


@dataclass
class UnitTrajectory:
    """One device's lifetime record.

    ``rul_end`` is the true RUL at the last recorded cycle: 0 for
    run-to-failure units, positive for truncated test units.
    """

    unit_id: int
    cycles: np.ndarray
    settings: np.ndarray
    sensors: np.ndarray
    channel_names: List[str] = field(default_factory=lambda: list(SENSOR_NAMES))
    failed: bool = True
    rul_end: int = 0
    soh: Optional[np.ndarray] = None

    def __post_init__(self):
        self.cycles = np.asarray(self.cycles, dtype=np.int64)
        if len(self.cycles) == 0:
            raise ValueError(f"unit {self.unit_id} has no cycles")
        if np.any(np.diff(self.cycles) <= 0):
            raise ValueError(f"unit {self.unit_id}: cycles must strictly increase")
        if self.sensors.shape[0] != len(self.cycles) or self.settings.shape[0] != len(self.cycles):
            raise ValueError(f"unit {self.unit_id}: row counts disagree")

    def __len__(self) -> int:
        return len(self.cycles)

    def drop_channels(self, names: Sequence[str]) -> "UnitTrajectory":
        keep = [i for i, n in enumerate(self.channel_names) if n not in set(names)]
        return UnitTrajectory(self.unit_id, self.cycles, self.settings, self.sensors[:, keep],
                              [self.channel_names[i] for i in keep], self.failed, self.rul_end, self.soh)


# -- CMAPSS text format ---------------------------------------------------------

def load_cmapss(path, drop_channels: Sequence[str] = (), failed: bool = True) -> List[UnitTrajectory]:
    """Parse a whitespace-separated 26-column CMAPSS file into per-unit trajectories."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    rows: Dict[int, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_COLUMNS:
                raise DataFormatError(f"{path}:{lineno}: expected {N_COLUMNS} columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(int(vals[0]), []).append(vals)
    units = []
    for uid in sorted(rows):
        arr = np.array(sorted(rows[uid], key=lambda r: r[1]))
        cycles = arr[:, 1].astype(np.int64)
        if cycles[0] != 1 or np.any(np.diff(cycles) != 1):
            logger.warning("unit %d: cycles are not contiguous from 1", uid)
        traj = UnitTrajectory(uid, cycles, arr[:, 2:5], arr[:, 5:], failed=failed)
        units.append(traj.drop_channels(drop_channels) if drop_channels else traj)
    return units


def load_rul_file(path) -> np.ndarray:
    """One true RUL per line (CMAPSS ``RUL_FD00x.txt``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"RUL file not found: {path}")
    return np.array([float(line.split()[0]) for line in path.read_text().splitlines() if line.strip()])


def write_cmapss(path, units: Sequence[UnitTrajectory]) -> None:
    """Write units in the 26-column convention; missing sensor columns are zero-filled."""
    with open(path, "w") as fh:
        for u in units:
            if u.sensors.shape[1] > N_SENSORS:
                raise ValueError(f"at most {N_SENSORS} sensor channels fit the format")
            pad = np.zeros((len(u), N_SENSORS - u.sensors.shape[1]))
            sensors = np.hstack([u.sensors, pad])
            for c, st, se in zip(u.cycles, u.settings, sensors):
                vals = " ".join(repr(float(v)) for v in np.concatenate([st, se]))
                fh.write(f"{u.unit_id} {int(c)} {vals}\n")


# -- labels and windows -----------------------------------------------------------

def label_rul(traj: UnitTrajectory, cap: float = 125.0) -> np.ndarray:
    """``min(cap, last_cycle + rul_end − cycle)`` per cycle."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    raw = (traj.cycles[-1] + traj.rul_end - traj.cycles).astype(float)
    return np.minimum(raw, cap)


def unit_labels(traj: UnitTrajectory, target_kind: str = "rul", cap: float = 125.0) -> np.ndarray:
    if target_kind == "rul":
        return label_rul(traj, cap)
    if traj.soh is None:
        raise ValueError(f"unit {traj.unit_id} has no SOH series")
    return np.asarray(traj.soh, dtype=float)


@dataclass
class SensorWindow:
    x: np.ndarray          # T×D normalised channels
    t: np.ndarray          # T times in [0, 1]
    y: float               # label at the last covered step
    broken: bool
    unit_id: int
    end_cycle: int
    padded: bool = False

    @property
    def length(self) -> int:
        return self.x.shape[0]


def make_windows(traj: UnitTrajectory, sizes: Sequence[int], stride: int = 1, *,
                 labels: Optional[np.ndarray] = None, features: Optional[np.ndarray] = None,
                 t_max: Optional[float] = None, target_kind: str = "rul",
                 cap: float = 125.0) -> List[SensorWindow]:
    """Sliding windows of every size in ``sizes`` over one unit.

    Trajectories shorter than a window are left-padded by repeating the
    first row and the window is flagged ``padded``.
    """
    if not sizes:
        raise ValueError("window sizes must not be empty")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    feats = traj.sensors if features is None else features
    if labels is None:
        labels = unit_labels(traj, target_kind, cap)
    tm = float(t_max) if t_max else float(traj.cycles[-1])
    times = np.clip(traj.cycles / tm, 0.0, 1.0)
    broken = broken_mask_for(labels, target_kind)
    L = len(traj)
    out: List[SensorWindow] = []
    for size in sizes:
        if size < 1:
            raise ValueError("window size must be >= 1")
        if L < size:
            reps = size - L
            x = np.vstack([np.repeat(feats[:1], reps, axis=0), feats])
            t = np.concatenate([np.repeat(times[:1], reps), times])
            out.append(SensorWindow(x, t, float(labels[-1]), bool(broken[-1]), traj.unit_id,
                                    int(traj.cycles[-1]), padded=True))
            continue
        for end in range(size, L + 1, stride):
            out.append(SensorWindow(feats[end - size:end], times[end - size:end], float(labels[end - 1]),
                                    bool(broken[end - 1]), traj.unit_id, int(traj.cycles[end - 1])))
    return out


def last_windows(traj: UnitTrajectory, sizes: Sequence[int], **kw) -> List[SensorWindow]:
    """The final available window of each size (the test protocol)."""
    return [make_windows(traj, [size], 1, **kw)[-1] for size in sizes]


def stack_windows(windows: Sequence[SensorWindow]) -> Dict[str, np.ndarray]:
    """Batch arrays ``x`` (B×T×D), ``t`` (B×T), ``y``, ``broken``; windows must share a length."""
    lengths = {w.length for w in windows}
    if len(lengths) != 1:
        raise ValueError(f"windows of different lengths in one batch: {sorted(lengths)}")
    return {
        "x": np.stack([w.x for w in windows]),
        "t": np.stack([w.t for w in windows]),
        "y": np.array([w.y for w in windows]),
        "broken": np.array([float(w.broken) for w in windows]),
        "unit": np.array([w.unit_id for w in windows]),
    }


# -- normalisation ----------------------------------------------------------------

class Normalizer:
    """Per-channel z-score fitted on training rows only."""

    def __init__(self):
        self.mean: Optional[np.ndarray] = None
        self.std: Optional[np.ndarray] = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, arrays) -> "Normalizer":
        rows = np.concatenate([np.asarray(a.x if isinstance(a, SensorWindow) else a, dtype=float)
                               for a in arrays], axis=0)
        if rows.size == 0:
            raise ValueError("cannot fit on empty data")
        self.mean = rows.mean(axis=0)
        self.std = rows.std(axis=0)
        return self

    def _require(self):
        if not self.fitted:
            raise RuntimeError("normalizer used before fit")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._require()
        live = self.std >= 1e-8
        safe = np.where(live, self.std, 1.0)
        return np.where(live, (np.asarray(x, dtype=float) - self.mean) / safe, 0.0)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        self._require()
        live = self.std >= 1e-8
        return np.where(live, z * self.std + self.mean, self.mean)


def fit_normalizer(train) -> Normalizer:
    return Normalizer().fit(train)


# -- mixup --------------------------------------------------------------------------

def mixup(x_i, y_i, x_j, y_j, alpha: float, rng: np.random.Generator, lam: Optional[float] = None):
    """Convex blend of a sample pair with ``λ ~ Beta(α, α)``.

    Targets mix as ``λ·y_i + (1−λ)·y_j``; the printed ``(1−λ)·x_j`` in the
    target formula is a typo.
    """
    x_i, x_j = np.asarray(x_i, dtype=float), np.asarray(x_j, dtype=float)
    if x_i.shape != x_j.shape or np.shape(y_i) != np.shape(y_j):
        raise ValueError("mixup pair shapes differ")
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    return lam * x_i + (1.0 - lam) * x_j, lam * np.asarray(y_i) + (1.0 - lam) * np.asarray(y_j), lam


def mixup_batch(x: np.ndarray, y: np.ndarray, alpha: float, rng: np.random.Generator):
    """Mix each sample with a random partner; returns ``(x', y_a, y_b, λ, perm)``."""
    lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    perm = rng.permutation(len(x))
    return lam * x + (1.0 - lam) * x[perm], y, y[perm], lam, perm


# -- synthetic run-to-failure data ------------------------------------------------------

def synth_degradation(n_units: int = 50, length_range: Tuple[int, int] = (100, 200), n_channels: int = 8,
                      noise: float = 0.05, seed: int = 0) -> List[UnitTrajectory]:
    """Units whose latent health stays at 1 until a random knee, then decays to 0 at failure.

    Channels are affine in health plus Gaussian noise. An SOH series
    ``0.7 + 0.3·health`` is attached so SOH code paths have data.
    """
    if n_channels > N_SENSORS:
        raise ValueError(f"at most {N_SENSORS} channels")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError("invalid length range")
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, 1.0, n_channels)
    slopes = rng.choice([-1.0, 1.0], n_channels) * rng.uniform(0.5, 2.0, n_channels)
    units = []
    for uid in range(1, n_units + 1):
        L = int(rng.integers(lo, hi + 1))
        knee = rng.uniform(0.2, 0.6) * L
        power = rng.uniform(1.2, 2.5)
        cycles = np.arange(1, L + 1)
        prog = np.clip((cycles - knee) / (L - knee), 0.0, 1.0)
        health = 1.0 - prog ** power
        sensors = offsets + np.outer(health, slopes)
        if noise > 0:
            sensors = sensors + rng.normal(0.0, noise, sensors.shape)
        settings = np.tile([0.0, 0.0, 100.0], (L, 1))
        units.append(UnitTrajectory(uid, cycles, settings, sensors, SENSOR_NAMES[:n_channels],
                                    failed=True, rul_end=0, soh=0.7 + 0.3 * health))
    return units


def truncate_units(units: Sequence[UnitTrajectory], rng: np.random.Generator,
                   keep_range: Tuple[float, float] = (0.3, 0.95), min_keep: int = 1) -> List[UnitTrajectory]:
    """Cut each unit at a random point; the removed tail length becomes ``rul_end``."""
    out = []
    for u in units:
        keep = max(min_keep, int(round(rng.uniform(*keep_range) * len(u))))
        keep = min(keep, len(u))
        cut = UnitTrajectory(u.unit_id, u.cycles[:keep], u.settings[:keep], u.sensors[:keep],
                             u.channel_names, failed=keep == len(u) and u.failed,
                             rul_end=u.rul_end + (len(u) - keep),
                             soh=None if u.soh is None else u.soh[:keep])
        out.append(cut)
    return out


def split_units(units: Sequence[UnitTrajectory], fractions: Sequence[float], seed: int = 0):
    """Partition units by id into consecutive groups with the given fractions (seeded shuffle)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(units))
    bounds = np.round(np.cumsum(fractions) / np.sum(fractions) * len(units)).astype(int)
    groups, start = [], 0
    for b in bounds:
        groups.append([units[i] for i in sorted(order[start:b])])
        start = b
    return groups


# -- split container -----------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: List[SensorWindow]
    valid: List[SensorWindow]
    test: List[SensorWindow]
    normalizer: Normalizer
    t_max: float
    window_sizes: Tuple[int, ...]
    target_kind: str = "rul"
    cap: float = 125.0
    n_channels: int = 0
    train_rows: Optional[np.ndarray] = None

    @property
    def target_scale(self) -> float:
        return self.cap if self.target_kind == "rul" else 1.0


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RGPD_THREADS", "1")))
    except ValueError:
        return 1


def prepare_split(train_units: Sequence[UnitTrajectory], valid_units: Sequence[UnitTrajectory],
                  test_units: Sequence[UnitTrajectory], window_sizes: Sequence[int] = (20, 30, 40),
                  stride: int = 1, target_kind: str = "rul", cap: float = 125.0,
                  normalizer: Optional[Normalizer] = None, t_max: Optional[float] = None) -> DatasetSplit:
    """Fit normalisation on train units, then window all three splits.

    Test units contribute only their final window per size. A stored
    ``normalizer`` and ``t_max`` (from a checkpoint) replace the fitted ones.
    """
    if not train_units:
        raise ValueError("no training units")
    norm = normalizer if normalizer is not None else fit_normalizer([u.sensors for u in train_units])
    if t_max is None:
        t_max = float(max(u.cycles[-1] for u in train_units))

    def windows_for(u: UnitTrajectory, final_only: bool) -> List[SensorWindow]:
        feats = norm.apply(u.sensors)
        labels = unit_labels(u, target_kind, cap)
        kw = dict(labels=labels, features=feats, t_max=t_max, target_kind=target_kind, cap=cap)
        if final_only:
            return last_windows(u, window_sizes, **kw)
        return make_windows(u, window_sizes, stride, **kw)

    def run(units, final_only):
        with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
            parts = list(pool.map(lambda u: windows_for(u, final_only), units))
        return [w for p in parts for w in p]

    return DatasetSplit(run(train_units, False), run(valid_units, False), run(test_units, True), norm,
                        t_max, tuple(window_sizes), target_kind, cap, train_units[0].sensors.shape[1],
                        np.concatenate([norm.apply(u.sensors) for u in train_units], axis=0))


def write_windows_csv(path, windows: Sequence[SensorWindow]) -> None:
    """One window-step per line with a header row."""
    if not windows:
        raise ValueError("no windows to write")
    D = windows[0].x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "unit", "step", "t", *[f"c{i}" for i in range(D)], "label", "broken"])
        for k, win in enumerate(windows):
            for s in range(win.length):
                w.writerow([k, win.unit_id, s, repr(float(win.t[s])), *(repr(float(v)) for v in win.x[s]),
                            repr(win.y), int(win.broken)])


def write_correlation_csv(path, data: np.ndarray, names: Sequence[str]) -> None:
    from .graph_nn import channel_correlation
    corr = channel_correlation(np.asarray(data, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", *names])
        for n, row in zip(names, corr):
            w.writerow([n, *(repr(float(v)) for v in row)])
