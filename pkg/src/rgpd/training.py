"""Training loop, validation rounds, evaluation reports and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .autodiff import Tensor, no_grad, ops
from .config import TrainConfig, config_to_text, parse_config_text
from .data import (DatasetSplit, Normalizer, SensorWindow, load_cmapss, load_rul_file, prepare_split,
                   split_units, stack_windows, synth_degradation, truncate_units)
from .graph_nn import Graph
from .metrics import metric_mae, metric_mape, metric_phm_score, metric_rmse
from .model import RGPDModel, build_model, forward_pass
from .nn import Adam
from .physics import PhysicsWeights, physics_states, write_report_csv
from .rl_weights import AgentBank, WeightRound
from .sac import ReplayBuffer, sac_update, write_action_trace

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "rgpd-ckpt-1"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch, self.step = epoch, step


class CheckpointError(ValueError):
    pass


def fixed_weights(config: TrainConfig) -> PhysicsWeights:
    return PhysicsWeights(config.fixed_w1, config.fixed_w2, config.fixed_w3, config.fixed_w4)


# -- datasets ----------------------------------------------------------------------

def load_datasets(config: TrainConfig, normalizer: Optional[Normalizer] = None,
                  t_max: Optional[float] = None) -> DatasetSplit:
    """Build train/valid/test windows for the configured source."""
    if config.source == "synthetic":
        units = synth_degradation(config.synth_units, (config.synth_min_len, config.synth_max_len),
                                  config.synth_channels, config.synth_noise, seed=config.seed)
        train_f = 1.0 - config.valid_fraction - config.test_fraction
        train_u, valid_u, test_u = split_units(units, (train_f, config.valid_fraction, config.test_fraction),
                                               seed=config.seed)
        if not test_u:
            raise ValueError("synthetic split produced no test units; raise synth_units or test_fraction")
        test_u = truncate_units(test_u, np.random.default_rng(config.seed + 1))
    else:
        root = Path(config.cmapss_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"CMAPSS directory not found: {root}")
        units = load_cmapss(root / f"train_{config.subset}.txt", config.drop_channels)
        train_u, valid_u = split_units(units, (1.0 - config.cmapss_valid_fraction, config.cmapss_valid_fraction),
                                       seed=config.seed)
        test_u = load_cmapss(root / f"test_{config.subset}.txt", config.drop_channels, failed=False)
        ruls = load_rul_file(root / f"RUL_{config.subset}.txt")
        if len(ruls) != len(test_u):
            raise ValueError(f"RUL file has {len(ruls)} rows for {len(test_u)} test units")
        for u, r in zip(test_u, ruls):
            u.rul_end = int(r)
    if not valid_u:
        raise ValueError("validation split is empty")
    return prepare_split(train_u, valid_u, test_u, config.window_sizes, config.stride,
                         config.target_kind, config.rul_cap, normalizer, t_max)


# -- batching and losses --------------------------------------------------------------

def make_batches(windows: Sequence[SensorWindow], batch_size: int,
                 rng: Optional[np.random.Generator] = None) -> List[List[SensorWindow]]:
    """Group windows by length into batches; shuffled when ``rng`` is given."""
    by_len: Dict[int, List[SensorWindow]] = {}
    for w in windows:
        by_len.setdefault(w.length, []).append(w)
    batches = []
    for L in sorted(by_len):
        group = by_len[L]
        order = rng.permutation(len(group)) if rng is not None else np.arange(len(group))
        batches += [[group[i] for i in order[s:s + batch_size]] for s in range(0, len(group), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def mixup_losses(pred: Tensor, y_a, y_b, lam: float) -> Tensor:
    """Per-sample ``λ(ŷ − y_a)² + (1−λ)(ŷ − y_b)²``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ya = Tensor(np.asarray(y_a, dtype=float), _check=False)
    yb = Tensor(np.asarray(y_b, dtype=float), _check=False)
    return lam * ops.square(pred - ya) + (1.0 - lam) * ops.square(pred - yb)


def mixup_criterion(pred, y_a, y_b, lam: float) -> Tensor:
    """``λ·MSE(ŷ, y_a) + (1−λ)·MSE(ŷ, y_b)``."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=float))
    return ops.mean(mixup_losses(pred, y_a, y_b, lam))


def _scaled_batch(windows: Sequence[SensorWindow], scale: float) -> Dict[str, np.ndarray]:
    b = stack_windows(windows)
    b["y"] = b["y"] / scale
    return b


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalReport:
    mae: float
    rmse: float
    score: float
    mape: Optional[float]
    unit_ids: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray
    weight_history: List[WeightRound] = field(default_factory=list)
    action_trace: List[Tuple[int, float, float]] = field(default_factory=list)

    def metrics(self) -> Dict[str, float]:
        out = {"mae": self.mae, "rmse": self.rmse, "score": self.score, "n_units": int(len(self.unit_ids))}
        if self.mape is not None:
            out["mape"] = self.mape
        return out


def report_from_predictions(unit_ids, predictions, targets, target_kind: str = "rul",
                            convention: str = "paper") -> EvalReport:
    p, y = np.asarray(predictions, dtype=float), np.asarray(targets, dtype=float)
    mape = metric_mape(p, y) if target_kind == "soh" else None
    return EvalReport(metric_mae(p, y), metric_rmse(p, y), metric_phm_score(p, y, convention), mape,
                      np.asarray(unit_ids), p, y)


def predict_windows(model: RGPDModel, windows: Sequence[SensorWindow], batch_size: int = 256) -> np.ndarray:
    """Deterministic predictions (model scale) in the order of ``windows``."""
    index = {id(w): i for i, w in enumerate(windows)}
    out = np.empty(len(windows))
    with no_grad():
        for batch in make_batches(windows, batch_size):
            res = forward_pass(model, stack_windows(batch), mode="eval")
            out[[index[id(w)] for w in batch]] = res.y_last.data
    return out


def evaluate(model: RGPDModel, windows: Sequence[SensorWindow], target_scale: float = 1.0,
             target_kind: str = "rul", convention: str = "paper", batch_size: int = 256) -> EvalReport:
    """One prediction per unit: the mean over window sizes of its final-window outputs."""
    if not windows:
        raise ValueError("no windows to evaluate")
    preds = predict_windows(model, windows, batch_size) * target_scale
    units = sorted({w.unit_id for w in windows})
    final: Dict[int, Dict[int, SensorWindow]] = {u: {} for u in units}
    pos: Dict[int, Dict[int, int]] = {u: {} for u in units}
    for i, w in enumerate(windows):
        prev = final[w.unit_id].get(w.length)
        if prev is None or w.end_cycle >= prev.end_cycle:
            final[w.unit_id][w.length] = w
            pos[w.unit_id][w.length] = i
    p = np.array([np.mean([preds[i] for _, i in sorted(pos[u].items())]) for u in units])
    y = np.array([final[u][min(final[u])].y for u in units])
    return report_from_predictions(units, p, y, target_kind, convention)


@dataclass
class ValidationResult:
    rmse: float
    states: Tuple[float, float, float, float]
    terms: Tuple[float, float, float, float]


def validate(model: RGPDModel, windows: Sequence[SensorWindow], target_scale: float,
             weights: PhysicsWeights, batch_size: int = 256) -> ValidationResult:
    """Window-level RMSE (target scale) plus sample-weighted physics states and terms."""
    sq, n = 0.0, 0
    states = np.zeros(4)
    terms = np.zeros(4)
    with no_grad():
        for batch in make_batches(windows, batch_size):
            b = stack_windows(batch)
            r = forward_pass(model, b, mode="eval", weights=weights, with_physics=True)
            B = len(batch)
            sq += float(np.sum((r.y_last.data * target_scale - b["y"]) ** 2))
            n += B
            rep = r.report
            states += B * np.array(physics_states(rep.diff1.data, rep.diff2.data, r.n_u.data,
                                                  r.y_last.data, b["broken"]))
            terms += B * np.array(rep.terms())
    return ValidationResult(float(np.sqrt(sq / n)), tuple(states / n), tuple(terms / n))


# -- training ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    sup_loss: float
    valid_rmse: float
    test_monotonicity: float
    weights: Tuple[float, float, float, float]


@dataclass
class TrainResult:
    model: RGPDModel
    report: EvalReport
    history: List[EpochLog]
    bank: Optional[AgentBank]
    best_epoch: int
    physics_rows: List[list]
    split: DatasetSplit
    test_monotonicity: float = 0.0


def _weight_rounds(bank: Optional[AgentBank], history: List[EpochLog]) -> List[WeightRound]:
    if bank is not None:
        return list(bank.history)
    return [WeightRound(h.epoch, h.weights, 0.0, h.valid_rmse) for h in history]


def train(config: TrainConfig, split: DatasetSplit, checkpoint_path=None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Run the full training schedule and evaluate the best-validation model on test.

    ``checkpoint_path``, when given, is rewritten whenever validation RMSE
    improves, so a divergence leaves the last good model on disk.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    model = build_model(c, split.n_channels, split.train_rows)
    opt = Adam(model.parameters(), lr=c.lr)
    scale = split.target_scale
    buffer = ReplayBuffer(c.sac_capacity)
    bank = AgentBank(np.random.default_rng(c.seed + 2), c.q_bins, c.q_alpha, c.q_gamma, c.q_epsilon,
                     c.q_epsilon_decay, c.q_epsilon_min) if c.use_rl else None
    weights = fixed_weights(c)
    if bank is not None:
        v = validate(model, split.valid, scale, weights, c.eval_batch_size)
        weights = bank.step(v.states, v.rmse)

    history: List[EpochLog] = []
    physics_rows: List[list] = []
    trace: List[Tuple[int, float, float]] = []
    best_rmse, best_epoch, best_state = np.inf, 0, None
    step = 0
    for epoch in range(1, c.epochs + 1):
        batches = make_batches(split.train, c.batch_size, rng)
        total, sup_total, count = 0.0, 0.0, 0
        opt.zero_grad()
        pending = False
        for bi, wins in enumerate(batches):
            b = _scaled_batch(wins, scale)
            y_b = b["y"]
            if c.use_mixup:
                lam = float(rng.beta(c.mixup_alpha, c.mixup_alpha)) if c.mixup_alpha > 0 else 1.0
                perm = rng.permutation(len(wins))
                b["x"] = lam * b["x"] + (1.0 - lam) * b["x"][perm]
                b["t"] = lam * b["t"] + (1.0 - lam) * b["t"][perm]
                if lam < 0.5:
                    b["broken"] = b["broken"][perm]
                y_b = b["y"][perm]
            else:
                lam = 1.0
            res = forward_pass(model, b, mode="train", weights=weights)
            per_sample = mixup_losses(res.y_last, b["y"], y_b, lam)
            sup = ops.mean(per_sample)
            loss = sup + c.w_pde * res.pde_loss
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}", epoch, bi)
            (loss * (1.0 / c.accumulate)).backward()
            pending = True
            if (bi + 1) % c.accumulate == 0:
                opt.step()
                opt.zero_grad()
                pending = False
            if c.use_rl:
                rewards = -per_sample.data
                for s_i, a_i, r_i in zip(res.state, res.action, rewards):
                    buffer.push(s_i, a_i, r_i, s_i, 1.0)
                if len(buffer) >= c.sac_batch_size:
                    sac_update(model.sac, buffer, c.sac_batch_size)
                trace.append((step, float(np.mean(res.action)), float(np.mean(rewards))))
            step += 1
            B = len(wins)
            total += B * loss.item()
            sup_total += B * sup.item()
            count += B
        if pending:
            opt.step()
            opt.zero_grad()
        if epoch % c.lr_step == 0:
            opt.lr *= c.lr_decay

        v = validate(model, split.valid, scale, weights, c.eval_batch_size)
        mono = validate(model, split.test, scale, weights, c.eval_batch_size).terms[0] if split.test else 0.0
        used = weights
        physics_rows.append([epoch, *v.terms, float(np.dot(used.as_tuple(), v.terms)), *used.as_tuple()])
        if bank is not None:
            weights = bank.step(v.states, v.rmse)
        log = EpochLog(epoch, total / count, sup_total / count, v.rmse, mono, used.as_tuple())
        history.append(log)
        logger.info("epoch %d loss %.5f valid_rmse %.4f test_mono %.3e", epoch, log.train_loss, v.rmse, mono)
        if on_epoch is not None:
            on_epoch(log)
        if v.rmse < best_rmse:
            best_rmse, best_epoch, best_state = v.rmse, epoch, model.snapshot()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, split.normalizer, split.t_max, bank)

    model.restore(best_state)
    report = evaluate(model, split.test, scale, c.target_kind, c.score_convention, c.eval_batch_size)
    report.weight_history = _weight_rounds(bank, history)
    report.action_trace = trace
    final_mono = validate(model, split.test, scale, weights, c.eval_batch_size).terms[0]
    return TrainResult(model, report, history, bank, best_epoch, physics_rows, split, final_mono)


# -- checkpoints ------------------------------------------------------------------------------

def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: RGPDModel, normalizer: Normalizer, t_max: float,
                    bank: Optional[AgentBank] = None) -> None:
    """Zip of ``.npy`` arrays plus a JSON header; byte-identical for identical state."""
    arrays = {f"param/{k}": v for k, v in model.snapshot().items()}
    arrays["norm/mean"], arrays["norm/std"] = normalizer.mean, normalizer.std
    if bank is not None:
        arrays.update({f"bank/{k}": v for k, v in bank.state_arrays().items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "package": __version__,
        "config": config_to_text(model.config),
        "n_channels": model.n_channels,
        "t_max": t_max,
        "channel_graph": model.channel_graph.to_text() if model.channel_graph is not None else None,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for k in sorted(arrays):
            _write_entry(zf, k + ".npy", _npy_bytes(arrays[k]))
    tmp.replace(path)


@dataclass
class Checkpoint:
    model: RGPDModel
    normalizer: Normalizer
    t_max: float
    bank_arrays: Dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if "meta.json" not in names:
                raise CheckpointError(f"{path}: missing meta.json")
            meta = json.loads(zf.read("meta.json"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: checkpoint version {meta.get('version')!r}, "
                                      f"expected {CHECKPOINT_VERSION!r}")
            arrays = {n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                      for n in names if n.endswith(".npy")}
    except (zipfile.BadZipFile, json.JSONDecodeError, ValueError, OSError, EOFError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    config = parse_config_text(meta["config"])
    graph = Graph.from_text(meta["channel_graph"]) if meta.get("channel_graph") else None
    model = RGPDModel(config, int(meta["n_channels"]), graph)
    try:
        model.restore({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    norm = Normalizer()
    norm.mean, norm.std = arrays["norm/mean"], arrays["norm/std"]
    bank = {k[len("bank/"):]: v for k, v in arrays.items() if k.startswith("bank/")}
    return Checkpoint(model, norm, float(meta["t_max"]), bank, meta)


# -- exports ----------------------------------------------------------------------------------

def write_metrics_json(path, metrics: Dict) -> None:
    Path(path).write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")


def write_predictions_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "prediction", "target", "error"])
        for u, p, y in zip(report.unit_ids, report.predictions, report.targets):
            w.writerow([int(u), repr(float(p)), repr(float(y)), repr(float(y - p))])


def write_history_csv(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "sup_loss", "valid_rmse", "test_monotonicity", "w1", "w2", "w3", "w4"])
        for h in history:
            w.writerow([h.epoch, *(repr(float(v)) for v in (h.train_loss, h.sup_loss, h.valid_rmse,
                                                            h.test_monotonicity, *h.weights))])


def write_weight_history_csv(path, rounds: Sequence[WeightRound]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "w1", "w2", "w3", "w4", "reward", "rmse"])
        for r in rounds:
            w.writerow([r.round, *(repr(float(x)) for x in r.weights), repr(float(r.reward)), repr(float(r.rmse))])


def write_run_outputs(out_dir, result: TrainResult, config: TrainConfig) -> Dict[str, float]:
    """Metrics summary, predictions, weight history, action trace, physics and epoch logs."""
    out = Path(out_dir)
    rep = result.report
    metrics = rep.metrics()
    metrics.update(best_epoch=result.best_epoch, best_valid_rmse=min(h.valid_rmse for h in result.history),
                   epochs=len(result.history), seed=config.seed,
                   test_monotonicity=result.test_monotonicity,
                   ablations=[n for n in ("rl", "mixup", "tau") if not getattr(config, f"use_{n}")])
    write_metrics_json(out / "metrics.json", metrics)
    write_predictions_csv(out / "predictions.csv", rep)
    write_weight_history_csv(out / "weight_history.csv", rep.weight_history)
    write_action_trace(out / "action_trace.csv", rep.action_trace)
    write_history_csv(out / "epochs.csv", result.history)
    write_report_csv(out / "physics.csv", result.physics_rows)
    return metrics
