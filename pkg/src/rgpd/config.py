"""Run configuration and its INI-style ``key = value`` file format."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Tuple

# section -> field names; every TrainConfig field appears exactly once
SECTIONS: Dict[str, List[str]] = {
    "data": ["source", "cmapss_dir", "subset", "drop_channels", "synth_units", "synth_min_len",
             "synth_max_len", "synth_channels", "synth_noise", "window_sizes", "stride", "rul_cap",
             "target_kind", "valid_fraction", "test_fraction", "cmapss_valid_fraction"],
    "graph": ["graph_mode", "corr_threshold"],
    "model": ["gat_dim", "gat_heads", "gat_slope", "gcrn_hidden", "gcrn_steps", "tau_k1", "tau_k2",
              "tau_dilation", "mhsa_heads", "time_embed_dim", "dynamics_width"],
    "physics": ["w_pde", "fixed_w1", "fixed_w2", "fixed_w3", "fixed_w4"],
    "rl": ["q_bins", "q_alpha", "q_gamma", "q_epsilon", "q_epsilon_decay", "q_epsilon_min"],
    "sac": ["sac_action_mode", "sac_a_max", "sac_alpha_ent", "sac_gamma", "sac_tau", "sac_lr",
            "sac_hidden", "sac_batch_size", "sac_capacity"],
    "train": ["epochs", "batch_size", "lr", "lr_decay", "lr_step", "accumulate", "mixup_alpha",
              "use_rl", "use_mixup", "use_tau", "seed", "score_convention", "eval_batch_size"],
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # data
    source: str = "synthetic"
    cmapss_dir: str = ""
    subset: str = "FD001"
    drop_channels: Tuple[str, ...] = ()
    synth_units: int = 50
    synth_min_len: int = 100
    synth_max_len: int = 200
    synth_channels: int = 8
    synth_noise: float = 0.05
    window_sizes: Tuple[int, ...] = (20, 30, 40)
    stride: int = 1
    rul_cap: float = 125.0
    target_kind: str = "rul"
    valid_fraction: float = 0.15
    test_fraction: float = 0.15
    cmapss_valid_fraction: float = 0.2
    # graph
    graph_mode: str = "temporal"
    corr_threshold: float = 0.5
    # model
    gat_dim: int = 16
    gat_heads: int = 2
    gat_slope: float = 0.2
    gcrn_hidden: int = 16
    gcrn_steps: int = 2
    tau_k1: int = 3
    tau_k2: int = 3
    tau_dilation: int = 2
    mhsa_heads: int = 2
    time_embed_dim: int = 8
    dynamics_width: int = 64
    # physics
    w_pde: float = 1.0
    fixed_w1: float = 1.0
    fixed_w2: float = 0.1
    fixed_w3: float = 1.0
    fixed_w4: float = 1.0
    # Q-learning
    q_bins: int = 8
    q_alpha: float = 0.1
    q_gamma: float = 0.9
    q_epsilon: float = 0.3
    q_epsilon_decay: float = 0.95
    q_epsilon_min: float = 0.02
    # SAC
    sac_action_mode: str = "scalar"
    sac_a_max: float = 0.5
    sac_alpha_ent: float = 0.2
    sac_gamma: float = 0.99
    sac_tau: float = 0.005
    sac_lr: float = 3e-4
    sac_hidden: int = 32
    sac_batch_size: int = 64
    sac_capacity: int = 10000
    # training
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 20
    accumulate: int = 1
    mixup_alpha: float = 0.2
    use_rl: bool = True
    use_mixup: bool = True
    use_tau: bool = True
    seed: int = 7
    score_convention: str = "paper"
    eval_batch_size: int = 256

    def __post_init__(self):
        _validate(self)

    def with_ablations(self, names) -> "TrainConfig":
        """Switch off any of ``rl``, ``mixup``, ``tau``."""
        changes = {}
        for n in names:
            n = n.strip()
            if not n:
                continue
            if n not in ("rl", "mixup", "tau"):
                raise ConfigError(f"unknown ablation {n!r} (expected rl, mixup, tau)")
            changes[f"use_{n}"] = False
        return replace(self, **changes)


def _validate(c: TrainConfig) -> None:
    positive = ["synth_units", "synth_min_len", "stride", "rul_cap", "gat_dim", "gat_heads", "gcrn_hidden",
                "gcrn_steps", "tau_k1", "tau_k2", "tau_dilation", "mhsa_heads", "time_embed_dim",
                "dynamics_width", "q_bins", "sac_hidden", "sac_batch_size", "sac_capacity", "epochs",
                "batch_size", "lr", "lr_decay", "lr_step", "accumulate", "eval_batch_size"]
    for name in positive:
        if not getattr(c, name) > 0:
            raise ConfigError(f"{name} must be positive")
    if c.synth_max_len < c.synth_min_len:
        raise ConfigError("synth_max_len < synth_min_len")
    if not c.window_sizes or any(w < 3 for w in c.window_sizes):
        raise ConfigError("window_sizes must be non-empty and each >= 3 (smoothness needs 3 steps)")
    if c.source not in ("synthetic", "cmapss"):
        raise ConfigError(f"source must be synthetic or cmapss, got {c.source!r}")
    if c.graph_mode not in ("temporal", "channel"):
        raise ConfigError(f"graph_mode must be temporal or channel, got {c.graph_mode!r}")
    if c.target_kind not in ("rul", "soh"):
        raise ConfigError(f"target_kind must be rul or soh, got {c.target_kind!r}")
    if c.sac_action_mode not in ("scalar", "vector"):
        raise ConfigError("sac_action_mode must be scalar or vector")
    if c.score_convention not in ("paper", "classic"):
        raise ConfigError("score_convention must be paper or classic")
    if c.tau_k1 % 2 == 0 or c.tau_k2 % 2 == 0:
        raise ConfigError("TAU kernel sizes must be odd")
    if not 0.0 < c.sac_a_max < 1.0:
        raise ConfigError("sac_a_max must lie in (0, 1)")
    if not 0.0 <= c.corr_threshold <= 1.0:
        raise ConfigError("corr_threshold must lie in [0, 1]")
    if c.mixup_alpha < 0 or c.w_pde < 0:
        raise ConfigError("mixup_alpha and w_pde must be >= 0")
    for w in (c.fixed_w1, c.fixed_w2, c.fixed_w3, c.fixed_w4):
        if w < 0:
            raise ConfigError("fixed physics weights must be >= 0")
    if not (0 < c.valid_fraction < 1 and 0 <= c.test_fraction < 1 and c.valid_fraction + c.test_fraction < 1):
        raise ConfigError("valid/test fractions must leave room for training units")
    if not 0 < c.cmapss_valid_fraction < 1:
        raise ConfigError("cmapss_valid_fraction must lie in (0, 1)")


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


_INT_TUPLES = {"window_sizes"}


def parse_config_text(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    known = {f.name for f in fields(TrainConfig)}
    changes = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in known or key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            default = getattr(base, key)
            try:
                if key in _INT_TUPLES:
                    value = tuple(int(s) for s in raw.split(",") if s.strip())
                else:
                    value = _parse_value(raw, default)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
            changes[key] = value
    return replace(base, **changes)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(c: TrainConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_format_value(getattr(c, k))}" for k in keys]
        lines.append("")
    return "\n".join(lines)
