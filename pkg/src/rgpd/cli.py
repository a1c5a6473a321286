"""Command-line entry point: ``rgpd train|eval|gradcheck|synth``.

Exit codes: 0 success, 1 user error (bad config, missing files, bad
checkpoint, busy output directory), 2 numerical failure (divergence or a
gradient check over threshold).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from filelock import FileLock, Timeout

from .autodiff import NonFiniteError
from .config import ConfigError, TrainConfig, config_to_text, load_config
from .data import DataFormatError, synth_degradation, write_cmapss
from .gradcheck_suite import THRESHOLD, format_table, run_gradcheck
from .training import (CheckpointError, DivergenceError, EpochLog, evaluate, load_checkpoint, load_datasets,
                       train, write_history_csv, write_metrics_json, write_predictions_csv, write_run_outputs)

logger = logging.getLogger("rgpd")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
LOCK_NAME = ".rgpd.lock"


class UserError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgpd", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["train", "eval", "gradcheck", "synth"])
    p.add_argument("--config", type=Path, help="INI-style config file")
    p.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate (eval)")
    p.add_argument("--out", type=Path, default=Path("rgpd_out"), help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--ablate", default="", help="comma list drawn from rl,mixup,tau")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config_from_args(args) -> TrainConfig:
    config = load_config(args.config) if args.config is not None else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.ablate:
        config = config.with_ablations(args.ablate.split(","))
    return config


def cmd_train(args) -> int:
    config = _config_from_args(args)
    out = args.out
    (out / "train_config.ini").write_text(config_to_text(config))
    split = load_datasets(config)
    logs: List[EpochLog] = []
    ckpt = out / "checkpoint.rgpd"
    try:
        result = train(config, split, checkpoint_path=ckpt, on_epoch=logs.append)
    except (DivergenceError, NonFiniteError):
        write_history_csv(out / "epochs.csv", logs)
        raise
    metrics = write_run_outputs(out, result, config)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise UserError("eval needs --checkpoint PATH")
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.model.config
    if args.config is not None:
        # only the data section may differ; model shape comes from the checkpoint
        override = load_config(args.config)
        config = replace(config, **{k: getattr(override, k) for k in
                                    ("source", "cmapss_dir", "subset", "drop_channels")})
    split = load_datasets(config, normalizer=ckpt.normalizer, t_max=ckpt.t_max)
    report = evaluate(ckpt.model, split.test, split.target_scale, config.target_kind,
                      config.score_convention, config.eval_batch_size)
    write_predictions_csv(args.out / "eval_predictions.csv", report)
    metrics = report.metrics()
    write_metrics_json(args.out / "eval_metrics.json", metrics)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(range(100), base_seed=args.seed or 0)
    table = format_table(rows)
    print(table)
    (args.out / "gradcheck.txt").write_text(table + "\n")
    bad = [r.name for r in rows if not r.passed]
    if bad:
        print(f"gradient check failed (rel-err >= {THRESHOLD:g}): {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    units = synth_degradation(config.synth_units, (config.synth_min_len, config.synth_max_len),
                              config.synth_channels, config.synth_noise, seed=config.seed)
    path = args.out / "synth_train.txt"
    write_cmapss(path, units)
    meta = {"n_units": len(units), "n_channels": config.synth_channels, "seed": config.seed,
            "lengths": [len(u) for u in units]}
    (args.out / "synth_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(units)} units to {path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def _print_metrics(metrics) -> None:
    for key in ("mae", "rmse", "score", "mape"):
        if key in metrics:
            print(f"{key.upper()}: {metrics[key]:.6g}")


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {args.out}: {exc}", file=sys.stderr)
        return EXIT_USER
    lock = FileLock(str(args.out / LOCK_NAME), timeout=0)
    try:
        with lock:
            return COMMANDS[args.command](args)
    except Timeout:
        print(f"error: another rgpd command holds {args.out / LOCK_NAME}", file=sys.stderr)
        return EXIT_USER
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, ConfigError, CheckpointError, DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
