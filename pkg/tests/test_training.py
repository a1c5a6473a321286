import json
import zipfile
from dataclasses import replace

import numpy as np
import pytest

from rgpd.autodiff import Tensor
from rgpd.metrics import metric_mae, metric_rmse, metric_phm_score
from rgpd.rl_weights import ACTION_SPACES
import rgpd.training as training
from rgpd.training import (CHECKPOINT_VERSION, CheckpointError, DivergenceError, evaluate, load_checkpoint,
                           load_datasets, mixup_losses, save_checkpoint, train, write_run_outputs)


@pytest.fixture(scope="module")
def trained(tiny_config, tiny_split):
    return train(tiny_config, tiny_split)


def test_smoke_run_emits_report(trained, tiny_split):
    rep = trained.report
    assert len(rep.unit_ids) == len({w.unit_id for w in tiny_split.test})
    assert rep.rmse >= rep.mae >= 0
    assert len(trained.history) == 3 and 1 <= trained.best_epoch <= 3
    # one initial round plus one per epoch
    assert len(rep.weight_history) == 4
    for r in rep.weight_history:
        assert all(w in s for w, s in zip(r.weights, ACTION_SPACES))
    assert rep.action_trace


def test_report_recomputable_from_predictions(trained):
    rep = trained.report
    assert rep.mae == metric_mae(rep.predictions, rep.targets)
    assert rep.rmse == metric_rmse(rep.predictions, rep.targets)
    assert rep.score == metric_phm_score(rep.predictions, rep.targets)


def test_evaluate_twice_is_identical(trained, tiny_split):
    a = evaluate(trained.model, tiny_split.test, tiny_split.target_scale)
    b = evaluate(trained.model, tiny_split.test, tiny_split.target_scale)
    assert np.array_equal(a.predictions, b.predictions) and a.metrics() == b.metrics()
    assert a.metrics() == trained.report.metrics()


def test_test_targets_are_capped_true_rul(tiny_split, trained):
    by_unit = {}
    for w in tiny_split.test:
        by_unit.setdefault(w.unit_id, set()).add(w.y)
    assert all(len(v) == 1 for v in by_unit.values())
    assert trained.report.targets.tolist() == [by_unit[u].pop() for u in trained.report.unit_ids]


def test_training_loss_decreases_over_first_five_epochs(tiny_config, tiny_split):
    res = train(replace(tiny_config, epochs=5), tiny_split)
    losses = [h.train_loss for h in res.history]
    assert losses[-1] < losses[0]
    assert np.polyfit(np.arange(5), losses, 1)[0] < 0


def test_seeded_runs_are_bit_identical(tiny_config, tiny_split, trained, tmp_path):
    again = train(tiny_config, tiny_split)
    assert np.array_equal(again.report.predictions, trained.report.predictions)
    assert [h.train_loss for h in again.history] == [h.train_loss for h in trained.history]
    for name, res in (("a", trained), ("b", again)):
        (tmp_path / name).mkdir()
        write_run_outputs(tmp_path / name, res, tiny_config)
    for name in ("metrics.json", "weight_history.csv", "predictions.csv", "epochs.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_no_mixup_loss_is_plain_mse():
    pred = Tensor(np.array([0.2, 0.5, 0.9]))
    y = np.array([0.0, 1.0, 1.0])
    per = mixup_losses(pred, y, y[::-1], 1.0)
    assert np.array_equal(per.data, (pred.data - y) ** 2)


@pytest.mark.parametrize("ablate", [["rl"], ["mixup"], ["tau"], ["rl", "mixup", "tau"]])
def test_ablations_train(tiny_config, tiny_split, ablate):
    c = replace(tiny_config, epochs=1).with_ablations(ablate)
    res = train(c, tiny_split)
    assert np.isfinite(res.report.rmse)
    if "rl" in ablate:
        assert res.bank is None and not res.report.action_trace
        fixed = (c.fixed_w1, c.fixed_w2, c.fixed_w3, c.fixed_w4)
        assert all(r.weights == fixed for r in res.report.weight_history)


def test_gradient_accumulation_runs(tiny_config, tiny_split):
    res = train(replace(tiny_config, epochs=1, accumulate=3), tiny_split)
    assert np.isfinite(res.history[0].train_loss)


def test_lr_step_decay(tiny_config, tiny_split, monkeypatch):
    seen = []
    orig = training.Adam

    class Spy(orig):
        def step(self):
            seen.append(self.lr)
            super().step()

    monkeypatch.setattr(training, "Adam", Spy)
    train(replace(tiny_config, epochs=3, lr=1e-3, lr_step=1, lr_decay=0.5, use_rl=False), tiny_split)
    assert sorted(set(seen), reverse=True) == [1e-3, 5e-4, 2.5e-4]


def test_divergence_aborts_and_keeps_last_good_checkpoint(tiny_config, tiny_split, tmp_path, monkeypatch):
    calls = {"n": 0}
    orig = training.mixup_losses
    epoch_batches = len(training.make_batches(tiny_split.train, tiny_config.batch_size))

    def poisoned(pred, y_a, y_b, lam):
        calls["n"] += 1
        out = orig(pred, y_a, y_b, lam)
        if calls["n"] > epoch_batches:
            return out * Tensor(np.nan, _check=False)
        return out

    monkeypatch.setattr(training, "mixup_losses", poisoned)
    ckpt = tmp_path / "c.rgpd"
    with pytest.raises(DivergenceError) as info:
        train(tiny_config, tiny_split, checkpoint_path=ckpt)
    assert info.value.epoch == 2
    assert load_checkpoint(ckpt).meta["version"] == CHECKPOINT_VERSION


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_roundtrip_reproduces_report(trained, tiny_split, tmp_path):
    p = tmp_path / "m.rgpd"
    save_checkpoint(p, trained.model, tiny_split.normalizer, tiny_split.t_max, trained.bank)
    ck = load_checkpoint(p)
    assert np.array_equal(ck.normalizer.mean, tiny_split.normalizer.mean) and ck.t_max == tiny_split.t_max
    rep = evaluate(ck.model, tiny_split.test, tiny_split.target_scale)
    assert rep.metrics() == trained.report.metrics()
    assert np.array_equal(rep.predictions, trained.report.predictions)
    assert np.array_equal(ck.bank_arrays["q0"], trained.bank.agents[0].q_table)


def test_checkpoint_bytes_are_deterministic(trained, tiny_split, tmp_path):
    for name in ("a", "b"):
        save_checkpoint(tmp_path / name, trained.model, tiny_split.normalizer, tiny_split.t_max, trained.bank)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_errors(trained, tiny_split, tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.rgpd")
    (tmp_path / "junk.rgpd").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "junk.rgpd")
    good = tmp_path / "good.rgpd"
    save_checkpoint(good, trained.model, tiny_split.normalizer, tiny_split.t_max)
    old = tmp_path / "old.rgpd"
    with zipfile.ZipFile(good) as src, zipfile.ZipFile(old, "w") as dst:
        for n in src.namelist():
            data = src.read(n)
            if n == "meta.json":
                meta = json.loads(data)
                meta["version"] = "rgpd-ckpt-0"
                data = json.dumps(meta).encode()
            dst.writestr(n, data)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(old)


# -- datasets ------------------------------------------------------------------------------

def test_synthetic_split_sizes(tiny_config, tiny_split):
    units = {w.unit_id for w in tiny_split.train} | {w.unit_id for w in tiny_split.valid}
    test_units = {w.unit_id for w in tiny_split.test}
    assert not units & test_units
    assert len(units | test_units) == tiny_config.synth_units


def test_cmapss_source_layout(tmp_path, tiny_config):
    from rgpd.data import synth_degradation, truncate_units, write_cmapss
    units = synth_degradation(10, (40, 50), 3, seed=0)
    write_cmapss(tmp_path / "train_FD001.txt", units)
    cut = truncate_units(units[:4], np.random.default_rng(0))
    write_cmapss(tmp_path / "test_FD001.txt", cut)
    (tmp_path / "RUL_FD001.txt").write_text("\n".join(str(u.rul_end) for u in cut) + "\n")
    c = replace(tiny_config, source="cmapss", cmapss_dir=str(tmp_path), window_sizes=(10,))
    split = load_datasets(c)
    assert split.n_channels == 21
    assert sorted(w.y for w in split.test) == sorted(min(125.0, u.rul_end) for u in cut)
    (tmp_path / "RUL_FD001.txt").write_text("5\n")
    with pytest.raises(ValueError, match="RUL file"):
        load_datasets(c)
    with pytest.raises(FileNotFoundError):
        load_datasets(replace(c, cmapss_dir=str(tmp_path / "nope")))
