import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgpd.autodiff import Tensor
from rgpd.data import (N_COLUMNS, DataFormatError, Normalizer, UnitTrajectory, fit_normalizer, label_rul,
                       last_windows, load_cmapss, load_rul_file, make_windows, mixup, mixup_batch,
                       prepare_split, split_units, stack_windows, synth_degradation, truncate_units,
                       write_cmapss, write_windows_csv)
from rgpd.physics import monotonicity_loss


def unit(L, uid=1, D=3, rul_end=0, seed=0):
    rng = np.random.default_rng(seed)
    return UnitTrajectory(uid, np.arange(1, L + 1), np.zeros((L, 3)), rng.normal(size=(L, D)),
                          [f"s{i}" for i in range(1, D + 1)], rul_end=rul_end)


def toy_row(uid, cycle, base):
    return " ".join([str(uid), str(cycle)] + [f"{base + k * 0.1:.3f}" for k in range(N_COLUMNS - 2)])


# -- CMAPSS parsing ---------------------------------------------------------------------

def test_load_two_unit_toy_file(tmp_path):
    p = tmp_path / "train.txt"
    rows = [toy_row(u, c, u + c) for u in (1, 2) for c in (1, 2, 3)]
    p.write_text("\n".join(rows) + "\n")
    units = load_cmapss(p)
    assert [len(u) for u in units] == [3, 3]
    assert units[1].unit_id == 2 and units[1].sensors.shape == (3, 21)
    assert units[0].settings[0, 0] == pytest.approx(2.0)


def test_load_sorts_cycles(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("\n".join([toy_row(1, 2, 0.0), toy_row(1, 1, 5.0), toy_row(1, 3, 1.0)]))
    u = load_cmapss(p)[0]
    assert u.cycles.tolist() == [1, 2, 3] and u.settings[0, 0] == pytest.approx(5.0)


def test_load_reports_bad_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text(toy_row(1, 1, 0.0) + "\n1 2 3\n")
    with pytest.raises(DataFormatError, match=r"bad.txt:2"):
        load_cmapss(p)


def test_load_warns_on_gaps(tmp_path, caplog):
    p = tmp_path / "gap.txt"
    p.write_text("\n".join([toy_row(1, 1, 0.0), toy_row(1, 3, 0.0)]))
    load_cmapss(p)
    assert "not contiguous" in caplog.text


def test_load_drops_channels(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("\n".join(toy_row(1, c, 0.0) for c in (1, 2)))
    u = load_cmapss(p, drop_channels=["s1", "s5"])[0]
    assert u.sensors.shape == (2, 19) and "s1" not in u.channel_names and "s5" not in u.channel_names


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_cmapss("/nonexistent/train_FD001.txt")


def test_write_then_load_roundtrip(tmp_path):
    units = synth_degradation(3, (10, 15), 4, seed=1)
    write_cmapss(tmp_path / "s.txt", units)
    back = load_cmapss(tmp_path / "s.txt")
    for a, b in zip(units, back):
        assert np.array_equal(a.cycles, b.cycles)
        assert np.array_equal(a.sensors, b.sensors[:, :4])
        assert np.all(b.sensors[:, 4:] == 0)


def test_rul_file(tmp_path):
    (tmp_path / "RUL.txt").write_text("112\n98 \n\n69\n")
    assert load_rul_file(tmp_path / "RUL.txt").tolist() == [112.0, 98.0, 69.0]


@pytest.mark.skipif(not os.environ.get("RGPD_CMAPSS_DIR"), reason="set RGPD_CMAPSS_DIR to the CMAPSS text files")
def test_fd001_has_100_engines():
    units = load_cmapss(Path(os.environ["RGPD_CMAPSS_DIR"]) / "train_FD001.txt")
    assert len(units) == 100


# -- labels -----------------------------------------------------------------------------

def test_label_examples():
    assert label_rul(unit(5), 125).tolist() == [4, 3, 2, 1, 0]
    labels = label_rul(unit(200), 125)
    assert np.all(labels[:75] == 125) and labels[75] == 124 and labels[-1] == 0
    assert label_rul(unit(300), np.inf).tolist() == list(range(299, -1, -1))


def test_label_truncated_unit_offsets_by_rul_end():
    assert label_rul(unit(4, rul_end=10), 125).tolist() == [13, 12, 11, 10]


def test_label_rejects_bad_cap():
    with pytest.raises(ValueError):
        label_rul(unit(3), 0)


# -- windows ----------------------------------------------------------------------------

def test_window_count_and_ends():
    ws = make_windows(unit(5), [3])
    assert [w.end_cycle for w in ws] == [3, 4, 5]
    assert [w.y for w in ws] == [2.0, 1.0, 0.0]
    assert ws[-1].broken and not ws[0].broken


@given(st.integers(1, 60), st.lists(st.integers(1, 20), min_size=1, max_size=3, unique=True), st.integers(1, 4))
def test_window_count_is_sum_over_sizes(L, sizes, stride):
    u = unit(L)
    ws = make_windows(u, sizes, stride)
    expected = sum(len(range(s, L + 1, stride)) if s <= L else 1 for s in sizes)
    assert len(ws) == expected
    labels = label_rul(u)
    for w in ws:
        assert w.y == labels[w.end_cycle - 1] and w.y >= 0
        assert w.broken == (w.y == 0)
        assert np.all((w.t >= 0) & (w.t <= 1))


def test_short_unit_is_left_padded():
    u = unit(3)
    w = make_windows(u, [5])[0]
    assert w.padded and w.length == 5
    assert np.array_equal(w.x[:3], np.repeat(u.sensors[:1], 3, axis=0))
    assert np.array_equal(w.x[2:], u.sensors)


def test_windows_never_cross_units():
    units = [unit(12, uid=i, seed=i) for i in (1, 2, 3)]
    for u in units:
        for w in make_windows(u, [4, 6]):
            assert w.unit_id == u.unit_id
            start = w.end_cycle - w.length
            assert np.array_equal(w.x, u.sensors[start:w.end_cycle])


def test_window_errors():
    with pytest.raises(ValueError):
        make_windows(unit(5), [])
    with pytest.raises(ValueError):
        make_windows(unit(5), [3], stride=0)


def test_soh_windows_broken_threshold():
    u = synth_degradation(1, (60, 60), 2, seed=3)[0]
    ws = make_windows(u, [10], target_kind="soh")
    for w in ws:
        assert w.broken == (w.y <= 0.8)
    assert any(w.broken for w in ws) and not all(w.broken for w in ws)


def test_last_windows_and_stacking():
    ws = last_windows(unit(50), [10, 20])
    assert [w.length for w in ws] == [10, 20] and all(w.end_cycle == 50 for w in ws)
    b = stack_windows(make_windows(unit(12), [4]))
    assert b["x"].shape == (9, 4, 3) and b["t"].shape == (9, 4)
    with pytest.raises(ValueError):
        stack_windows(ws)


def test_windows_csv(tmp_path):
    write_windows_csv(tmp_path / "w.csv", make_windows(unit(4, D=2), [2]))
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "window,unit,step,t,c0,c1,label,broken" and len(lines) == 1 + 3 * 2


# -- normalisation ----------------------------------------------------------------------

def test_normalizer_standardises_fit_set():
    rng = np.random.default_rng(4)
    x = rng.normal(5.0, 3.0, size=(500, 4))
    z = fit_normalizer([x]).apply(x)
    assert np.allclose(z.mean(axis=0), 0, atol=1e-6) and np.allclose(z.std(axis=0), 1, atol=1e-6)


def test_normalizer_constant_channel_and_roundtrip():
    rng = np.random.default_rng(5)
    x = np.column_stack([rng.normal(size=50), np.full(50, 7.0)])
    n = fit_normalizer([x])
    z = n.apply(x)
    assert np.all(z[:, 1] == 0) and np.all(np.isfinite(z))
    assert np.max(np.abs(n.denormalize(z) - x)) <= 1e-10


def test_normalizer_requires_fit():
    with pytest.raises(RuntimeError):
        Normalizer().apply(np.ones((2, 2)))


def test_split_statistics_come_from_train_only():
    units = synth_degradation(10, (60, 80), 3, seed=6)
    tr, va, te = split_units(units, (0.6, 0.2, 0.2), seed=0)
    split = prepare_split(tr, va, te, window_sizes=(10,))
    rows = np.concatenate([u.sensors for u in tr])
    assert np.array_equal(split.normalizer.mean, rows.mean(axis=0))
    assert np.array_equal(split.normalizer.std, rows.std(axis=0))
    u = va[0]
    w = split.valid[0]
    assert np.array_equal(w.x, split.normalizer.apply(u.sensors)[:10])
    assert len(split.test) == len(te)


def test_prepare_split_reuses_stored_statistics():
    units = synth_degradation(6, (40, 50), 2, seed=7)
    n = Normalizer()
    n.mean, n.std = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    split = prepare_split(units[:4], units[4:5], units[5:], window_sizes=(10,), normalizer=n, t_max=500.0)
    assert split.normalizer is n and split.t_max == 500.0


def test_thread_count_does_not_change_windows(monkeypatch):
    units = synth_degradation(6, (40, 50), 2, seed=8)
    monkeypatch.setenv("RGPD_THREADS", "1")
    a = prepare_split(units[:4], units[4:5], units[5:], window_sizes=(10, 15))
    monkeypatch.setenv("RGPD_THREADS", "3")
    b = prepare_split(units[:4], units[4:5], units[5:], window_sizes=(10, 15))
    assert len(a.train) == len(b.train)
    assert all(np.array_equal(p.x, q.x) and p.y == q.y for p, q in zip(a.train, b.train))


# -- mixup ------------------------------------------------------------------------------

def test_mixup_examples():
    rng = np.random.default_rng(9)
    xi, xj = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    x, y, lam = mixup(xi, 3.0, xj, 8.0, 0.2, rng, lam=1.0)
    assert np.array_equal(x, xi) and y == 3.0
    _, y, _ = mixup(xi, 10.0, xj, 20.0, 0.2, rng, lam=0.5)
    assert y == 15.0
    with pytest.raises(ValueError):
        mixup(xi, 1.0, xj[:2], 1.0, 0.2, rng)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_mixup_is_convex(seed, alpha):
    rng = np.random.default_rng(seed)
    xi, xj = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    x, y, lam = mixup(xi, 1.0, xj, 4.0, alpha, rng)
    assert 0.0 <= lam <= 1.0 and 1.0 <= y <= 4.0
    assert np.all(x >= np.minimum(xi, xj) - 1e-12) and np.all(x <= np.maximum(xi, xj) + 1e-12)


def test_mixup_lambda_in_unit_interval_over_many_draws():
    lam = np.random.default_rng(10).beta(0.2, 0.2, size=100_000)
    assert np.all((lam >= 0) & (lam <= 1))


def test_mixup_batch_pairs_with_permutation():
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(6, 4, 2)), np.arange(6.0)
    xm, ya, yb, lam, perm = mixup_batch(x, y, 0.4, rng)
    assert np.allclose(xm, lam * x + (1 - lam) * x[perm])
    assert np.array_equal(ya, y) and np.array_equal(yb, y[perm])


# -- synthetic ----------------------------------------------------------------------------

def test_synth_counts_and_lengths():
    units = synth_degradation(50, (100, 200), 8, seed=12)
    assert len(units) == 50
    assert all(100 <= len(u) <= 200 for u in units)
    assert all(u.sensors.shape[1] == 8 for u in units)


def test_synth_deterministic():
    a = synth_degradation(5, (30, 40), 4, seed=13)
    b = synth_degradation(5, (30, 40), 4, seed=13)
    assert all(np.array_equal(p.sensors, q.sensors) for p, q in zip(a, b))


def test_synth_noiseless_channels_are_monotone_and_labels_satisfy_monotonicity():
    for u in synth_degradation(10, (50, 90), 5, noise=0.0, seed=14):
        d = np.diff(u.sensors, axis=0)
        for c in range(5):
            assert np.all(d[:, c] >= -1e-12) or np.all(d[:, c] <= 1e-12)
        labels = label_rul(u, 125)
        assert monotonicity_loss(Tensor(labels[None]))[1].item() == 0.0


def test_truncation_sets_true_rul():
    units = synth_degradation(5, (50, 60), 2, seed=15)
    cut = truncate_units(units, np.random.default_rng(0))
    for full, c in zip(units, cut):
        assert len(c) + c.rul_end == len(full)
        assert label_rul(c, np.inf)[-1] == c.rul_end


def test_split_units_partitions_everything():
    units = synth_degradation(20, (10, 12), 2, seed=16)
    groups = split_units(units, (0.7, 0.15, 0.15), seed=1)
    ids = sorted(u.unit_id for g in groups for u in g)
    assert ids == list(range(1, 21)) and [len(g) for g in groups] == [14, 3, 3]
