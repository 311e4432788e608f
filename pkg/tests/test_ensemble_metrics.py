import dataclasses
import itertools

import numpy as np
import pytest

from detgn.ensemble import (
    EnsembleSpec,
    SampleSet,
    ensemble_sample,
    load_samples,
    mc_sample,
    mean_prediction,
    save_samples,
    train_ensemble,
)
from detgn.metrics import (
    apd,
    clip_labels,
    horizon_table,
    mpjpe,
    report_rows,
    rows_to_csv,
    rows_to_json,
)
from detgn.motion import SyntheticConfig, split_dataset, synthesize
from detgn.numerics import RngStream
from detgn.tgn import TgnConfig, TrainConfig, forward, init_params, train

CFG = TgnConfig(hidden=8, dilations=(1, 2))


def random_params(cfg, seed):
    p = init_params(cfg, RngStream(seed))
    g = np.random.default_rng(seed)
    return p.with_arrays({k: v + 0.2 * g.normal(size=np.shape(v)) for k, v in p.arrays().items()})


def small_split():
    seqs = synthesize(SyntheticConfig(trajectories=8, frames=40))
    return split_dataset(seqs, (0.75, 0.125, 0.125), 0, 10, 25, 5)


# ensemble training ---------------------------------------------------------------


def test_spec_rejects_equal_seeds():
    with pytest.raises(ValueError):
        EnsembleSpec(seeds=(5, 5))
    with pytest.raises(ValueError):
        EnsembleSpec(seeds=())


def test_single_member_equals_plain_training():
    split = small_split()
    tcfg = TrainConfig(max_epochs=1)
    [(p, _)] = train_ensemble(split, EnsembleSpec((7,), CFG, tcfg))
    q, _ = train(split, CFG, dataclasses.replace(tcfg, seed=7))
    for k, v in q.arrays().items():
        np.testing.assert_array_equal(p.arrays()[k], v)


def test_members_differ():
    members = train_ensemble(small_split(), EnsembleSpec((0, 1, 2), CFG, TrainConfig(max_epochs=1)))
    arrays = [m.arrays() for m, _ in members]
    for a, b in itertools.combinations(arrays, 2):
        assert max(np.max(np.abs(a[k] - b[k])) for k in a) > 0


def test_parallel_training_matches_serial():
    split = small_split()
    spec = EnsembleSpec((0, 1), CFG, TrainConfig(max_epochs=1))
    serial = train_ensemble(split, spec)
    parallel = train_ensemble(split, spec, workers=2)
    for (a, _), (b, _) in zip(serial, parallel):
        for k, v in a.arrays().items():
            np.testing.assert_array_equal(b.arrays()[k], v)


# sampling ------------------------------------------------------------------------


def history(seed=0):
    return np.random.default_rng(seed).normal(scale=100.0, size=(10, 3, 3))


def test_rate_zero_gives_identical_samples():
    p = random_params(CFG, 1)
    ss = mc_sample(p, CFG, history(), 6, 0.0, RngStream(3))
    for s in ss.samples[1:]:
        np.testing.assert_array_equal(s, ss.samples[0])
    assert apd(ss) == 0.0
    assert ss.dropout_rate == 0.0


def test_single_sample_equals_mc_forward():
    p = random_params(CFG, 2)
    ss = mc_sample(p, CFG, history(), 1, None, RngStream(4))
    direct = forward(history()[None], p, CFG, "mc", RngStream(4))
    np.testing.assert_array_equal(ss.samples, direct)


def test_mc_sampling_replays_and_varies():
    p = random_params(CFG, 3)
    a = mc_sample(p, CFG, history(), 8, 0.2, RngStream(5))
    b = mc_sample(p, CFG, history(), 8, 0.2, RngStream(5))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.member_of == b.member_of
    assert apd(a) > 0


def test_mc_sample_rejects_bad_rate():
    with pytest.raises(ValueError):
        mc_sample(random_params(CFG, 0), CFG, history(), 2, 1.0, RngStream(0))


def test_ensemble_sample_layout():
    members = [random_params(CFG, s) for s in range(3)]
    ss = ensemble_sample(members, CFG, history(), rng_root=RngStream(9), window_id="w@0")
    assert ss.samples.shape == (33, 25, 3, 3)
    assert ss.member_of == (0,) * 11 + (1,) * 11 + (2,) * 11
    assert ss.window_id == "w@0"


def test_single_member_ensemble_equals_mc_sample():
    p = random_params(CFG, 4)
    root = RngStream(11)
    ss = ensemble_sample([p], CFG, history(), per_member=5, rng_root=root)
    direct = mc_sample(p, CFG, history(), 5, None, root.child(0))
    np.testing.assert_array_equal(ss.samples, direct.samples)


def test_sample_file_round_trip():
    p = random_params(CFG, 5)
    ss = mc_sample(p, CFG, history(), 4, 0.1, RngStream(1), window_id="s@3")
    data = save_samples(ss)
    back = load_samples(data)
    np.testing.assert_array_equal(back.samples, ss.samples)
    assert back.member_of == ss.member_of and back.window_id == "s@3"
    assert save_samples(back) == data


def test_sample_set_validation():
    with pytest.raises(ValueError):
        SampleSet(np.zeros((2, 3, 3)), (0, 0), 0.0)
    with pytest.raises(ValueError):
        SampleSet(np.zeros((2, 3, 1, 3)), (0,), 0.0)
    with pytest.raises(ValueError):
        SampleSet(np.full((1, 3, 1, 3), np.nan), (0,), 0.0)


# mean prediction -----------------------------------------------------------------


def test_mean_prediction_examples():
    g = np.random.default_rng(6)
    a, b = g.normal(size=(5, 2, 3)), g.normal(size=(5, 2, 3))
    np.testing.assert_array_equal(mean_prediction([a, a, a]), a)
    np.testing.assert_allclose(mean_prediction([a, b]), (a + b) / 2, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        mean_prediction([])


def test_mean_error_below_mean_of_errors():
    g = np.random.default_rng(7)
    for _ in range(20):
        truth = g.normal(size=(6, 3, 3))
        preds = truth + g.normal(scale=3.0, size=(3, 6, 3, 3))
        err_mean = np.linalg.norm(mean_prediction(preds) - truth, axis=-1)
        mean_err = np.mean(np.linalg.norm(preds - truth, axis=-1), axis=0)
        assert np.all(err_mean <= mean_err + 1e-12)
        assert mpjpe(mean_prediction(preds), truth) <= np.mean([mpjpe(p, truth) for p in preds]) + 1e-12


# metrics -------------------------------------------------------------------------


def loop_mpjpe(pred, truth):
    total = 0.0
    for t in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += np.sqrt(sum((pred[t, j, k] - truth[t, j, k]) ** 2 for k in range(3)))
    return total / (pred.shape[0] * pred.shape[1])


def loop_apd(s):
    n, t_len = s.shape[0], s.shape[1]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            per_frame = 0.0
            for t in range(t_len):
                per_frame += np.sqrt(np.sum((s[i, t] - s[j, t]) ** 2))
            total += per_frame / t_len
    return 2.0 * total / (n * (n - 1))


def random_rotation(g):
    q, r = np.linalg.qr(g.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_mpjpe_examples():
    g = np.random.default_rng(8)
    y = g.normal(size=(10, 4, 3))
    assert mpjpe(y, y) == 0.0
    assert mpjpe(y + np.array([0.0, 7.25, 0.0]), y) == pytest.approx(7.25, rel=1e-14)
    x = g.normal(size=(10, 4, 3))
    assert abs(mpjpe(x, y) - loop_mpjpe(x, y)) < 1e-12
    with pytest.raises(ValueError):
        mpjpe(x, y[:5])
    with pytest.raises(ValueError):
        mpjpe(x, y, up_to_frame=0)


def test_mpjpe_invariances():
    g = np.random.default_rng(9)
    x, y = g.normal(size=(2, 8, 3, 3))
    q, t = random_rotation(g), g.normal(size=3)
    assert abs(mpjpe(x @ q.T + t, y @ q.T + t) - mpjpe(x, y)) < 1e-9
    assert mpjpe(3.5 * x, 3.5 * y) == pytest.approx(3.5 * mpjpe(x, y), rel=1e-12)


def test_apd_examples():
    g = np.random.default_rng(10)
    base = g.normal(size=(6, 3, 3))
    assert apd(np.stack([base] * 4)) == 0.0
    shifted = base.copy()
    shifted[:, 1, 2] += 2.5
    assert apd(np.stack([base, shifted])) == pytest.approx(2.5, rel=1e-14)
    s = g.normal(size=(5, 6, 3, 3))
    assert abs(apd(s) - loop_apd(s)) < 1e-12
    with pytest.raises(ValueError):
        apd(s[:1])


def test_apd_invariances():
    g = np.random.default_rng(11)
    s = g.normal(size=(6, 5, 3, 3))
    q, t = random_rotation(g), g.normal(size=3)
    assert abs(apd(s @ q.T + t) - apd(s)) < 1e-9
    assert abs(apd(s[g.permutation(6)]) - apd(s)) < 1e-12
    assert apd(s) > 0


def test_horizon_frames_at_25_fps():
    t = 50
    truth = np.zeros((t, 1, 3))
    pred = np.zeros((t, 1, 3))
    pred[:, 0, 0] = np.arange(1, t + 1)  # error at frame k is k
    table = horizon_table(pred, truth, 25.0)
    assert table.entries == {80: 2.0, 160: 4.0, 320: 8.0, 400: 10.0, 1000: 25.0, 2000: 50.0}
    cumulative = horizon_table(pred, truth, 25.0, (80,), cumulative=True)
    assert cumulative.entries[80] == 1.5


def test_horizon_zero_error_and_range():
    y = np.random.default_rng(12).normal(size=(25, 2, 3))
    assert all(v == 0.0 for v in horizon_table(y, y, 25.0, (80, 400, 1000)).entries.values())
    with pytest.raises(ValueError):
        horizon_table(y, y, 25.0)  # 2000 ms is frame 50 > 25
    assert clip_labels((80, 160, 320, 400, 1000, 2000), 25.0, 25) == [80, 160, 320, 400, 1000]


def test_baseline_table_monotone_on_diverging_motion():
    from detgn.tgn import zero_velocity_baseline

    t = np.arange(60, dtype=float)
    seq = np.zeros((60, 2, 3))
    seq[:, 0, 0] = 0.5 * t**2  # accelerating away from the last observed pose
    seq[:, 1, 1] = 3.0 * t
    pred = zero_velocity_baseline(seq[:10], 50)
    vals = list(horizon_table(pred, seq[10:], 25.0).entries.values())
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_report_rows_serialize_stably():
    y = np.zeros((25, 1, 3))
    table = horizon_table(y + 1.0, y, 25.0, (80, 1000))
    rows = report_rows(table, full=1.0, diversity=0.0)
    csv = rows_to_csv(rows).decode().splitlines()
    assert csv[0] == "metric,horizon_ms,value_mm"
    assert csv[1:] == ["mpjpe,80,1.7320508075688772", "mpjpe,1000,1.7320508075688772", "mpjpe,all,1.0", "apd,all,0.0"]
    assert rows_to_json(rows) == rows_to_json(report_rows(table, full=1.0, diversity=0.0))
