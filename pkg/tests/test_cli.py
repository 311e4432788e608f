import json

import numpy as np
import pytest

from detgn import cli, jsonio
from detgn.ensemble import load_samples
from detgn.geometry import load_boundaries
from detgn.metrics import apd
from detgn.motion import KinematicTree, MotionSequence, Node, save_motion
from detgn.tgn import TrainingDivergedError

SMALL = ["--set", "data.trajectories=8", "--set", "data.frames=40"]
FAST = ["--set", "train.max_epochs=1", "--set", "model.hidden=8", "--set", "model.dilations=[1,2]"]


def run(*args):
    return cli.main([str(a) for a in args])


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "ds", *SMALL) == 0
    assert run("train", "--out", root / "run", "--set", f"io.dataset={root / 'ds'}", *FAST) == 0
    return root


def window_args(root):
    return ["--set", f"io.models={root / 'run' / 'models'}", "--set", f"io.window={root / 'run' / 'test_windows.json'}"]


# config ------------------------------------------------------------------------


def test_config_layers_and_unknown_keys():
    cfg = cli.build_config({"model": {"hidden": 16}}, ["model.hidden=32", "boundary.alpha=0.1"], seed=7)
    assert cfg["model"]["hidden"] == 32 and cfg["boundary"]["alpha"] == 0.1
    assert cfg["ensemble"]["seeds"] == [7, 8, 9]
    with pytest.raises(cli.ConfigError):
        cli.build_config({"model": {"nope": 1}})
    with pytest.raises(cli.ConfigError):
        cli.build_config(None, ["nosection=1"])
    with pytest.raises(cli.ConfigError):
        cli.build_config({"extra": {}})


def test_config_file_is_read(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"data": {"trajectories": 2, "frames": 10}}))
    assert run("synth", "--config", path, "--out", tmp_path / "o") == 0
    assert len(list((tmp_path / "o" / "motion").iterdir())) == 2


# synth -------------------------------------------------------------------------


def test_synth_is_byte_identical(tmp_path):
    assert run("synth", "--out", tmp_path / "a", *SMALL) == 0
    assert run("synth", "--out", tmp_path / "b", *SMALL) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    manifest = jsonio.loads((tmp_path / "a" / "manifest.json").read_bytes())
    assert len(manifest["files"]) == 8


def test_synth_zero_trajectories(tmp_path):
    assert run("synth", "--out", tmp_path, "--set", "data.trajectories=0") == 0
    assert jsonio.loads((tmp_path / "manifest.json").read_bytes())["files"] == []


# train -------------------------------------------------------------------------


def test_train_writes_one_model_per_member(trained):
    models = trained / "run" / "models"
    assert sorted(p.name for p in models.glob("model-*.json")) == [f"model-seed{s}.json" for s in range(3)]
    assert len(list(models.glob("loss-*.csv"))) == 3


def test_train_rerun_is_identical(trained, tmp_path):
    assert run("train", "--out", tmp_path, "--set", f"io.dataset={trained / 'ds'}", *FAST) == 0
    assert files(tmp_path) == files(trained / "run")


def test_missing_dataset_is_validation_error(tmp_path, capsys):
    assert run("train", "--out", tmp_path, "--set", "io.dataset=/does/not/exist") == 1
    assert "does not exist" in capsys.readouterr().err


def test_training_failure_exits_2_and_cleans_up(trained, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingDivergedError("non-finite loss")

    monkeypatch.setattr(cli, "train_ensemble", boom)
    assert run("train", "--out", tmp_path, "--set", f"io.dataset={trained / 'ds'}", *FAST) == 2
    assert not any(p.is_file() for p in tmp_path.rglob("*"))


def test_partial_outputs_removed(trained, tmp_path, monkeypatch):
    assert run("sample", "--out", tmp_path / "s", *window_args(trained)) == 0

    def fail(*a, **k):
        raise ValueError("disk full")

    monkeypatch.setattr(cli.geometry, "surface_csv", fail)
    out = tmp_path / "b"
    assert run("boundary", "--out", out, "--set", f"io.samples={tmp_path / 's' / 'samples.json'}") == 1
    assert not (out / "boundaries.json").exists()


# predict / sample ----------------------------------------------------------------


def test_default_sampling_gives_33(trained, tmp_path):
    assert run("sample", "--out", tmp_path, *window_args(trained)) == 0
    ss = load_samples((tmp_path / "samples.json").read_bytes())
    assert ss.samples.shape == (33, 25, 3, 3)
    assert apd(ss) > 0


def test_rate_zero_single_member_has_zero_apd(trained, tmp_path):
    args = window_args(trained) + ["--set", "sampling.rate=0", "--set", "sampling.per_member=5"]
    assert run("sample", "--out", tmp_path, *args) == 0
    ss = load_samples((tmp_path / "samples.json").read_bytes())
    assert apd(ss.samples[:5]) == 0.0


def test_predict_matches_rate_zero_samples(trained, tmp_path):
    assert run("predict", "--out", tmp_path / "p", *window_args(trained)) == 0
    assert run("sample", "--out", tmp_path / "s", *window_args(trained), "--set", "sampling.rate=0") == 0
    pred = np.array(jsonio.loads((tmp_path / "p" / "forecast.json").read_bytes())["forecast"])
    ss = load_samples((tmp_path / "s" / "samples.json").read_bytes())
    np.testing.assert_allclose(pred, ss.samples.mean(axis=0), rtol=0, atol=1e-9)


def test_shape_mismatch_window(trained, tmp_path):
    bad = tmp_path / "w.json"
    bad.write_bytes(jsonio.dumps({"history": np.zeros((5, 3, 3))}).encode())
    args = ["--set", f"io.models={trained / 'run' / 'models'}", "--set", f"io.window={bad}"]
    assert run("predict", "--out", tmp_path / "o", *args) == 1


# boundary / proximity ------------------------------------------------------------


def write_samples(path, samples):
    from detgn.ensemble import SampleSet, save_samples

    path.write_bytes(save_samples(SampleSet(samples, (0,) * len(samples), 0.0)))


def test_degenerate_samples_flagged(tmp_path):
    one = np.random.default_rng(0).normal(scale=100.0, size=(1, 4, 3, 3))
    write_samples(tmp_path / "s.json", np.repeat(one, 6, axis=0))
    assert run("boundary", "--out", tmp_path / "b", "--set", f"io.samples={tmp_path / 's.json'}") == 0
    frames = load_boundaries((tmp_path / "b" / "boundaries.json").read_bytes())
    assert all(e.degenerate for f in frames for _, e in f.joints)
    assert all(s.fallback or s.boundary.degenerate for f in frames for s in f.segments)


def test_robot_through_joint_mean_reports_violation(tmp_path):
    g = np.random.default_rng(1)
    rest = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -300.0], [250.0, 0.0, -300.0]])
    write_samples(tmp_path / "s.json", rest + g.normal(scale=5.0, size=(12, 3, 3, 3)))
    assert run("boundary", "--out", tmp_path / "b", "--set", f"io.samples={tmp_path / 's.json'}") == 0
    frames = load_boundaries((tmp_path / "b" / "boundaries.json").read_bytes())
    centers = np.array([f.joints[1][1].center for f in frames])
    # robot vertices plus a human placeholder node; proximity reads the robot nodes only
    robot = np.stack([centers - [0, 500, 0], centers + [0, 500, 0], centers], axis=1)
    tree = KinematicTree((Node("r0", "robot"), Node("r1", "robot"), Node("h")), ((0, 1),))
    (tmp_path / "robot.json").write_bytes(save_motion(MotionSequence(tree, 25.0, robot)))
    args = ["--set", f"io.boundaries={tmp_path / 'b' / 'boundaries.json'}", "--set", f"io.robot={tmp_path / 'robot.json'}"]
    assert run("proximity", "--out", tmp_path / "x", *args) == 0
    rows = jsonio.loads((tmp_path / "x" / "proximity.json").read_bytes())["rows"]
    assert any(r["violation"] and r["human_element"] == "joint:1" for r in rows)
    bad = tmp_path / "short.json"
    bad.write_bytes(save_motion(MotionSequence(tree, 25.0, robot[:2])))
    args[-1] = f"io.robot={bad}"
    assert run("proximity", "--out", tmp_path / "y", *args) == 1


def test_too_few_samples_rejected(tmp_path):
    write_samples(tmp_path / "s.json", np.random.default_rng(2).normal(size=(3, 2, 2, 3)))
    assert run("boundary", "--out", tmp_path / "b", "--set", f"io.samples={tmp_path / 's.json'}") == 1


# eval ----------------------------------------------------------------------------


def test_eval_perfect_prediction_is_zero(trained, tmp_path):
    truth = trained / "run" / "test_windows.json"
    for out in ("a", "b"):
        assert run("eval", "--out", tmp_path / out, "--set", f"io.pred={truth}", "--set", f"io.truth={truth}") == 0
    text = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in text[1:]] == ["80", "160", "320", "400", "1000", "all"]
    assert all(float(r.split(",")[2]) == 0.0 for r in text[1:])
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_eval_shape_mismatch(trained, tmp_path):
    pred = tmp_path / "f.json"
    pred.write_bytes(jsonio.dumps({"forecast": np.zeros((10, 3, 3))}).encode())
    args = ["--set", f"io.pred={pred}", "--set", f"io.truth={trained / 'run' / 'test_windows.json'}"]
    assert run("eval", "--out", tmp_path / "o", *args) == 1
