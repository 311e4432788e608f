"""Batch command line: synth, train, predict, sample, boundary, proximity, eval.

Every command reads one JSON run config (``--config``) with sections data,
model, train, ensemble, sampling, boundary and io, applies ``--set
section.key=value`` overrides and writes its artifacts under ``--out``.
Exit codes: 0 success, 1 invalid input or config, 2 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from detgn import geometry, jsonio, metrics
from detgn.ensemble import EnsembleSpec, ensemble_sample, load_samples, mean_prediction, save_samples, train_ensemble
from detgn.motion import KinematicTree, MotionFormatError, Node, SyntheticConfig, load_motion, preprocess, save_motion
from detgn.motion import split_dataset, synthesize
from detgn.numerics import RngStream
from detgn.tgn import ModelFileError, TgnConfig, TrainConfig, forward, load_params, save_params

log = logging.getLogger("detgn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "data": {
        "preset": "arm-3-node",
        "joint_count": 3,
        "trajectories": 400,
        "frames": 80,
        "fps": 25.0,
        "frequency_range": [0.2, 0.8],
        "amplitude_range": [0.3, 0.9],
        "translation_range": [0.0, 0.0],
        "noise_std": 0.0,
        "seed": 0,
        "ratios": [0.75, 0.125, 0.125],
        "stride": 5,
        "target_fps": 25.0,
        "root_joint": 0,
    },
    "model": {k: v for k, v in TgnConfig().to_dict().items() if k not in ("joints", "robot_channels")},
    "train": {**dataclasses.asdict(TrainConfig()), "workers": 1},
    "ensemble": {"members": 3, "seeds": None},
    "sampling": {"per_member": 11, "rate": None, "seed": 0},
    "boundary": {"alpha": 0.05, "resolution": 16},
    "io": {
        "dataset": None,
        "models": None,
        "window": None,
        "window_index": 0,
        "samples": None,
        "boundaries": None,
        "robot": None,
        "pred": None,
        "truth": None,
        "tree": None,
    },
}
DEFAULTS["train"].pop("seed")
DEFAULTS["model"].pop("seed")
DEFAULTS["model"]["dilations"] = list(DEFAULTS["model"]["dilations"])


class ConfigError(ValueError):
    pass


# config ------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(doc: dict | None, overrides: list[str] = (), seed: int | None = None) -> dict:
    """Defaults, then the config document, then ``--set`` overrides; unknown keys are errors."""
    cfg = copy.deepcopy(DEFAULTS)
    layers = [doc or {}]
    for item in overrides:
        key, sep, val = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        layers.append({section: {name: _parse_value(val)}})
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("config must be a JSON object")
        for section, values in layer.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for k, v in values.items():
                if k not in cfg[section]:
                    raise ConfigError(f"unknown key {section}.{k}")
                cfg[section][k] = v
    if seed is not None:
        cfg["data"]["seed"] = seed
        cfg["sampling"]["seed"] = seed
        if cfg["ensemble"]["seeds"] is None:
            cfg["ensemble"]["seeds"] = [seed + m for m in range(int(cfg["ensemble"]["members"]))]
    return cfg


def member_seeds(cfg: dict) -> tuple[int, ...]:
    seeds = cfg["ensemble"]["seeds"]
    if seeds is None:
        seeds = list(range(int(cfg["ensemble"]["members"])))
    if len(seeds) != int(cfg["ensemble"]["members"]):
        raise ConfigError("ensemble.seeds must list one seed per member")
    return tuple(int(s) for s in seeds)


def synthetic_config(cfg: dict) -> SyntheticConfig:
    d = cfg["data"]
    return SyntheticConfig(
        preset=d["preset"],
        joint_count=int(d["joint_count"]),
        trajectories=int(d["trajectories"]),
        frames=int(d["frames"]),
        fps=float(d["fps"]),
        frequency_range=tuple(d["frequency_range"]),
        amplitude_range=tuple(d["amplitude_range"]),
        translation_range=tuple(d["translation_range"]),
        noise_std=float(d["noise_std"]),
        seed=int(d["seed"]),
    )


def human_subtree(tree: KinematicTree) -> KinematicTree:
    human = tree.human_indices
    pos = {node: k for k, node in enumerate(human)}
    return KinematicTree(
        tuple(Node(tree.nodes[i].name) for i in human),
        tuple((pos[i], pos[j]) for i, j in tree.human_edges),
    )


# output bookkeeping -----------------------------------------------------------


class Outputs:
    """Records written files so a failed command can remove its partial outputs."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []

    def write(self, rel: str, data: bytes) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.written.append(path)
        return path

    def rollback(self):
        for p in reversed(self.written):
            p.unlink(missing_ok=True)


def _require(cfg: dict, key: str) -> Path:
    value = cfg["io"][key]
    if value is None:
        raise ConfigError(f"io.{key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"io.{key} path {path} does not exist")
    return path


def _read_json(path: Path):
    return jsonio.loads(path.read_bytes())


# windows and forecasts --------------------------------------------------------


def _window_doc(w, human, robot) -> dict:
    doc = {"window_id": w.window_id, "history": w.history[:, human], "future": w.future[:, human]}
    if robot:
        doc["robot_history"] = w.history[:, robot]
    return doc


def load_window(path: Path, index: int = 0) -> dict:
    doc = _read_json(path)
    if "windows" in doc:
        if not 0 <= index < len(doc["windows"]):
            raise ConfigError(f"window index {index} outside 0..{len(doc['windows']) - 1}")
        doc = doc["windows"][index]
    if "history" not in doc:
        raise ConfigError(f"{path} holds no window history")
    out = {"window_id": doc.get("window_id", ""), "history": np.array(doc["history"], dtype=np.float64)}
    for key in ("future", "robot_history"):
        if key in doc:
            out[key] = np.array(doc[key], dtype=np.float64)
    return out


def load_poses(path: Path, index: int = 0) -> np.ndarray:
    """(T, J, 3) poses from a forecast file or the future part of a window file."""
    doc = _read_json(path)
    if "forecast" in doc:
        return np.array(doc["forecast"], dtype=np.float64)
    w = load_window(path, index)
    if "future" not in w:
        raise ConfigError(f"{path} holds no future poses")
    return w["future"]


def load_models(path: Path):
    manifest = _read_json(path / "models.json" if path.is_dir() else path)
    base = path if path.is_dir() else path.parent
    members = []
    cfg = None
    for m in manifest["members"]:
        params, mcfg = load_params((base / m["file"]).read_bytes(), cfg)
        cfg = mcfg
        members.append(params)
    if not members:
        raise ConfigError("model manifest lists no members")
    return members, cfg, manifest


# commands ----------------------------------------------------------------------


def cmd_synth(cfg: dict, out: Outputs):
    seqs = synthesize(synthetic_config(cfg))
    files = []
    for seq in seqs:
        rel = f"motion/{seq.source_id}.json"
        out.write(rel, save_motion(seq))
        files.append(rel)
    manifest = {"version": 1, "kind": "dataset", "data": cfg["data"], "files": files}
    out.write("manifest.json", jsonio.dumps(manifest).encode())
    return {"trajectories": len(files)}


def _load_dataset(cfg: dict):
    path = _require(cfg, "dataset")
    manifest = _read_json(path / "manifest.json" if path.is_dir() else path)
    base = path if path.is_dir() else path.parent
    d = cfg["data"]
    seqs = []
    for rel in manifest.get("files", []):
        seq = load_motion((base / rel).read_bytes())
        seqs.append(preprocess(seq, d["target_fps"], d["root_joint"]))
    if not seqs:
        raise ConfigError("dataset is empty")
    return seqs


def cmd_train(cfg: dict, out: Outputs):
    seqs = _load_dataset(cfg)
    tree = seqs[0].tree
    human, robot = tree.human_indices, tree.robot_indices
    model = TgnConfig.from_dict({**cfg["model"], "joints": len(human), "robot_channels": 3 * len(robot)})
    tdict = {k: v for k, v in cfg["train"].items() if k != "workers"}
    spec = EnsembleSpec(member_seeds(cfg), model, TrainConfig.from_dict(tdict))
    d = cfg["data"]
    split = split_dataset(seqs, tuple(d["ratios"]), int(d["seed"]), model.n_history, model.n_future, int(d["stride"]))
    results = train_ensemble(split, spec, human, robot, workers=int(cfg["train"]["workers"]))
    members = []
    for m, (seed, (params, tlog)) in enumerate(zip(spec.seeds, results)):
        name = f"model-seed{seed}.json"
        out.write(f"models/{name}", save_params(params, model))
        curve = io.StringIO()
        w = csv.writer(curve, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "validation_loss"])
        for e in tlog.epochs:
            w.writerow([e["epoch"], jsonio.format_float(e["train_loss"]), jsonio.format_float(e["validation_loss"])])
        out.write(f"models/loss-seed{seed}.csv", curve.getvalue().encode())
        members.append({"member": m, "seed": seed, "file": name, "best_epoch": tlog.best_epoch,
                        "best_validation": tlog.best_validation})
        log.info("member %d (seed %d): best validation %.4f at epoch %d, %.1f s",
                 m, seed, tlog.best_validation, tlog.best_epoch, tlog.seconds)
    manifest = {"version": 1, "kind": "models", "model": model.to_dict(), "tree": human_subtree(tree).to_dict(),
                "fps": float(d["target_fps"]), "members": members}
    out.write("models/models.json", jsonio.dumps(manifest).encode())
    windows = {"version": 1, "windows": [_window_doc(w, human, robot) for w in split.test]}
    out.write("test_windows.json", jsonio.dumps(windows).encode())
    return {"members": len(members), "test_windows": len(split.test)}


def _window_inputs(cfg: dict):
    members, model, manifest = load_models(_require(cfg, "models"))
    window = load_window(_require(cfg, "window"), int(cfg["io"]["window_index"]))
    if window["history"].shape != (model.n_history, model.joints, 3):
        raise ConfigError(f"window history {window['history'].shape} does not fit the model")
    return members, model, manifest, window


def cmd_predict(cfg: dict, out: Outputs):
    members, model, _, window = _window_inputs(cfg)
    forecasts = [forward(window["history"], p, model, "eval", robot=window.get("robot_history")) for p in members]
    doc = {"version": 1, "window_id": window["window_id"], "forecast": mean_prediction(forecasts)}
    out.write("forecast.json", jsonio.dumps(doc).encode())
    return {"members": len(members)}


def cmd_sample(cfg: dict, out: Outputs):
    members, model, _, window = _window_inputs(cfg)
    s = cfg["sampling"]
    ss = ensemble_sample(
        members, model, window["history"], int(s["per_member"]), s["rate"],
        RngStream(int(s["seed"])).child("sampling"), window.get("robot_history"), window["window_id"],
    )
    out.write("samples.json", save_samples(ss))
    return {"samples": ss.size}


def _boundary_tree(cfg: dict, joints: int) -> KinematicTree:
    if cfg["io"]["tree"] is not None:
        return human_subtree(KinematicTree.from_dict(_read_json(_require(cfg, "tree"))))
    if cfg["io"]["models"] is not None:
        _, _, manifest = load_models(_require(cfg, "models"))
        return KinematicTree.from_dict(manifest["tree"])
    return KinematicTree(tuple(Node(f"j{k}") for k in range(joints)), tuple((k - 1, k) for k in range(1, joints)))


def cmd_boundary(cfg: dict, out: Outputs):
    ss = load_samples(_require(cfg, "samples").read_bytes())
    tree = _boundary_tree(cfg, ss.samples.shape[2])
    b = cfg["boundary"]
    frames = geometry.frame_boundaries(ss, tree, float(b["alpha"]))
    out.write("boundaries.json", geometry.save_boundaries(frames))
    out.write("surface.csv", geometry.surface_csv(frames, int(b["resolution"])))
    degenerate = sum(e.degenerate for f in frames for _, e in f.joints)
    return {"frames": len(frames), "degenerate_joints": degenerate}


def cmd_proximity(cfg: dict, out: Outputs):
    frames = geometry.load_boundaries(_require(cfg, "boundaries").read_bytes())
    robot_seq = load_motion(_require(cfg, "robot").read_bytes())
    idx = robot_seq.tree.robot_indices or list(range(len(robot_seq.tree.nodes)))
    rows = geometry.proximity(frames, robot_seq.frames[:, idx], int(cfg["boundary"]["resolution"]))
    out.write("proximity.json", geometry.proximity_to_json(rows))
    return {"rows": len(rows), "violations": sum(r["violation"] for r in rows)}


def cmd_eval(cfg: dict, out: Outputs):
    index = int(cfg["io"]["window_index"])
    pred = load_poses(_require(cfg, "pred"), index)
    truth = load_poses(_require(cfg, "truth"), index)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    fps = float(cfg["data"]["target_fps"])
    labels = metrics.clip_labels(metrics.DEFAULT_HORIZONS_MS, fps, pred.shape[0])
    table = metrics.horizon_table(pred, truth, fps, labels) if labels else None
    diversity = None
    if cfg["io"]["samples"] is not None:
        diversity = metrics.apd(load_samples(_require(cfg, "samples").read_bytes()))
    rows = metrics.report_rows(table, metrics.mpjpe(pred, truth), diversity)
    out.write("metrics.csv", metrics.rows_to_csv(rows))
    out.write("metrics.json", metrics.rows_to_json(rows))
    return {"rows": len(rows)}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "sample": cmd_sample,
    "boundary": cmd_boundary,
    "proximity": cmd_proximity,
    "eval": cmd_eval,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detgn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="run config JSON")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="root seed for data, members and sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Outputs(args.out)
    try:
        doc = _read_json(args.config) if args.config else None
        cfg = build_config(doc, args.overrides, args.seed)
        summary = COMMANDS[args.command](cfg, out)
    except (ValueError, KeyError, TypeError, OSError, MotionFormatError, ModelFileError) as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # numeric or training failure
        out.rollback()
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
