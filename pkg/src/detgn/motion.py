"""Skeleton motion sequences: file I/O, preprocessing, windowing, splits and a synthetic generator."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from detgn import jsonio
from detgn.numerics import RngStream

MOTION_FILE_VERSION = 1
MM_PER_UNIT = {"mm": 1.0, "m": 1000.0}


class MotionFormatError(ValueError):
    """A motion file or tree description failed to parse or validate."""


@dataclass(frozen=True)
class Node:
    name: str
    kind: str = "human"


@dataclass(frozen=True)
class KinematicTree:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise MotionFormatError("node names must be unique")
        for n in self.nodes:
            if n.kind not in ("human", "robot"):
                raise MotionFormatError(f"node {n.name!r} has unknown kind {n.kind!r}")
        if not any(n.kind == "human" for n in self.nodes):
            raise MotionFormatError("tree needs at least one human node")
        for i, j in self.edges:
            if not (0 <= i < len(self.nodes) and 0 <= j < len(self.nodes)):
                raise MotionFormatError(f"edge ({i}, {j}) out of range")
        self._check_human_forest()

    def _check_human_forest(self):
        parent = list(range(len(self.nodes)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i, j in self.human_edges:
            ri, rj = find(i), find(j)
            if ri == rj:
                raise MotionFormatError(f"human edges contain a cycle through ({i}, {j})")
            parent[ri] = rj

    @property
    def human_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "human"]

    @property
    def robot_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "robot"]

    @property
    def human_edges(self) -> list[tuple[int, int]]:
        human = {i for i, n in enumerate(self.nodes) if n.kind == "human"}
        return [(i, j) for i, j in self.edges if i in human and j in human]

    @classmethod
    def from_dict(cls, d: dict) -> KinematicTree:
        try:
            nodes = tuple(Node(str(n["name"]), str(n.get("kind", "human"))) for n in d["nodes"])
            edges = tuple((int(e[0]), int(e[1])) for e in d.get("edges", []))
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise MotionFormatError(f"malformed tree: {exc}") from exc
        return cls(nodes, edges)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"name": n.name, "kind": n.kind} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }


@dataclass(frozen=True)
class MotionSequence:
    """Poses of every tree node over time; ``frames`` has shape (frames, nodes, 3)."""

    tree: KinematicTree
    fps: float
    frames: np.ndarray
    units: str = "mm"
    source_id: str = ""

    def __post_init__(self):
        f = np.array(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3 or f.shape[1] != len(self.tree.nodes):
            raise MotionFormatError(
                f"frames must have shape (n, {len(self.tree.nodes)}, 3), got {f.shape}"
            )
        if not np.all(np.isfinite(f)):
            raise MotionFormatError("frames contain non-finite coordinates")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise MotionFormatError(f"fps must be positive, got {self.fps}")
        if self.units not in MM_PER_UNIT:
            raise MotionFormatError(f"unknown unit {self.units!r}")
        f.setflags(write=False)
        object.__setattr__(self, "frames", f)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def replace(self, **changes) -> MotionSequence:
        kw = dict(tree=self.tree, fps=self.fps, frames=self.frames, units=self.units,
                  source_id=self.source_id)
        kw.update(changes)
        return MotionSequence(**kw)


@dataclass(frozen=True)
class ObservationWindow:
    history: np.ndarray
    future: np.ndarray
    source_id: str
    start: int

    @property
    def window_id(self) -> str:
        return f"{self.source_id}@{self.start}"


@dataclass(frozen=True)
class DatasetSplit:
    train: list[ObservationWindow]
    validation: list[ObservationWindow]
    test: list[ObservationWindow]
    seed: int
    ratios: tuple[float, float, float]
    sources: dict[str, list[str]] = field(default_factory=dict)


# file formats ---------------------------------------------------------------


def load_motion(data: bytes, format: str = "json", tree: bytes | dict | None = None) -> MotionSequence:
    """Parse a motion file. CSV input needs the node/edge sidecar passed as ``tree``."""
    if format == "json":
        return _load_json(data)
    if format == "csv":
        if tree is None:
            raise MotionFormatError("CSV motion needs a tree sidecar")
        return _load_csv(data, tree)
    raise MotionFormatError(f"unknown motion format {format!r}")


def _load_json(data: bytes) -> MotionSequence:
    try:
        doc = jsonio.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MotionFormatError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MotionFormatError("motion document must be an object")
    if doc.get("version") != MOTION_FILE_VERSION:
        raise MotionFormatError(f"unsupported motion file version {doc.get('version')!r}")
    tree = KinematicTree.from_dict(doc)
    units = doc.get("units", "mm")
    if units not in MM_PER_UNIT:
        raise MotionFormatError(f"unknown unit {units!r}")
    frames = doc.get("frames")
    if not isinstance(frames, list):
        raise MotionFormatError("frames must be a list")
    for k, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != len(tree.nodes):
            raise MotionFormatError(f"frame {k} does not have one position per node")
        for p in frame:
            if not isinstance(p, list) or len(p) != 3:
                raise MotionFormatError(f"frame {k} has a position that is not 3D")
    try:
        arr = np.array(frames, dtype=np.float64).reshape(len(frames), len(tree.nodes), 3)
        fps = float(doc["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MotionFormatError(f"malformed motion: {exc}") from exc
    return MotionSequence(tree, fps, arr * MM_PER_UNIT[units], "mm", str(doc.get("source_id", "")))


def _load_csv(data: bytes, tree_doc) -> MotionSequence:
    if isinstance(tree_doc, (bytes, str)):
        try:
            tree_doc = jsonio.loads(tree_doc)
        except ValueError as exc:
            raise MotionFormatError(f"malformed tree sidecar: {exc}") from exc
    tree = KinematicTree.from_dict(tree_doc)
    units = tree_doc.get("units", "mm")
    if units not in MM_PER_UNIT:
        raise MotionFormatError(f"unknown unit {units!r}")
    rows = list(csv.reader(io.StringIO(data.decode("utf-8"))))
    if not rows:
        raise MotionFormatError("empty CSV")
    expected = ["frame"] + [f"{n.name}_{a}" for n in tree.nodes for a in "xyz"]
    if rows[0] != expected:
        raise MotionFormatError("CSV header does not match the tree nodes")
    body = [r for r in rows[1:] if r]
    for k, r in enumerate(body):
        if len(r) != len(expected):
            raise MotionFormatError(f"row {k} has {len(r) - 1} coordinates, expected {len(expected) - 1}")
    try:
        arr = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise MotionFormatError(f"bad number in CSV: {exc}") from exc
    arr = arr.reshape(len(body), len(tree.nodes), 3)
    return MotionSequence(tree, float(tree_doc.get("fps", 25.0)), arr * MM_PER_UNIT[units], "mm",
                          str(tree_doc.get("source_id", "")))


def save_motion(seq: MotionSequence) -> bytes:
    doc = {
        "version": MOTION_FILE_VERSION,
        "fps": float(seq.fps),
        "units": seq.units,
        **seq.tree.to_dict(),
        "frames": seq.frames,
    }
    if seq.source_id:
        doc["source_id"] = seq.source_id
    return jsonio.dumps(doc).encode()


def save_motion_csv(seq: MotionSequence) -> tuple[bytes, bytes]:
    """CSV body plus its tree sidecar."""
    out = io.StringIO()
    header = ["frame"] + [f"{n.name}_{a}" for n in seq.tree.nodes for a in "xyz"]
    out.write(",".join(header) + "\n")
    for k, frame in enumerate(seq.frames):
        out.write(",".join([str(k)] + [jsonio.format_float(v) for v in frame.ravel()]) + "\n")
    sidecar = {**seq.tree.to_dict(), "fps": float(seq.fps), "units": seq.units}
    if seq.source_id:
        sidecar["source_id"] = seq.source_id
    return out.getvalue().encode(), jsonio.dumps(sidecar).encode()


# preprocessing ----------------------------------------------------------------


def downsample(seq: MotionSequence, target_fps: float) -> MotionSequence:
    ratio = seq.fps / target_fps
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ValueError(f"{seq.fps} fps cannot be reduced to {target_fps} fps by an integer stride")
    return seq.replace(frames=seq.frames[::stride], fps=float(target_fps))


def remove_global_translation(seq: MotionSequence, root_joint: int) -> MotionSequence:
    if root_joint not in seq.tree.human_indices:
        raise ValueError(f"root joint {root_joint} is not a human node")
    return seq.replace(frames=seq.frames - seq.frames[:, root_joint : root_joint + 1, :])


def preprocess(
    seq: MotionSequence,
    target_fps: float | None = 25.0,
    root_joint: int | None = 0,
    remove_rotation: bool = False,
) -> MotionSequence:
    """Downsample and re-root a sequence.

    ``remove_rotation`` is accepted for real-data configs but does nothing: the
    synthetic generator already emits every trajectory in one canonical heading.
    """
    if target_fps is not None and target_fps != seq.fps:
        seq = downsample(seq, target_fps)
    if root_joint is not None:
        seq = remove_global_translation(seq, root_joint)
    return seq


def make_windows(seq: MotionSequence, n_history: int, n_future: int, stride: int = 1) -> list[ObservationWindow]:
    if n_history < 1 or n_future < 1 or stride < 1:
        raise ValueError("history, future and stride must all be at least 1")
    total = n_history + n_future
    windows = []
    for start in range(0, len(seq) - total + 1, stride):
        chunk = seq.frames[start : start + total]
        windows.append(
            ObservationWindow(chunk[:n_history], chunk[n_history:], seq.source_id, start)
        )
    return windows


def window_count(length: int, n_history: int, n_future: int, stride: int) -> int:
    return max(0, (length - n_history - n_future) // stride + 1)


def partition_sizes(n: int, ratios) -> tuple[int, int, int]:
    """Trajectory counts per split; every nonzero ratio gets at least one, the rest goes to train."""
    r = [float(x) for x in ratios]
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    nonzero = sum(1 for x in r if x > 0)
    if n < nonzero:
        raise ValueError(f"{n} trajectories cannot fill {nonzero} nonempty splits")
    sizes = [0, 0, 0]
    for k in (1, 2):
        if r[k] > 0:
            sizes[k] = max(1, math.floor(r[k] * n + 1e-9))
    sizes[0] = n - sizes[1] - sizes[2]
    if r[0] > 0 and sizes[0] < 1:
        raise ValueError("no trajectories left for the training split")
    return sizes[0], sizes[1], sizes[2]


def split_dataset(
    sequences: list[MotionSequence],
    ratios=(0.75, 0.125, 0.125),
    seed: int = 0,
    n_history: int = 10,
    n_future: int = 25,
    stride: int = 1,
) -> DatasetSplit:
    """Shuffle whole trajectories by seed, partition them, then window each partition."""
    ratios = tuple(float(x) for x in ratios)
    n_train, n_val, _ = partition_sizes(len(sequences), ratios)
    order = RngStream(seed).child("split").permutation(len(sequences))
    parts = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]
    windowed = []
    sources = {}
    for name, idx in zip(("train", "validation", "test"), parts):
        seqs = [sequences[i] for i in sorted(idx)]
        sources[name] = [s.source_id for s in seqs]
        windowed.append([w for s in seqs for w in make_windows(s, n_history, n_future, stride)])
    return DatasetSplit(windowed[0], windowed[1], windowed[2], seed, ratios, sources)


def stack_windows(windows: list[ObservationWindow]) -> tuple[np.ndarray, np.ndarray]:
    """History (B, N, nodes, 3) and future (B, T, nodes, 3) arrays."""
    return (
        np.stack([w.history for w in windows]),
        np.stack([w.future for w in windows]),
    )


# synthetic data ---------------------------------------------------------------

# (name, parent, rest offset from parent in mm)
_BIPED = [
    ("hip", -1, (0, 0, 0)),
    ("r_hip", 0, (-130, 0, 0)),
    ("r_knee", 1, (0, 0, -450)),
    ("r_ankle", 2, (0, 0, -440)),
    ("l_hip", 0, (130, 0, 0)),
    ("l_knee", 4, (0, 0, -450)),
    ("l_ankle", 5, (0, 0, -440)),
    ("spine", 0, (0, 0, 230)),
    ("thorax", 7, (0, 0, 250)),
    ("neck", 8, (0, 0, 110)),
    ("head", 9, (0, 0, 110)),
    ("l_shoulder", 8, (160, 0, 0)),
    ("l_elbow", 11, (280, 0, 0)),
    ("l_wrist", 12, (250, 0, 0)),
    ("r_shoulder", 8, (-160, 0, 0)),
    ("r_elbow", 14, (-280, 0, 0)),
    ("r_wrist", 15, (-250, 0, 0)),
]

ARM_LENGTHS = (300.0, 250.0)
CHAIN_SEGMENT_LENGTH = 200.0


@dataclass(frozen=True)
class SyntheticConfig:
    preset: str = "arm-3-node"
    joint_count: int = 3
    trajectories: int = 400
    frames: int = 80
    fps: float = 25.0
    frequency_range: tuple[float, float] = (0.2, 0.8)
    amplitude_range: tuple[float, float] = (0.3, 0.9)
    translation_range: tuple[float, float] = (0.0, 0.0)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.preset not in ("chain", "arm-3-node", "biped-17-node"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.joint_count < 1 or self.frames < 1 or self.trajectories < 0 or self.fps <= 0:
            raise ValueError("counts and fps must be positive")
        if self.noise_std < 0:
            raise ValueError("noise std must be nonnegative")
        for lo, hi in (self.frequency_range, self.amplitude_range, self.translation_range):
            if lo > hi or lo < 0:
                raise ValueError("ranges must satisfy 0 <= low <= high")

    @property
    def skeleton(self) -> list[tuple[str, int, tuple[float, float, float]]]:
        if self.preset == "biped-17-node":
            return list(_BIPED)
        if self.preset == "arm-3-node":
            return [
                ("shoulder", -1, (0, 0, 0)),
                ("elbow", 0, (0, 0, -ARM_LENGTHS[0])),
                ("wrist", 1, (ARM_LENGTHS[1], 0, 0)),
            ]
        return [("j0", -1, (0, 0, 0))] + [
            (f"j{k}", k - 1, (0, 0, -CHAIN_SEGMENT_LENGTH)) for k in range(1, self.joint_count)
        ]

    @property
    def tree(self) -> KinematicTree:
        skel = self.skeleton
        nodes = tuple(Node(name) for name, _, _ in skel)
        edges = tuple((p, k) for k, (_, p, _) in enumerate(skel) if p >= 0)
        return KinematicTree(nodes, edges)


def _rotation(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices Rx(a) Ry(b) Rz(c) for an (n, 3) array of angles."""
    a, b, c = angles[:, 0], angles[:, 1], angles[:, 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    n = len(angles)
    rx = np.zeros((n, 3, 3)); ry = np.zeros((n, 3, 3)); rz = np.zeros((n, 3, 3))  # noqa: E702
    rx[:, 0, 0] = 1; rx[:, 1, 1] = ca; rx[:, 1, 2] = -sa; rx[:, 2, 1] = sa; rx[:, 2, 2] = ca  # noqa: E702
    ry[:, 1, 1] = 1; ry[:, 0, 0] = cb; ry[:, 0, 2] = sb; ry[:, 2, 0] = -sb; ry[:, 2, 2] = cb  # noqa: E702
    rz[:, 2, 2] = 1; rz[:, 0, 0] = cc; rz[:, 0, 1] = -sc; rz[:, 1, 0] = sc; rz[:, 1, 1] = cc  # noqa: E702
    return rx @ ry @ rz


def _sinusoids(rng: RngStream, t: np.ndarray, cfg: SyntheticConfig, scale_range) -> np.ndarray:
    count = int(rng.integers(2, 5))
    amp = rng.uniform(*scale_range, size=count) / count
    freq = rng.uniform(*cfg.frequency_range, size=count)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return np.sum(amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None]), axis=0)


def synthesize(cfg: SyntheticConfig) -> list[MotionSequence]:
    """Quasi-periodic skeleton motion driven by sinusoidal bone angles.

    Each bone direction is its rest direction rotated by three angles, each a
    sum of 2 to 4 sinusoids, so bone lengths stay fixed up to the added noise.
    """
    skel = cfg.skeleton
    tree = cfg.tree
    t = np.arange(cfg.frames) / cfg.fps
    root = RngStream(cfg.seed).child("synth")
    out = []
    for k in range(cfg.trajectories):
        rng = root.child(k)
        pos = np.zeros((cfg.frames, len(skel), 3))
        pos[:, 0, :] = np.stack(
            [_sinusoids(rng, t, cfg, cfg.translation_range) for _ in range(3)], axis=1
        )
        for j in range(1, len(skel)):
            _, parent, offset = skel[j]
            angles = np.stack([_sinusoids(rng, t, cfg, cfg.amplitude_range) for _ in range(3)], axis=1)
            pos[:, j, :] = pos[:, parent, :] + _rotation(angles) @ np.asarray(offset, dtype=np.float64)
        noise = rng.child("noise")
        if cfg.noise_std > 0:
            pos = pos + noise.normal(0.0, cfg.noise_std, size=pos.shape)
        out.append(MotionSequence(tree, cfg.fps, pos, "mm", f"synth-{k:04d}"))
    return out
