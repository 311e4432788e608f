"""The temporal graph network: DCT, graph-attention blocks, inverse DCT, TCN
encoder/decoder, per-channel time map and a global residual on the last pose.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from detgn import jsonio
from detgn.gat import GatBlockParams, gat_block_forward, init_gat_block
from detgn.motion import DatasetSplit, ObservationWindow
from detgn.numerics import AdamState, RngStream, Tape, adam_step, dct_matrix, fnv1a64, grad
from detgn.numerics import autodiff as ad
from detgn.params import check_mode, flatten, rebuild
from detgn.tcn import TcnBlockParams, init_tcn_block, tcn_block_forward

log = logging.getLogger(__name__)

LOSS_EPS = 1e-8
MODEL_FILE_VERSION = 1


class ModelFileError(ValueError):
    pass


class ChecksumError(ModelFileError):
    pass


class ShapeMismatchError(ModelFileError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TgnConfig:
    n_history: int = 10
    n_future: int = 25
    joints: int = 3
    robot_channels: int = 0
    hidden: int = 64
    heads: int = 4
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    kernel_size: int = 3
    gat_dropout: float = 0.1
    tcn_dropout: float = 0.1
    coord_scale: float = 100.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.n_history < 1 or self.n_future < 1 or self.joints < 1:
            raise ValueError("history, horizon and joint count must be at least 1")
        if self.robot_channels < 0 or self.robot_channels % 3:
            raise ValueError("robot channels must be a nonnegative multiple of 3")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be a nonempty list of positive integers")
        if self.kernel_size < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError("kernel size, hidden width and head count must be positive")
        for rate in (self.gat_dropout, self.tcn_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")
        if self.coord_scale <= 0:
            raise ValueError("coordinate scale must be positive")

    @property
    def human_channels(self) -> int:
        return 3 * self.joints

    @property
    def channels(self) -> int:
        return self.human_channels + self.robot_channels

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TgnConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TgnParams:
    gat: tuple[GatBlockParams, ...]
    encoder: tuple[TcnBlockParams, ...]
    decoder: tuple[TcnBlockParams, ...]
    time_map: object  # (3J, T, N)
    time_bias: object  # (3J, T)

    def arrays(self) -> dict[str, np.ndarray]:
        return flatten(self)

    def with_arrays(self, arrays: dict) -> TgnParams:
        return rebuild(self, arrays)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 400
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch size, epochs and patience must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_validation: float = float("inf")
    seconds: float = 0.0


def init_params(cfg: TgnConfig, rng: RngStream | None = None) -> TgnParams:
    """Glorot-uniform weights, zero biases and shifts, unit normalization scales.

    The final time map starts at zero so an untrained network reproduces the
    zero-velocity forecast exactly.
    """
    rng = rng if rng is not None else RngStream(cfg.seed).child("init")
    n, c, h, out = cfg.n_history, cfg.channels, cfg.hidden, cfg.human_channels
    w, dil = cfg.kernel_size, cfg.dilations
    gat = tuple(init_gat_block(rng.child(f"gat{i}"), n, cfg.heads, cfg.gat_dropout) for i in range(2))
    enc = tuple(
        init_tcn_block(rng.child(f"enc{i}"), c if i == 0 else h, h, w, d, cfg.tcn_dropout)
        for i, d in enumerate(dil)
    )
    dec = tuple(
        init_tcn_block(rng.child(f"dec{i}"), h, out if i == len(dil) - 1 else h, w, d, cfg.tcn_dropout)
        for i, d in enumerate(dil)
    )
    return TgnParams(
        gat=gat,
        encoder=enc,
        decoder=dec,
        time_map=np.zeros((out, cfg.n_future, n)),
        time_bias=np.zeros((out, cfg.n_future)),
    )


def zero_params(cfg: TgnConfig) -> TgnParams:
    template = init_params(cfg, RngStream(0))
    return template.with_arrays({k: np.zeros_like(v) for k, v in template.arrays().items()})


def _to_channels(poses: np.ndarray) -> np.ndarray:
    """(B, N, nodes, 3) -> (B, 3*nodes, N) with channel index 3*node + axis."""
    b, n, j, _ = poses.shape
    return np.ascontiguousarray(poses.transpose(0, 2, 3, 1).reshape(b, 3 * j, n))


def forward(
    history,
    params: TgnParams,
    cfg: TgnConfig,
    mode: str = "eval",
    rng: RngStream | None = None,
    robot=None,
):
    """Forecast (B, T, J, 3) from history (B, N, J, 3); unbatched (N, J, 3) input is also accepted.

    ``robot`` carries the robot history (B, N, R, 3) when the config has robot
    channels. In ``train`` and ``mc`` modes every batch item gets its own
    dropout masks drawn from ``rng``.
    """
    check_mode(mode, rng)
    history = np.asarray(history, dtype=np.float64)
    single = history.ndim == 3
    if single:
        history = history[None]
        robot = None if robot is None else np.asarray(robot, dtype=np.float64)[None]
    b, n, j, _ = history.shape
    if n != cfg.n_history or j != cfg.joints:
        raise ValueError(f"history shape {history.shape[1:]} does not match config (N={cfg.n_history}, J={cfg.joints})")
    x = _to_channels(history)
    if cfg.robot_channels:
        if robot is None:
            raise ValueError("config expects robot history input")
        robot = np.asarray(robot, dtype=np.float64)
        if robot.shape[:2] != (b, n) or 3 * robot.shape[2] != cfg.robot_channels:
            raise ValueError(f"robot history shape {robot.shape} does not match config")
        x = np.concatenate([x, _to_channels(robot)], axis=1)
    elif robot is not None:
        raise ValueError("config has no robot channels")

    d = dct_matrix(n)
    h = ad.matmul(x / cfg.coord_scale, d.T)
    for blk in params.gat:
        h = gat_block_forward(h, blk, mode, rng)
    y = ad.matmul(h, d)
    for blk in params.encoder + params.decoder:
        y = tcn_block_forward(y, blk, mode, rng)
    out = ad.add(ad.einsum("bcn,ctn->bct", y, params.time_map), params.time_bias)
    last = x[:, : cfg.human_channels, -1:]
    out = ad.add(ad.mul(out, cfg.coord_scale), last)  # (B, 3J, T)
    out = ad.transpose(ad.reshape(out, (b, j, 3, cfg.n_future)), (0, 3, 1, 2))
    return ad.getitem(out, 0) if single else out


def loss(pred, truth):
    """Mean over frames and joints of sqrt(|error|^2 + eps^2)."""
    truth = np.asarray(truth, dtype=np.float64)
    if ad.value(pred).shape != truth.shape:
        raise ValueError(f"prediction shape {ad.value(pred).shape} != truth shape {truth.shape}")
    err = ad.sub(pred, truth)
    return ad.mean(ad.sqrt(ad.add(ad.sum(ad.square(err), axis=-1), LOSS_EPS**2)))


def zero_velocity_baseline(window: ObservationWindow | np.ndarray, n_future: int | None = None) -> np.ndarray:
    """Repeat the last observed pose for every future step."""
    if isinstance(window, ObservationWindow):
        history, n_future = window.history, window.future.shape[0]
    else:
        history = np.asarray(window, dtype=np.float64)
    if n_future is None:
        raise ValueError("horizon length is required for raw history input")
    return np.repeat(history[-1:], n_future, axis=0)


def split_nodes(poses: np.ndarray, human: list[int], robot: list[int]):
    """Split (..., nodes, 3) into human and (possibly None) robot parts."""
    return poses[..., human, :], (poses[..., robot, :] if robot else None)


def _batches(windows: list[ObservationWindow], human, robot):
    hist = np.stack([w.history for w in windows])
    fut = np.stack([w.future for w in windows])
    hh, hr = split_nodes(hist, human, robot)
    fh, _ = split_nodes(fut, human, robot)
    return hh, hr, fh


def evaluate_loss(params, cfg, hist, robot, fut, chunk: int = 256) -> float:
    total, count = 0.0, 0
    for s in range(0, len(hist), chunk):
        sl = slice(s, s + chunk)
        pred = forward(hist[sl], params, cfg, "eval", robot=None if robot is None else robot[sl])
        total += float(loss(pred, fut[sl])) * len(pred)
        count += len(pred)
    return total / count


def train(
    split: DatasetSplit,
    cfg: TgnConfig,
    tcfg: TrainConfig,
    human: list[int] | None = None,
    robot: list[int] | None = None,
) -> tuple[TgnParams, TrainingLog]:
    """Mini-batch Adam on the smoothed per-joint distance; returns the best-validation parameters.

    ``human``/``robot`` select node indices of the windows; by default every
    node is a human joint.
    """
    if not split.train or not split.validation:
        raise ValueError("training needs nonempty train and validation splits")
    nodes = split.train[0].history.shape[1]
    human = list(range(nodes)) if human is None else list(human)
    robot = list(robot or [])
    root = RngStream(tcfg.seed)
    params = init_params(cfg, root.child("init"))
    shuffle_rng, dropout_rng = root.child("shuffle"), root.child("dropout")
    th, tr, tf = _batches(split.train, human, robot)
    vh, vr, vf = _batches(split.validation, human, robot)

    arrays = params.arrays()
    state = AdamState()
    best = dict(arrays)
    history = TrainingLog()
    stale = 0
    started = time.perf_counter()
    for epoch in range(tcfg.max_epochs):
        order = shuffle_rng.permutation(len(th))
        running, seen = 0.0, 0
        for s in range(0, len(order), tcfg.batch_size):
            idx = order[s : s + tcfg.batch_size]
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in arrays.items()}
            pred = forward(th[idx], params.with_arrays(leaves), cfg, "train", dropout_rng,
                           robot=None if tr is None else tr[idx])
            value = loss(pred, tf[idx])
            lv = float(value.value)
            if not np.isfinite(lv):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {s // tcfg.batch_size}")
            grads = dict(zip(leaves, grad(tape, value, list(leaves.values()))))
            arrays, state = adam_step(arrays, grads, state, tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.eps)
            running += lv * len(idx)
            seen += len(idx)
        val = evaluate_loss(params.with_arrays(arrays), cfg, vh, vr, vf)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append({"epoch": epoch, "train_loss": running / seen, "validation_loss": val})
        log.debug("epoch %d train %.4f val %.4f", epoch, running / seen, val)
        if val < history.best_validation:
            history.best_validation, history.best_epoch = val, epoch
            best = dict(arrays)
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    history.seconds = time.perf_counter() - started
    return params.with_arrays(best), history


# model files ------------------------------------------------------------------


def _arrays_section(params: TgnParams) -> dict:
    return {
        k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
        for k, v in params.arrays().items()
    }


def _checksum(arrays_section: dict) -> str:
    return f"{fnv1a64(jsonio.dumps(arrays_section).encode()):016x}"


def save_params(params: TgnParams, cfg: TgnConfig) -> bytes:
    section = _arrays_section(params)
    doc = {
        "version": MODEL_FILE_VERSION,
        "config": cfg.to_dict(),
        "arrays": section,
        "checksum": _checksum(section),
    }
    return jsonio.dumps(doc).encode()


def load_params(data: bytes, expected: TgnConfig | None = None) -> tuple[TgnParams, TgnConfig]:
    try:
        doc = jsonio.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"model payload is corrupted: {exc}") from exc
    if not isinstance(doc, dict) or "arrays" not in doc or "checksum" not in doc:
        raise ChecksumError("model payload is missing its arrays or checksum")
    if doc.get("version") != MODEL_FILE_VERSION:
        raise ModelFileError(f"unsupported model file version {doc.get('version')!r}")
    if _checksum(doc["arrays"]) != doc["checksum"]:
        raise ChecksumError("model checksum mismatch")
    cfg = TgnConfig.from_dict(doc["config"])
    if expected is not None and expected != cfg:
        raise ShapeMismatchError("model file was written for a different configuration")
    template = init_params(cfg, RngStream(0)).arrays()
    if set(template) != set(doc["arrays"]):
        raise ShapeMismatchError("model arrays do not match the configured architecture")
    arrays = {}
    for name, spec in doc["arrays"].items():
        shape = tuple(spec["shape"])
        if shape != template[name].shape:
            raise ShapeMismatchError(f"array {name} has shape {shape}, expected {template[name].shape}")
        arrays[name] = np.array(spec["data"], dtype=np.float64).reshape(shape)
    return init_params(cfg, RngStream(0)).with_arrays(arrays), cfg
