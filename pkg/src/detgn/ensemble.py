"""Deep ensembles of TGNs and Monte-Carlo dropout sampling."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from detgn import jsonio
from detgn.motion import DatasetSplit
from detgn.numerics import RngStream
from detgn.tgn import TgnConfig, TgnParams, TrainConfig, TrainingLog, forward, train

SAMPLE_FILE_VERSION = 1


class EnsembleMemberError(RuntimeError):
    def __init__(self, member: int, seed: int, cause: Exception):
        super().__init__(f"ensemble member {member} (seed {seed}) failed: {cause}")
        self.member = member
        self.seed = seed


@dataclass(frozen=True)
class EnsembleSpec:
    seeds: tuple[int, ...] = (0, 1, 2)
    model: TgnConfig = TgnConfig()
    training: TrainConfig = TrainConfig()

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("an ensemble needs at least one member")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"member seeds must be distinct, got {self.seeds}")

    @property
    def members(self) -> int:
        return len(self.seeds)


@dataclass(frozen=True)
class SampleSet:
    """Stochastic forecasts for one input window; ``samples`` is (S, T, J, 3)."""

    samples: np.ndarray
    member_of: tuple[int, ...]
    dropout_rate: float | tuple[float, float]
    streams: tuple[str, ...] = ()
    window_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 4 or s.shape[0] < 1 or s.shape[3] != 3:
            raise ValueError(f"samples must have shape (S, T, J, 3), got {s.shape}")
        if len(self.member_of) != s.shape[0]:
            raise ValueError("member_of needs one entry per sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "member_of", tuple(int(m) for m in self.member_of))

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def _member_job(args):
    member, seed, split, spec, human, robot = args
    try:
        return train(split, spec.model, dataclasses.replace(spec.training, seed=seed), human, robot)
    except Exception as exc:  # re-raised with the member id attached
        raise EnsembleMemberError(member, seed, exc) from exc


def train_ensemble(
    split: DatasetSplit,
    spec: EnsembleSpec,
    human: list[int] | None = None,
    robot: list[int] | None = None,
    workers: int = 1,
) -> list[tuple[TgnParams, TrainingLog]]:
    """Train one model per seed; results are ordered by member id."""
    jobs = [(m, seed, split, spec, human, robot) for m, seed in enumerate(spec.seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_member_job, jobs))
    return [_member_job(j) for j in jobs]


def with_dropout(params: TgnParams, rate: float) -> TgnParams:
    """Same weights, every dropout stage set to ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    return dataclasses.replace(
        params,
        gat=tuple(dataclasses.replace(b, dropout=rate) for b in params.gat),
        encoder=tuple(dataclasses.replace(b, dropout=rate) for b in params.encoder),
        decoder=tuple(dataclasses.replace(b, dropout=rate) for b in params.decoder),
    )


def _rates(params: TgnParams) -> tuple[float, float]:
    return params.gat[0].dropout, params.encoder[0].dropout


def mc_sample(
    params: TgnParams,
    cfg: TgnConfig,
    history: np.ndarray,
    n_samples: int,
    dropout_rate: float | None,
    rng: RngStream,
    robot: np.ndarray | None = None,
    member: int = 0,
    window_id: str = "",
) -> SampleSet:
    """``n_samples`` MC-dropout forecasts of one (N, J, 3) history.

    ``dropout_rate=None`` keeps the training rates. All passes run as one batch
    whose items draw independent masks from ``rng``.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if dropout_rate is not None:
        params = with_dropout(params, dropout_rate)
    gat_rate, tcn_rate = _rates(params)
    history = np.asarray(history, dtype=np.float64)
    batch = np.repeat(history[None], n_samples, axis=0)
    rbatch = None if robot is None else np.repeat(np.asarray(robot)[None], n_samples, axis=0)
    if gat_rate == 0.0 and tcn_rate == 0.0:
        # masks are all ones, so every pass equals the deterministic forecast
        one = forward(batch[:1], params, cfg, "eval", robot=None if rbatch is None else rbatch[:1])
        samples = np.repeat(one, n_samples, axis=0)
    else:
        samples = forward(batch, params, cfg, "mc", rng, robot=rbatch)
    recorded = gat_rate if gat_rate == tcn_rate else (gat_rate, tcn_rate)
    return SampleSet(samples, (member,) * n_samples, recorded, (repr(rng),), window_id)


def ensemble_sample(
    members: list[TgnParams],
    cfg: TgnConfig,
    history: np.ndarray,
    per_member: int = 11,
    dropout_rate: float | None = None,
    rng_root: RngStream | None = None,
    robot: np.ndarray | None = None,
    window_id: str = "",
) -> SampleSet:
    """Concatenated MC samples of every member, member ``m`` drawing from ``rng_root.child(m)``."""
    if not members:
        raise ValueError("no ensemble members")
    rng_root = rng_root if rng_root is not None else RngStream(0)
    sets = [
        mc_sample(p, cfg, history, per_member, dropout_rate, rng_root.child(m), robot, m, window_id)
        for m, p in enumerate(members)
    ]
    return SampleSet(
        np.concatenate([s.samples for s in sets]),
        sum((s.member_of for s in sets), ()),
        sets[0].dropout_rate,
        sum((s.streams for s in sets), ()),
        window_id,
    )


def mean_prediction(inputs) -> np.ndarray:
    """Elementwise mean of a list of forecasts or of a SampleSet's samples."""
    arr = inputs.samples if isinstance(inputs, SampleSet) else np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise ValueError("cannot average an empty set of forecasts")
    # offset form: exact for identical inputs, and less cancellation at large coordinates
    return arr[0] + (arr - arr[0]).mean(axis=0)


def save_samples(ss: SampleSet) -> bytes:
    doc = {
        "version": SAMPLE_FILE_VERSION,
        "window_id": ss.window_id,
        "dims": list(ss.samples.shape),
        "member_of": list(ss.member_of),
        "dropout_rate": list(ss.dropout_rate) if isinstance(ss.dropout_rate, tuple) else ss.dropout_rate,
        "streams": list(ss.streams),
        "samples": ss.samples,
    }
    return jsonio.dumps(doc).encode()


def load_samples(data: bytes) -> SampleSet:
    doc = jsonio.loads(data)
    if doc.get("version") != SAMPLE_FILE_VERSION:
        raise ValueError(f"unsupported sample file version {doc.get('version')!r}")
    samples = np.array(doc["samples"], dtype=np.float64)
    if list(samples.shape) != list(doc["dims"]):
        raise ValueError(f"sample array shape {samples.shape} disagrees with dims {doc['dims']}")
    rate = doc["dropout_rate"]
    return SampleSet(
        samples,
        tuple(doc["member_of"]),
        tuple(rate) if isinstance(rate, list) else float(rate),
        tuple(doc.get("streams", [])),
        doc.get("window_id", ""),
    )
