"""Forecast accuracy (MPJPE) and sample diversity (APD)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from detgn import jsonio

DEFAULT_HORIZONS_MS = (80, 160, 320, 400, 1000, 2000)


def mpjpe(pred, truth, up_to_frame: int | None = None) -> float:
    """Mean Euclidean joint error in mm over (..., T, J, 3) arrays.

    ``up_to_frame`` restricts the average to the first that many frames.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim < 3 or pred.shape[-1] != 3:
        raise ValueError("expected (..., T, J, 3) arrays")
    if up_to_frame is not None:
        if up_to_frame < 1:
            raise ValueError("empty frame range")
        pred, truth = pred[..., :up_to_frame, :, :], truth[..., :up_to_frame, :, :]
    return float(np.mean(np.linalg.norm(pred - truth, axis=-1)))


def apd(samples) -> float:
    """Average over sample pairs of the per-frame pose distance, averaged over frames.

    Pose distance is the Euclidean norm over all 3J coordinates of a frame.
    """
    s = samples.samples if hasattr(samples, "samples") else np.asarray(samples, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two samples")
    flat = s.reshape(n, s.shape[1], -1)  # (S, T, 3J)
    total = 0.0
    for i in range(n - 1):
        d = np.linalg.norm(flat[i + 1 :] - flat[i], axis=-1)  # (S-i-1, T)
        total += float(d.mean(axis=1).sum())
    return 2.0 * total / (n * (n - 1))


@dataclass(frozen=True)
class HorizonTable:
    fps: float
    entries: dict[int, float]
    cumulative: bool = False


def horizon_frame(ms: float, fps: float) -> int:
    return int(round(ms * fps / 1000.0))


def horizon_table(pred, truth, fps: float, labels_ms=DEFAULT_HORIZONS_MS, cumulative: bool = False) -> HorizonTable:
    """MPJPE at each horizon label.

    By default each entry is the error at exactly the frame reached at that
    time; ``cumulative`` averages over all frames up to it instead.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n_frames = pred.shape[-3]
    entries = {}
    for ms in labels_ms:
        k = horizon_frame(ms, fps)
        if k < 1 or k > n_frames:
            raise ValueError(f"horizon {ms} ms maps to frame {k}, outside 1..{n_frames}")
        if cumulative:
            entries[int(ms)] = mpjpe(pred, truth, up_to_frame=k)
        else:
            entries[int(ms)] = mpjpe(pred[..., k - 1 : k, :, :], truth[..., k - 1 : k, :, :])
    return HorizonTable(fps, entries, cumulative)


def clip_labels(labels_ms, fps: float, n_frames: int) -> list[int]:
    return [int(ms) for ms in labels_ms if 1 <= horizon_frame(ms, fps) <= n_frames]


def report_rows(table: HorizonTable | None, full: float | None = None, diversity: float | None = None) -> list[dict]:
    rows = []
    if table is not None:
        for ms, v in table.entries.items():
            rows.append({"metric": "mpjpe", "horizon_ms": ms, "value_mm": v})
    if full is not None:
        rows.append({"metric": "mpjpe", "horizon_ms": "all", "value_mm": full})
    if diversity is not None:
        rows.append({"metric": "apd", "horizon_ms": "all", "value_mm": diversity})
    return rows


def rows_to_csv(rows: list[dict]) -> bytes:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["metric", "horizon_ms", "value_mm"])
    for r in rows:
        w.writerow([r["metric"], r["horizon_ms"], jsonio.format_float(r["value_mm"])])
    return out.getvalue().encode()


def rows_to_json(rows: list[dict]) -> bytes:
    return jsonio.dumps({"rows": rows}, sort_keys=True).encode()
