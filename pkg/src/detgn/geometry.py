"""Uncertainty regions from forecast samples.

Per joint: a covariance ellipsoid at the chi-square critical value. Per bone
segment: a 2D error ellipse whose covariance varies with the position z along
the mean segment, built from the spread of the sampled 3D lines. Both answer
containment queries, and :func:`proximity` turns them into robot clearances.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from detgn import jsonio
from detgn.motion import KinematicTree
from detgn.numerics import chi2_quantile, sample_covariance, sym_eig

EIG_FLOOR = 1e-12  # mm^2
MIN_SAMPLES = 4
MIN_SEGMENT_LENGTH = 1e-6  # mm
REJECT_DZ = 1e-6  # times L
INSIDE_RTOL = 1e-9
BOUNDARY_FILE_VERSION = 1


class GeometryError(ValueError):
    pass


class DegenerateSegmentError(GeometryError):
    """Mean endpoints coincide; callers fall back to the two joint ellipsoids."""


class RejectedSampleError(GeometryError):
    def __init__(self, index: int, dz: float):
        super().__init__(f"sample pair {index} is nearly perpendicular to the mean segment (dz={dz:.3g} mm)")
        self.index = index


def _check_samples(points, name="samples") -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise GeometryError(f"{name} must be an (S, 3) array, got {p.shape}")
    if p.shape[0] < MIN_SAMPLES:
        raise GeometryError(f"need at least {MIN_SAMPLES} samples, got {p.shape[0]}")
    if not np.all(np.isfinite(p)):
        raise GeometryError(f"{name} contain non-finite values")
    return p


def _floored_eig(cov: np.ndarray):
    e = sym_eig(cov)
    raw = e.eigenvalues
    return np.maximum(raw, EIG_FLOOR), e.eigenvectors, bool(np.min(raw) <= EIG_FLOOR)


@dataclass(frozen=True)
class Containment:
    """Result of a region query; ``status`` is inside, outside or out_of_range."""

    status: str
    value: float
    critical: float

    @property
    def inside(self) -> bool:
        return self.status == "inside"


def _verdict(value: float, critical: float) -> Containment:
    # boundary counts as inside; the tolerance absorbs rounding on surface points
    return Containment("inside" if value <= critical * (1.0 + INSIDE_RTOL) else "outside", value, critical)


# joints ------------------------------------------------------------------------


@dataclass(frozen=True)
class JointEllipsoid:
    """Confidence ellipsoid; ``eigenvalues`` are variances (mm^2), floored, descending.

    ``degenerate`` marks clouds with at least one floored axis (flat or point-like).
    """

    center: np.ndarray
    eigenvectors: np.ndarray  # columns
    eigenvalues: np.ndarray
    chi2: float
    alpha: float
    degenerate: bool = False

    @property
    def semi_axes(self) -> np.ndarray:
        return np.sqrt(self.chi2 * self.eigenvalues)


def joint_ellipsoid(samples, alpha: float = 0.05) -> JointEllipsoid:
    p = _check_samples(samples)
    cov, mean = sample_covariance(p)
    lam, v, degenerate = _floored_eig(cov)
    return JointEllipsoid(mean, v, lam, chi2_quantile(3, alpha), float(alpha), degenerate)


def ellipsoid_surface_point(e: JointEllipsoid, theta, phi) -> np.ndarray:
    """Surface point(s) at local azimuth ``theta`` and zenith ``phi``; broadcasts to (..., 3)."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    unit = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)
    return e.center + (unit * e.semi_axes) @ e.eigenvectors.T


def ellipsoid_value(e: JointEllipsoid, p) -> np.ndarray:
    """Mahalanobis form (p-c)^T V Lambda^-1 V^T (p-c) for (..., 3) points."""
    d = (np.asarray(p, dtype=np.float64) - e.center) @ e.eigenvectors
    return np.sum(d * d / e.eigenvalues, axis=-1)


def point_in_ellipsoid(e: JointEllipsoid, p) -> Containment:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise GeometryError("query point must be a finite 3-vector")
    return _verdict(float(ellipsoid_value(e, p)), e.chi2)


def ellipsoid_grid(e: JointEllipsoid, resolution: int) -> np.ndarray:
    """Surface points on theta = 2 pi k/res (k < res), phi = pi k/res (k <= res)."""
    theta = 2.0 * np.pi * np.arange(resolution) / resolution
    phi = np.pi * np.arange(resolution + 1) / resolution
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return ellipsoid_surface_point(e, tt, pp).reshape(-1, 3)


# segments ----------------------------------------------------------------------


def local_frame(direction) -> np.ndarray:
    """Right-handed orthonormal columns [u1 u2 u3] with u3 along ``direction``."""
    u3 = np.asarray(direction, dtype=np.float64)
    u3 = u3 / np.linalg.norm(u3)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(u3)))] = 1.0
    u1 = np.cross(u3, axis)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(u3, u1)
    return np.column_stack([u1, u2, u3])


@dataclass(frozen=True)
class SegmentBoundary:
    """Line-parameter covariance of a bone segment in its local frame.

    Each sampled segment is the line (x, y) = beta1*z + beta2 in local
    coordinates, beta1 the slopes and beta2 the intercepts. ``cov_b12`` is
    Cov(beta1, beta2); Cov(beta2, beta1) is its transpose.
    """

    m1: np.ndarray
    m2: np.ndarray
    rotation: np.ndarray  # columns u1 u2 u3
    length: float
    var_b1: np.ndarray
    var_b2: np.ndarray
    cov_b12: np.ndarray
    chi2_2: float
    alpha: float
    samples: int
    degenerate: bool = False

    def section_covariance(self, z: float) -> np.ndarray:
        c = self.cov_b12 + self.cov_b12.T
        return z * z * self.var_b1 + z * c + self.var_b2

    def to_local(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.m1) @ self.rotation

    def to_global(self, q) -> np.ndarray:
        return self.m1 + np.asarray(q, dtype=np.float64) @ self.rotation.T


def line_parameters(p1_local: np.ndarray, p2_local: np.ndarray, length: float):
    """Per-sample slopes (S, 2) and intercepts (S, 2) of the line through each local pair."""
    dz = p2_local[:, 2] - p1_local[:, 2]
    bad = np.flatnonzero(np.abs(dz) < REJECT_DZ * length)
    if bad.size:
        raise RejectedSampleError(int(bad[0]), float(dz[bad[0]]))
    slope = (p2_local[:, :2] - p1_local[:, :2]) / dz[:, None]
    intercept = p1_local[:, :2] - slope * p1_local[:, 2:3]
    return slope, intercept


def segment_boundary(samples_p1, samples_p2, alpha: float = 0.05) -> SegmentBoundary:
    a = _check_samples(samples_p1, "endpoint-1 samples")
    b = _check_samples(samples_p2, "endpoint-2 samples")
    if a.shape != b.shape:
        raise GeometryError("endpoint sample groups differ in size")
    m1, m2 = a.mean(axis=0), b.mean(axis=0)
    length = float(np.linalg.norm(m2 - m1))
    if length < MIN_SEGMENT_LENGTH:
        raise DegenerateSegmentError(f"mean segment length {length:.3g} mm is below {MIN_SEGMENT_LENGTH} mm")
    r = local_frame(m2 - m1)
    slope, intercept = line_parameters((a - m1) @ r, (b - m1) @ r, length)
    cov4, _ = sample_covariance(np.hstack([slope, intercept]))
    var_b1, var_b2, cov_b12 = cov4[:2, :2], cov4[2:, 2:], cov4[:2, 2:]
    out = SegmentBoundary(m1, m2, r, length, var_b1, var_b2, cov_b12, chi2_quantile(2, alpha),
                          float(alpha), a.shape[0])
    # flagged when either end section has a floored axis
    flat = any(_floored_eig(out.section_covariance(z))[2] for z in (0.0, length))
    return dataclasses.replace(out, degenerate=flat)


@dataclass(frozen=True)
class SectionEllipse:
    z: float
    covariance: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray  # floored
    chi2: float

    def point(self, t) -> np.ndarray:
        """Local (x, y) on the ellipse at parameter(s) t."""
        t = np.asarray(t, dtype=np.float64)
        unit = np.stack([np.cos(t), np.sin(t)], axis=-1)
        return (unit * np.sqrt(self.chi2 * self.eigenvalues)) @ self.eigenvectors.T

    def value(self, xy) -> np.ndarray:
        d = np.asarray(xy, dtype=np.float64) @ self.eigenvectors
        return np.sum(d * d / self.eigenvalues, axis=-1)


def segment_section(b: SegmentBoundary, z: float) -> SectionEllipse:
    z = float(z)
    if not 0.0 <= z <= b.length:
        raise GeometryError(f"z={z} lies outside the segment range [0, {b.length}]")
    cov = b.section_covariance(z)
    lam, v, _ = _floored_eig(cov)
    return SectionEllipse(z, cov, v, lam, b.chi2_2)


def point_in_segment_boundary(b: SegmentBoundary, p) -> Containment:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise GeometryError("query point must be a finite 3-vector")
    q = b.to_local(p)
    if not 0.0 <= q[2] <= b.length:
        return Containment("out_of_range", float("nan"), b.chi2_2)
    return _verdict(float(segment_section(b, q[2]).value(q[:2])), b.chi2_2)


def segment_grid(b: SegmentBoundary, resolution: int) -> np.ndarray:
    """Boundary points on z = L k/res (k <= res), t = 2 pi k/res (k < res), global frame."""
    t = 2.0 * np.pi * np.arange(resolution) / resolution
    pts = []
    for k in range(resolution + 1):
        sec = segment_section(b, b.length * k / resolution)
        xy = sec.point(t)
        pts.append(np.column_stack([xy, np.full(resolution, sec.z)]))
    return b.to_global(np.vstack(pts))


# per-frame assembly ------------------------------------------------------------


@dataclass(frozen=True)
class SegmentEntry:
    edge: tuple[int, int]
    m1: np.ndarray
    m2: np.ndarray
    boundary: SegmentBoundary | None  # None when the segment fell back to joint ellipsoids

    @property
    def fallback(self) -> bool:
        return self.boundary is None


@dataclass(frozen=True)
class FrameBoundary:
    joints: tuple[tuple[int, JointEllipsoid], ...]  # (tree node, ellipsoid)
    segments: tuple[SegmentEntry, ...]


def frame_boundaries(samples, tree: KinematicTree, alpha: float = 0.05) -> list[FrameBoundary]:
    """Ellipsoids for every human joint and envelopes for every human edge, per frame.

    ``samples`` is (S, T, J, 3) (or a SampleSet) over the tree's human nodes in order.
    """
    s = samples.samples if hasattr(samples, "samples") else np.asarray(samples, dtype=np.float64)
    human = tree.human_indices
    if s.ndim != 4 or s.shape[2] != len(human) or s.shape[3] != 3:
        raise GeometryError(f"samples shape {s.shape} does not match {len(human)} human joints")
    col = {node: k for k, node in enumerate(human)}
    frames = []
    for t in range(s.shape[1]):
        joints = tuple((node, joint_ellipsoid(s[:, t, col[node]], alpha)) for node in human)
        segments = []
        for i, j in tree.human_edges:
            a, b = s[:, t, col[i]], s[:, t, col[j]]
            try:
                boundary = segment_boundary(a, b, alpha)
            except DegenerateSegmentError:
                boundary = None
            segments.append(SegmentEntry((i, j), a.mean(axis=0), b.mean(axis=0), boundary))
        frames.append(FrameBoundary(joints, tuple(segments)))
    return frames


# proximity ---------------------------------------------------------------------


def _elements(frame: FrameBoundary):
    for node, e in frame.joints:
        yield f"joint:{node}", e
    for seg in frame.segments:
        if seg.boundary is not None:
            yield f"segment:{seg.edge[0]}-{seg.edge[1]}", seg.boundary


def _contains(element, p) -> bool:
    if isinstance(element, JointEllipsoid):
        return point_in_ellipsoid(element, p).inside
    return point_in_segment_boundary(element, p).inside


def _grid(element, resolution: int) -> np.ndarray:
    if isinstance(element, JointEllipsoid):
        return ellipsoid_grid(element, resolution)
    return segment_grid(element, resolution)


def proximity(boundaries: list[FrameBoundary], robot_frames, resolution: int = 16) -> list[dict]:
    """Clearance rows per (frame, robot segment, human element).

    ``robot_frames`` is (T, R, 3): robot polyline vertices per frame, with
    segments between consecutive vertices. Each robot segment is sampled at
    ``resolution + 1`` evenly spaced points and each boundary surface on the
    grids of :func:`ellipsoid_grid` / :func:`segment_grid`; all grids are
    nested under doubling, so finer resolution never raises a clearance.
    A robot point inside an element is a violation with clearance 0.
    """
    robot = np.asarray(robot_frames, dtype=np.float64)
    if robot.ndim != 3 or robot.shape[2] != 3 or robot.shape[1] < 2:
        raise GeometryError(f"robot frames must be (T, R>=2, 3), got {robot.shape}")
    if robot.shape[0] != len(boundaries):
        raise GeometryError(f"{robot.shape[0]} robot frames but {len(boundaries)} boundary frames")
    if resolution < 2:
        raise GeometryError("resolution must be at least 2")
    u = np.arange(resolution + 1)[:, None] / resolution
    rows = []
    for f, frame in enumerate(boundaries):
        elements = list(_elements(frame))
        grids = [_grid(el, resolution) for _, el in elements]
        for r in range(robot.shape[1] - 1):
            pts = robot[f, r] + u * (robot[f, r + 1] - robot[f, r])
            for (label, el), grid in zip(elements, grids):
                hit = next((p for p in pts if _contains(el, p)), None)
                if hit is not None:
                    clearance, rp, hp = 0.0, hit, hit
                else:
                    d = np.linalg.norm(pts[:, None, :] - grid[None, :, :], axis=-1)
                    a, b = np.unravel_index(int(np.argmin(d)), d.shape)
                    clearance, rp, hp = float(d[a, b]), pts[a], grid[b]
                rows.append({
                    "frame": f,
                    "robot_segment": r,
                    "human_element": label,
                    "clearance_mm": clearance,
                    "violation": hit is not None,
                    "resolution": resolution,
                    "robot_point": [float(x) for x in rp],
                    "human_point": [float(x) for x in hp],
                })
    return rows


def proximity_to_json(rows: list[dict]) -> bytes:
    return jsonio.dumps({"version": 1, "rows": rows}).encode()


# files -------------------------------------------------------------------------


def _flat(a) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def save_boundaries(frames: list[FrameBoundary]) -> bytes:
    out = []
    for fr in frames:
        joints = [
            {
                "node": node,
                "center": _flat(e.center),
                "eigvals": _flat(e.eigenvalues),
                "eigvecs": _flat(e.eigenvectors),
                "chi2": e.chi2,
                "alpha": e.alpha,
                "degenerate": e.degenerate,
            }
            for node, e in fr.joints
        ]
        segments = []
        for s in fr.segments:
            b = s.boundary
            entry = {"edge": list(s.edge), "m1": _flat(s.m1), "m2": _flat(s.m2), "fallback": s.fallback}
            if b is not None:
                entry.update({
                    "R": _flat(b.rotation),
                    "L": b.length,
                    "var_b1": _flat(b.var_b1),
                    "var_b2": _flat(b.var_b2),
                    "cov_b12": _flat(b.cov_b12),
                    "chi2_2": b.chi2_2,
                    "alpha": b.alpha,
                    "samples": b.samples,
                    "degenerate": b.degenerate,
                })
            segments.append(entry)
        out.append({"joints": joints, "segments": segments})
    return jsonio.dumps({"version": BOUNDARY_FILE_VERSION, "frames": out}).encode()


def load_boundaries(data: bytes) -> list[FrameBoundary]:
    doc = jsonio.loads(data)
    if doc.get("version") != BOUNDARY_FILE_VERSION:
        raise GeometryError(f"unsupported boundary file version {doc.get('version')!r}")
    frames = []
    for fr in doc["frames"]:
        joints = tuple(
            (
                int(j["node"]),
                JointEllipsoid(
                    np.array(j["center"]), np.array(j["eigvecs"]).reshape(3, 3), np.array(j["eigvals"]),
                    float(j["chi2"]), float(j["alpha"]), bool(j["degenerate"]),
                ),
            )
            for j in fr["joints"]
        )
        segments = []
        for s in fr["segments"]:
            m1, m2 = np.array(s["m1"]), np.array(s["m2"])
            b = None
            if not s["fallback"]:
                b = SegmentBoundary(
                    m1, m2, np.array(s["R"]).reshape(3, 3), float(s["L"]),
                    np.array(s["var_b1"]).reshape(2, 2), np.array(s["var_b2"]).reshape(2, 2),
                    np.array(s["cov_b12"]).reshape(2, 2), float(s["chi2_2"]), float(s["alpha"]),
                    int(s["samples"]), bool(s["degenerate"]),
                )
            segments.append(SegmentEntry((int(s["edge"][0]), int(s["edge"][1])), m1, m2, b))
        frames.append(FrameBoundary(joints, tuple(segments)))
    return frames


def surface_csv(frames: list[FrameBoundary], resolution: int = 16) -> bytes:
    """Plot-ready boundary grid points: frame,element,index,x,y,z."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["frame", "element", "index", "x", "y", "z"])
    for f, fr in enumerate(frames):
        for label, el in _elements(fr):
            for k, p in enumerate(_grid(el, resolution)):
                w.writerow([f, label, k, *(jsonio.format_float(float(x)) for x in p)])
    return out.getvalue().encode()
