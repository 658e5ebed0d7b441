"""Per-scan front end: motion prediction, deskewing, downsampling, threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .classes import default_class_factors
from .errors import DomainError
from .grid import keys_of, pack_keys
from .se3 import Pose, _rodrigues_coeffs, log_map, rotation_angle, skew


@dataclass
class Scan:
    """Points ``(N, 3)`` with integer classes and optional relative times."""

    points: np.ndarray
    classes: np.ndarray | None = None
    rel_time: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.classes is None:
            self.classes = np.zeros(n, dtype=np.int64)
        else:
            self.classes = np.asarray(self.classes, dtype=np.int64).reshape(n)
        if self.rel_time is not None:
            self.rel_time = np.asarray(self.rel_time, dtype=float).reshape(n)
            if n and (self.rel_time.min() < 0.0 or self.rel_time.max() > 1.0):
                raise DomainError("rel_time values must lie in [0, 1]")

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> "Scan":
        return replace(self, points=pose.transform(self.points))

    def subset(self, mask) -> "Scan":
        rt = None if self.rel_time is None else self.rel_time[mask]
        return Scan(self.points[mask], self.classes[mask], rt)


@dataclass
class DownsampleConfig:
    class_factors: np.ndarray = field(default_factory=default_class_factors)
    base_multiplier: float = 1.5

    def __post_init__(self):
        self.class_factors = np.asarray(self.class_factors, dtype=float)
        if np.any(self.class_factors < 0):
            raise DomainError("class factors must be non-negative")
        if self.base_multiplier <= 0:
            raise DomainError("base_multiplier must be positive")


@dataclass
class ThresholdState:
    deviation_history: list[float] = field(default_factory=list)
    tau_min: float = 0.3
    sigma_multiplier: float = 3.0
    # used until the first update; motion at startup is unknown
    initial_threshold: float = 2.0
    max_history: int = 1000
    current: float | None = None

    @property
    def threshold(self) -> float:
        if self.current is None:
            return max(self.tau_min, self.initial_threshold)
        return self.current


def predict_delta(t_prev2: Pose | None, t_prev1: Pose | None) -> Pose:
    """Constant-velocity prediction: the last relative motion, reused."""
    if t_prev2 is None or t_prev1 is None:
        return Pose.identity()
    return t_prev2.inverse() @ t_prev1


def _scaled_exp(xi: np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``exp(s * xi)``: rotations ``(N, 3, 3)`` and translations ``(N, 3)``."""
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    scales = np.asarray(scales, dtype=float)
    a = np.empty_like(scales)
    b = np.empty_like(scales)
    c = np.empty_like(scales)
    for i, s in enumerate(scales.tolist()):
        a[i], b[i], c[i] = _rodrigues_coeffs(abs(s) * theta)
    eye = np.eye(3)
    sc = scales[:, None, None]
    rots = eye + (a * scales)[:, None, None] * k + (b * scales**2)[:, None, None] * k2
    jac = eye + (b * scales)[:, None, None] * k + (c * scales**2)[:, None, None] * k2
    trans = np.einsum("nij,j->ni", jac * sc, v)
    return rots, trans


def deskew(scan: Scan, delta_pred: Pose) -> Scan:
    """Express every point in the sensor frame at the end of the sweep.

    A point recorded at relative time ``s`` moves by ``exp((s - 1) * xi)``
    with ``xi = log(delta_pred)``.
    """
    if scan.rel_time is None or len(scan) == 0:
        return scan
    xi = log_map(delta_pred)
    if not np.any(xi):
        return scan
    times, inv = np.unique(scan.rel_time, return_inverse=True)
    rots, trans = _scaled_exp(xi, times - 1.0)
    pts = np.einsum("nij,nj->ni", rots[inv], scan.points) + trans[inv]
    return Scan(pts, scan.classes.copy(), scan.rel_time.copy())


def _voxel_means(points, rel_time, voxel: float):
    keys = pack_keys(keys_of(points, voxel))
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv).astype(float)
    means = np.stack([np.bincount(inv, points[:, i]) for i in range(3)], axis=1) / counts[:, None]
    rt = None if rel_time is None else np.bincount(inv, rel_time) / counts
    return means, rt, inv, len(uniq)


def semantic_downsample(scan: Scan, cfg: DownsampleConfig, v_adapt: float) -> Scan:
    """Class-wise voxel means at voxel size ``factor[c] * v_adapt``."""
    if v_adapt <= 0:
        raise DomainError("v_adapt must be positive")
    out_pts, out_cls, out_rt = [], [], []
    for c in np.unique(scan.classes).tolist():
        factor = cfg.class_factors[c] if c < len(cfg.class_factors) else 1.0
        if factor == 0.0:
            continue
        mask = scan.classes == c
        rt = None if scan.rel_time is None else scan.rel_time[mask]
        means, mrt, _, m = _voxel_means(scan.points[mask], rt, factor * v_adapt)
        out_pts.append(means)
        out_cls.append(np.full(m, c, dtype=np.int64))
        if mrt is not None:
            out_rt.append(mrt)
    if not out_pts:
        return Scan(np.zeros((0, 3)), None, None if scan.rel_time is None else np.zeros(0))
    return Scan(
        np.concatenate(out_pts),
        np.concatenate(out_cls),
        np.concatenate(out_rt) if scan.rel_time is not None else None,
    )


def voxel_downsample(scan: Scan, voxel: float) -> Scan:
    """Class-agnostic voxel means; each output keeps its voxel's majority class."""
    if len(scan) == 0:
        return scan
    means, rt, inv, m = _voxel_means(scan.points, scan.rel_time, voxel)
    votes = np.zeros((m, int(scan.classes.max()) + 1), dtype=np.int64)
    np.add.at(votes, (inv, scan.classes), 1)
    return Scan(means, votes.argmax(axis=1), rt)


def model_deviation(delta_pred: Pose, delta_est: Pose, r_max: float) -> float:
    err = delta_pred.inverse() @ delta_est
    theta = rotation_angle(err.rotation)
    return float(np.linalg.norm(err.translation)) + 2.0 * r_max * math.sin(0.5 * theta)


def update_threshold(
    st: ThresholdState, delta_pred: Pose, delta_est: Pose, r_max: float
) -> tuple[ThresholdState, float]:
    if r_max <= 0:
        raise DomainError("r_max must be positive")
    dev = model_deviation(delta_pred, delta_est, r_max)
    history = list(st.deviation_history)
    if dev >= st.tau_min / st.sigma_multiplier:
        history.append(dev)
        history = history[-st.max_history:]
    if history:
        rms = math.sqrt(sum(d * d for d in history) / len(history))
        tau = max(st.tau_min, st.sigma_multiplier * rms)
    else:
        tau = st.tau_min
    return replace(st, deviation_history=history, current=tau), tau

