"""Trajectory error metrics: KITTI-style segment errors, APE and RPE."""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError, TooShort
from .se3 import Pose, rotation_angle

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


def _check(est, gt):
    if len(est) != len(gt):
        raise DataError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if not est:
        raise DataError("empty trajectory")


def path_distances(poses) -> np.ndarray:
    """Cumulative travelled distance at each pose."""
    t = np.array([p.translation for p in poses]).reshape(-1, 3)
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _segment_end(dist: np.ndarray, start: int, length: float) -> int:
    target = dist[start] + length
    i = int(np.searchsorted(dist, target, side="left"))
    return i if i < len(dist) else -1


def segment_errors(est, gt, lengths=SEGMENT_LENGTHS, step: int = 1):
    """Per-segment ``(length, translation error / length, rotation error / length)``.

    Rotation errors are in radians per meter.  Every ``step``-th frame
    starts a segment; a segment ends at the first frame whose travelled
    distance reaches the nominal length.
    """
    _check(est, gt)
    dist = path_distances(gt)
    out = []
    for start in range(0, len(gt), step):
        for length in lengths:
            end = _segment_end(dist, start, length)
            if end < 0:
                continue
            d_gt = gt[start].inverse() @ gt[end]
            d_est = est[start].inverse() @ est[end]
            err = d_est.inverse() @ d_gt
            t_err = float(np.linalg.norm(err.translation))
            r_err = rotation_angle(err.rotation)
            out.append((length, t_err / length, r_err / length))
    return out


def eval_rte_rre(est, gt, lengths=SEGMENT_LENGTHS) -> tuple[float, float]:
    """Mean relative translation error in percent and rotation error in deg/100 m.

    Raises TooShort when the ground-truth path is shorter than the smallest
    segment length.
    """
    _check(est, gt)
    total = float(path_distances(gt)[-1])
    if total < min(lengths):
        raise TooShort(f"path length {total:.3f} m is below {min(lengths):g} m")
    segs = segment_errors(est, gt, lengths)
    if not segs:
        raise TooShort("no complete segment in trajectory")
    arr = np.array(segs)
    rte = 100.0 * float(arr[:, 1].mean())
    rre = 100.0 * math.degrees(float(arr[:, 2].mean()))
    return rte, rre


def umeyama_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform ``T`` minimising ``sum |T src_i - dst_i|^2`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    r = u @ d @ vt
    return Pose(r, mu_d - r @ mu_s)


def _summary(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    return {
        "mean": float(v.mean()),
        "max": float(v.max()),
        "rmse": float(math.sqrt(float(np.mean(v * v)))),
        "std": float(v.std()),
    }


def eval_ape_rpe(est, gt, rpe_delta: int = 1) -> tuple[dict[str, float], dict[str, float]]:
    """Translational APE after rigid alignment and RPE over ``rpe_delta`` frames (meters)."""
    _check(est, gt)
    if rpe_delta < 1:
        raise ValueError("rpe_delta must be >= 1")
    if len(gt) <= rpe_delta:
        raise TooShort(f"{len(gt)} poses leave no pair {rpe_delta} frames apart")
    a = umeyama_rigid(np.array([p.translation for p in est]), np.array([p.translation for p in gt]))
    aligned = [a @ p for p in est]
    ape = [np.linalg.norm(p.translation - g.translation) for p, g in zip(aligned, gt)]
    rpe = []
    for i in range(len(gt) - rpe_delta):
        d_gt = gt[i].inverse() @ gt[i + rpe_delta]
        d_est = est[i].inverse() @ est[i + rpe_delta]
        rpe.append(np.linalg.norm((d_gt.inverse() @ d_est).translation))
    return _summary(ape), _summary(rpe)
