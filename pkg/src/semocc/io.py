"""Dataset readers/writers: KITTI-style point and label files, pose lists."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .classes import CLASS_TO_RAW, RAW_TO_CLASS
from .errors import CountMismatch, DataError, MalformedFile
from .preprocess import Scan
from .se3 import Pose


def read_point_cloud_bin(path) -> Scan:
    """Little-endian float32 ``(x, y, z, intensity)`` records; intensity is dropped."""
    size = os.path.getsize(path)
    if size % 16:
        raise MalformedFile(f"{path}: size {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    return Scan(raw[:, :3].astype(float))


def write_point_cloud_bin(path, points, intensity=None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = intensity
    rec.tofile(path)


def read_labels(path, point_count: int, label_map: dict[int, int] | None = None) -> np.ndarray:
    """Semantic class per point from uint32 records (low 16 bits = semantic id)."""
    size = os.path.getsize(path)
    if size % 4:
        raise MalformedFile(f"{path}: size {size} is not a multiple of 4 bytes")
    if size // 4 != point_count:
        raise CountMismatch(f"{path}: {size // 4} labels for {point_count} points")
    raw = np.fromfile(path, dtype="<u4") & 0xFFFF
    table = RAW_TO_CLASS if label_map is None else label_map
    lut = np.zeros(0x10000, dtype=np.int64)
    for k, v in table.items():
        lut[k] = v
    return lut[raw]


def write_labels(path, classes, class_to_raw: dict[int, int] | None = None, instance=None) -> None:
    table = CLASS_TO_RAW if class_to_raw is None else class_to_raw
    lut = np.zeros(max(table) + 1, dtype=np.uint32)
    for k, v in table.items():
        lut[k] = v
    rec = lut[np.asarray(classes, dtype=np.int64)]
    if instance is not None:
        rec = rec | (np.asarray(instance, dtype=np.uint32) << 16)
    rec.astype("<u4").tofile(path)


def read_times(path, point_count: int) -> np.ndarray:
    """Per-point relative timestamps stored as float32 records."""
    size = os.path.getsize(path)
    if size % 4 or size // 4 != point_count:
        raise CountMismatch(f"{path}: {size // 4} timestamps for {point_count} points")
    return np.fromfile(path, dtype="<f4").astype(float).clip(0.0, 1.0)


def write_times(path, rel_time) -> None:
    np.asarray(rel_time, dtype="<f4").tofile(path)


def write_trajectory_kitti(poses, path) -> None:
    lines = []
    for p in poses:
        row = p.matrix()[:3].reshape(-1)
        lines.append(" ".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def read_trajectory_kitti(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: non-numeric pose entry") from exc
        if len(vals) != 12:
            raise MalformedFile(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        m = np.eye(4)
        m[:3] = np.reshape(vals, (3, 4))
        poses.append(Pose.from_matrix(m))
    return poses


# ---------------------------------------------------------------------------
# sequence directories


def list_frames(data_dir) -> list[Path]:
    """Point files of a sequence, in ``velodyne/`` if present, sorted by name."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    sub = root / "velodyne"
    base = sub if sub.is_dir() else root
    frames = sorted(base.glob("*.bin"))
    if not frames:
        raise DataError(f"{base}: no .bin point files")
    return frames


def load_frame(bin_path: Path, label_dir=None, label_map=None) -> Scan:
    scan = read_point_cloud_bin(bin_path)
    stem = Path(bin_path).stem
    if label_dir is not None:
        label_path = Path(label_dir) / f"{stem}.label"
        if not label_path.exists():
            raise DataError(f"{label_path}: missing label file")
        scan.classes = read_labels(label_path, len(scan), label_map)
    parent = Path(bin_path).parent
    root = parent.parent if parent.name == "velodyne" else parent
    times_path = root / "times" / f"{stem}.bin"
    if times_path.exists():
        scan.rel_time = read_times(times_path, len(scan))
    return scan
