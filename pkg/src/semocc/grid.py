"""Sparse semantic occupancy grid.

Each stored voxel keeps running point moments, the first point ever inserted
(its *anchor*), an occupancy log-odds value and an EMA class distribution.
Storage is a flat hash map from integer voxel keys to :class:`VoxelData`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .classes import MOVING_CLASSES, NUM_CLASSES
from .errors import DomainError, EmptyObservation, MalformedFile
from .se3 import Moments, moments_merge, moments_of, moments_update


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"logit undefined for p={p}")
    return math.log(p / (1.0 - p))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def key_of(p, voxel_size: float) -> VoxelKey:
    k = np.floor(np.asarray(p, dtype=float) / voxel_size).astype(np.int64)
    return VoxelKey(int(k[0]), int(k[1]), int(k[2]))


def keys_of(points, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


_OFF = 1 << 20
_MASK = (1 << 21) - 1


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack ``(N, 3)`` int keys (each within +-2^20) into sortable int64."""
    k = keys.astype(np.int64) + _OFF
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    return np.stack(
        [(packed >> 42) & _MASK, (packed >> 21) & _MASK, packed & _MASK], axis=1
    ) - _OFF


def _as_tuples(keys: np.ndarray):
    return [VoxelKey(*k) for k in keys.tolist()]


# ---------------------------------------------------------------------------
# configuration and voxel payload


@dataclass
class MappingConfig:
    voxel_size: float = 0.5
    ema_alpha: float = 0.8
    p_hit: np.ndarray | float = 0.55
    p_miss: np.ndarray | float = 0.49
    log_odds_clamp: tuple[float, float] = (logit(0.12), logit(0.97))
    max_range: float = 100.0
    class_count: int = NUM_CLASSES

    def __post_init__(self):
        k = self.class_count
        self.p_hit = np.broadcast_to(np.asarray(self.p_hit, dtype=float), (k,)).copy()
        self.p_miss = np.broadcast_to(np.asarray(self.p_miss, dtype=float), (k,)).copy()
        if self.voxel_size <= 0:
            raise DomainError("voxel_size must be positive")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise DomainError("ema_alpha must lie in [0, 1]")
        if np.any(self.p_hit <= 0.5) or np.any(self.p_hit >= 1.0):
            raise DomainError("p_hit must lie in (0.5, 1)")
        if np.any(self.p_miss <= 0.0) or np.any(self.p_miss >= 0.5):
            raise DomainError("p_miss must lie in (0, 0.5)")
        lo, hi = self.log_odds_clamp
        if not lo < 0.0 < hi:
            raise DomainError("log-odds clamp must satisfy L_min < 0 < L_max")
        self.hit_increment = np.array([logit(p) for p in self.p_hit])
        self.miss_increment = np.array([logit(p) for p in self.p_miss])

    @classmethod
    def semantic(
        cls,
        p_miss: float = 0.49,
        p_miss_static: float = 0.498,
        p_miss_moving: float = 0.475,
        moving_classes=MOVING_CLASSES,
        class_count: int = NUM_CLASSES,
        **kwargs,
    ) -> "MappingConfig":
        """Class-dependent miss table: unlabeled keeps ``p_miss``."""
        table = np.full(class_count, p_miss_static)
        table[0] = p_miss
        for c in moving_classes:
            if c < class_count:
                table[c] = p_miss_moving
        return cls(p_miss=table, class_count=class_count, **kwargs)


@dataclass(eq=False)
class VoxelData:
    moments: Moments = field(default_factory=Moments)
    anchor: np.ndarray | None = None
    log_odds: float = 0.0
    class_probs: np.ndarray | None = None
    label: int = 0
    semantic_updates: int = 0

    @classmethod
    def empty(cls, class_count: int) -> "VoxelData":
        probs = np.zeros(class_count)
        probs[0] = 1.0
        return cls(class_probs=probs)

    @property
    def count(self) -> int:
        return self.moments.count

    @property
    def mean(self) -> np.ndarray:
        return self.moments.mean

    @property
    def covariance(self) -> np.ndarray:
        return self.moments.covariance

    @property
    def p_occ(self) -> float:
        return sigmoid(self.log_odds)

    @property
    def occupied(self) -> bool:
        return self.p_occ >= 0.5

    @property
    def label_prob(self) -> float:
        return float(self.class_probs[self.label])


def _clamp(x: float, cfg: MappingConfig) -> float:
    lo, hi = cfg.log_odds_clamp
    return hi if x > hi else lo if x < lo else x


def apply_hit(v: VoxelData, p, c: int, cfg: MappingConfig) -> VoxelData:
    """Insert one point into ``v`` (in place) and return it."""
    p = np.asarray(p, dtype=float)
    if v.moments.count == 0:
        v.anchor = p.copy()
    v.moments = moments_update(v.moments, p)
    v.log_odds = _clamp(v.log_odds + cfg.hit_increment[c], cfg)
    return v


def apply_miss(v: VoxelData, cfg: MappingConfig) -> VoxelData:
    """Free-space observation; the decrement depends on the voxel's label."""
    v.log_odds = _clamp(v.log_odds + cfg.miss_increment[v.label], cfg)
    return v


def update_semantics(v: VoxelData, hits_in_voxel, alpha: float) -> VoxelData:
    """Fuse one scan's label multiset into the voxel's class distribution."""
    classes = np.asarray(hits_in_voxel, dtype=np.int64).reshape(-1)
    if classes.size == 0:
        raise EmptyObservation("update_semantics needs at least one label")
    k = len(v.class_probs)
    freq = np.bincount(classes, minlength=k)[:k] / classes.size
    if v.semantic_updates == 0:
        v.class_probs = freq
    else:
        v.class_probs = alpha * v.class_probs + (1.0 - alpha) * freq
    v.label = int(np.argmax(v.class_probs))
    v.semantic_updates += 1
    return v


# ---------------------------------------------------------------------------
# ray traversal


def raycast_batch(origin, endpoints, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Voxel traversal for many rays sharing one origin (or one origin each).

    Returns ``(keys, ray_index)``: every voxel visited from the origin voxel up
    to but excluding the endpoint voxel, in traversal order per ray. Each step
    advances exactly one axis, so a ray always terminates in its endpoint
    voxel even when floating-point boundary crossings disagree.
    """
    ends = np.asarray(endpoints, dtype=float).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origin, dtype=float), ends.shape)
    n = len(ends)
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    s = voxel_size
    cur = keys_of(origins, s)
    last = keys_of(ends, s)
    remaining = np.abs(last - cur)
    step = np.sign(last - cur)
    d = ends - origins
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(step > 0, (cur + 1) * s, cur * s)
        t_max = np.where(remaining > 0, (bound - origins) / d, np.inf)
        t_delta = np.where(remaining > 0, s / np.abs(d), np.inf)
    total = remaining.sum(axis=1)

    out_keys = []
    out_idx = []
    active = np.flatnonzero(total > 0)
    cur = cur[active]
    remaining = remaining[active]
    step = step[active]
    t_max = t_max[active]
    t_delta = t_delta[active]
    while active.size:
        out_keys.append(cur.copy())
        out_idx.append(active)
        masked = np.where(remaining > 0, t_max, np.inf)
        axis = np.argmin(masked, axis=1)
        rows = np.arange(active.size)
        cur[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        remaining[rows, axis] -= 1
        keep = remaining.sum(axis=1) > 0
        if not keep.all():
            active, cur, remaining = active[keep], cur[keep], remaining[keep]
            step, t_max, t_delta = step[keep], t_max[keep], t_delta[keep]
    if not out_keys:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    keys = np.concatenate(out_keys)
    idx = np.concatenate(out_idx)
    order = np.argsort(idx, kind="stable")
    return keys[order], idx[order]


def raycast_keys(origin, endpoint, voxel_size: float) -> list[VoxelKey]:
    """Voxels traversed from the origin voxel towards ``endpoint``.

    The origin voxel is included, the endpoint voxel is not.
    """
    keys, _ = raycast_batch(origin, np.asarray(endpoint, dtype=float)[None], voxel_size)
    return _as_tuples(keys)


# ---------------------------------------------------------------------------
# the grid


class OccupancyGrid:
    def __init__(self, config: MappingConfig | None = None):
        self.config = config or MappingConfig()
        self.cells: dict[VoxelKey, VoxelData] = {}

    @property
    def voxel_size(self) -> float:
        return self.config.voxel_size

    def __len__(self):
        return len(self.cells)

    def __contains__(self, key):
        return tuple(key) in self.cells

    def __iter__(self) -> Iterator[tuple[VoxelKey, VoxelData]]:
        return iter(self.cells.items())

    def get(self, key) -> VoxelData | None:
        """Stored voxel or ``None``; a stored free voxel is still returned."""
        return self.cells.get(VoxelKey(*key))

    def occupied_items(self):
        return [(k, v) for k, v in self.cells.items() if v.p_occ >= 0.5]

    def insert_point(self, p, c: int = 0) -> VoxelData:
        """Single hit without semantic fusion."""
        key = key_of(p, self.voxel_size)
        v = self.cells.get(key)
        if v is None:
            v = self.cells[key] = VoxelData.empty(self.config.class_count)
        return apply_hit(v, p, c, self.config)


def integrate_scan(
    grid: OccupancyGrid,
    origin,
    points,
    classes=None,
    cleaning_ray: bool = True,
) -> OccupancyGrid:
    """Fuse one map-frame scan observed from ``origin`` into ``grid``.

    Hits are grouped per voxel; each touched voxel receives its moments,
    per-point log-odds increments and one semantic update. Afterwards every
    already-stored voxel crossed by at least one ray (and hit by none) receives
    exactly one miss.
    """
    cfg = grid.config
    s = cfg.voxel_size
    origin = np.asarray(origin, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cls = np.zeros(len(pts), dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64)
    keep = np.linalg.norm(pts - origin, axis=1) <= cfg.max_range
    pts, cls = pts[keep], cls[keep]
    if len(pts) == 0:
        return grid

    keys = keys_of(pts, s)
    packed = pack_keys(keys)
    order = np.argsort(packed, kind="stable")
    sorted_packed = packed[order]
    starts = np.flatnonzero(np.r_[True, sorted_packed[1:] != sorted_packed[:-1]])
    ends = np.r_[starts[1:], len(order)]
    group_keys = _as_tuples(keys[order[starts]])

    # per-voxel batch moments, vectorized over all touched voxels
    group_of = np.repeat(np.arange(len(starts)), ends - starts)
    sp = pts[order]
    counts = (ends - starts).astype(float)
    means = np.stack([np.bincount(group_of, sp[:, i]) for i in range(3)], axis=1) / counts[:, None]
    dev = sp - means[group_of]
    scat = np.empty((len(starts), 3, 3))
    for i in range(3):
        for j in range(i, 3):
            scat[:, i, j] = scat[:, j, i] = np.bincount(group_of, dev[:, i] * dev[:, j])

    lo, hi = cfg.log_odds_clamp
    inc = cfg.hit_increment[cls[order]].tolist()
    sc = cls[order]
    alpha = cfg.ema_alpha
    cells = grid.cells
    for g, key in enumerate(group_keys):
        a, b = int(starts[g]), int(ends[g])
        v = cells.get(key)
        if v is None:
            v = cells[key] = VoxelData.empty(cfg.class_count)
        if v.moments.count == 0:
            v.anchor = sp[a].copy()
        if b - a == 1:
            v.moments = moments_update(v.moments, sp[a])
        else:
            v.moments = moments_merge(v.moments, Moments(b - a, means[g], scat[g]))
        L = v.log_odds
        for x in inc[a:b]:
            L = L + x
            if L > hi:
                L = hi
            elif L < lo:
                L = lo
        v.log_odds = L
        update_semantics(v, sc[a:b], alpha)

    if cleaning_ray:
        free, _ = raycast_batch(origin, pts, s)
        if len(free):
            free_packed = np.setdiff1d(np.unique(pack_keys(free)), sorted_packed[starts])
            for key in _as_tuples(unpack_keys(free_packed)):
                v = cells.get(key)
                if v is not None:
                    apply_miss(v, cfg)
    return grid


def occupied_in_radius(grid: OccupancyGrid, center, radius: float):
    """Occupied voxels whose anchor lies within ``radius`` of ``center``."""
    center = np.asarray(center, dtype=float)
    r2 = radius * radius
    s = grid.voxel_size
    lo = keys_of(center - radius, s)
    hi = keys_of(center + radius, s)
    span = np.prod(hi - lo + 1)
    if span < len(grid.cells):
        candidates = []
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                for iz in range(lo[2], hi[2] + 1):
                    key = VoxelKey(ix, iy, iz)
                    v = grid.cells.get(key)
                    if v is not None:
                        candidates.append((key, v))
    else:
        candidates = grid.cells.items()
    out = []
    for key, v in candidates:
        if v.p_occ >= 0.5:
            d = v.anchor - center
            if float(d @ d) <= r2:
                out.append((key, v))
    out.sort(key=lambda kv: kv[0])
    return out


def prune_beyond(grid: OccupancyGrid, center, max_range: float) -> OccupancyGrid:
    center = np.asarray(center, dtype=float)
    r2 = max_range * max_range
    drop = []
    for key, v in grid.cells.items():
        d = v.anchor - center
        if float(d @ d) > r2:
            drop.append(key)
    for key in drop:
        del grid.cells[key]
    return grid


# ---------------------------------------------------------------------------
# text dump

_HEADER = "# socc-grid v1"


def dump_grid(grid: OccupancyGrid, path) -> None:
    k = grid.config.class_count
    lines = [f"{_HEADER} voxel_size={grid.voxel_size:.9g} classes={k}"]
    for key in sorted(grid.cells):
        v = grid.cells[key]
        sc = v.moments.scatter
        vals = [
            v.count, *v.mean, sc[0, 0], sc[0, 1], sc[0, 2], sc[1, 1], sc[1, 2], sc[2, 2],
            *v.anchor, v.log_odds,
        ]
        fields = [str(c) for c in key] + [str(v.count)]
        fields += [f"{x:.9g}" for x in vals[1:]]
        fields.append(str(v.label))
        fields += [f"{p:.9g}" for p in v.class_probs]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path, config: MappingConfig | None = None) -> OccupancyGrid:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(_HEADER):
        raise MalformedFile(f"{path}: missing grid header")
    meta = dict(tok.split("=", 1) for tok in text[0].split()[3:])
    voxel_size, k = float(meta["voxel_size"]), int(meta["classes"])
    if config is None:
        config = MappingConfig(voxel_size=voxel_size, class_count=k)
    grid = OccupancyGrid(config)
    for lineno, line in enumerate(text[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 18 + k:
            raise MalformedFile(f"{path}:{lineno}: expected {18 + k} fields, got {len(parts)}")
        key = VoxelKey(*(int(x) for x in parts[:3]))
        n = int(parts[3])
        f = [float(x) for x in parts[4:17]]
        sxx, sxy, sxz, syy, syz, szz = f[3:9]
        scatter = np.array([[sxx, sxy, sxz], [sxy, syy, syz], [sxz, syz, szz]])
        v = VoxelData(
            moments=Moments(n, np.array(f[0:3]), scatter),
            anchor=np.array(f[9:12]),
            log_odds=f[12],
            class_probs=np.array([float(x) for x in parts[18:]]),
            label=int(parts[17]),
            semantic_updates=1,
        )
        grid.cells[key] = v
    return grid
