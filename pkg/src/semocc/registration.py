"""Scan-to-map registration against first-inserted voxel anchors.

Correspondences to planar voxels contribute a scalar point-to-plane residual,
all others a 3-vector point-to-point residual. The two sums are blended by the
fraction of planar correspondences and every term carries the product of a
Geman-McClure, an occupancy and a semantic-consistency weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateSystem, NoCorrespondences
from .grid import OccupancyGrid, VoxelData
from .se3 import Pose, eig3_symmetric, exp_map

PLANAR = "planar"
NON_PLANAR = "non_planar"
ANCHOR_MODES = ("first", "mean", "center")


@dataclass
class RegistrationConfig:
    tau_planar: float = 0.1
    min_points_for_plane: int = 5
    gamma: float = 1.5
    w_lower: float = 0.25
    gm_scale: float | None = None  # None: use the correspondence threshold
    max_iterations: int = 100
    convergence_eps: float = 1e-6
    mix_per_iteration: bool = True
    use_occ_weight: bool = True
    use_sem_weight: bool = True
    anchor_mode: str = "first"
    degeneracy_eps: float = 1e-12
    max_halvings: int = 10
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.tau_planar <= 1.0 / 3.0:
            raise ValueError("tau_planar must lie in (0, 1/3]")
        if self.min_points_for_plane < 3:
            raise ValueError("min_points_for_plane must be at least 3")
        if self.gamma < 0 or not 0.0 <= self.w_lower <= 1.0:
            raise ValueError("gamma must be >= 0 and w_lower in [0, 1]")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(f"anchor_mode must be one of {ANCHOR_MODES}")


@dataclass
class IterationStats:
    n_planar: int
    n_nonplanar: int
    mix_alpha: float
    cost: float
    correspondence_count: int
    step_norm: float = 0.0
    degenerate: bool = False
    halvings: int = 0


@dataclass
class Correspondence:
    source: np.ndarray
    source_class: int
    target_anchor: np.ndarray
    normal: np.ndarray | None
    kind: str
    p_occ: float
    voxel_label: int
    voxel_label_prob: float
    weight: float
    w_gm: float = 1.0
    w_occ: float = 1.0
    w_sem: float = 1.0


@dataclass
class Correspondences:
    """Struct-of-arrays correspondence set; index to get a :class:`Correspondence`."""

    scan_index: np.ndarray
    voxel_index: np.ndarray
    source: np.ndarray
    source_class: np.ndarray
    target: np.ndarray
    normal: np.ndarray  # NaN rows for non-planar
    planar: np.ndarray
    p_occ: np.ndarray
    voxel_label: np.ndarray
    voxel_label_prob: np.ndarray
    distance: np.ndarray
    w_gm: np.ndarray = field(default=None)
    w_occ: np.ndarray = field(default=None)
    w_sem: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.scan_index)
        for name in ("w_gm", "w_occ", "w_sem"):
            if getattr(self, name) is None:
                setattr(self, name, np.ones(n))

    def __len__(self):
        return len(self.scan_index)

    @property
    def weight(self) -> np.ndarray:
        return self.w_gm * self.w_occ * self.w_sem

    @property
    def n_planar(self) -> int:
        return int(self.planar.sum())

    def residuals(self) -> np.ndarray:
        """Scalar residual for planar rows, Euclidean norm for the others."""
        d = self.source - self.target
        out = np.linalg.norm(d, axis=1)
        pl = self.planar
        out[pl] = np.einsum("ij,ij->i", d[pl], self.normal[pl])
        return out

    def __getitem__(self, i) -> Correspondence:
        planar = bool(self.planar[i])
        return Correspondence(
            source=self.source[i],
            source_class=int(self.source_class[i]),
            target_anchor=self.target[i],
            normal=self.normal[i] if planar else None,
            kind=PLANAR if planar else NON_PLANAR,
            p_occ=float(self.p_occ[i]),
            voxel_label=int(self.voxel_label[i]),
            voxel_label_prob=float(self.voxel_label_prob[i]),
            weight=float(self.weight[i]),
            w_gm=float(self.w_gm[i]),
            w_occ=float(self.w_occ[i]),
            w_sem=float(self.w_sem[i]),
        )

    def subset(self, mask) -> "Correspondences":
        return Correspondences(**{k: getattr(self, k)[mask] for k in self.__dataclass_fields__})


# ---------------------------------------------------------------------------
# planarity


def _canonical_sign(n: np.ndarray) -> np.ndarray:
    for x in n:
        if x != 0.0:
            return n if x > 0 else -n
    return n


def classify_voxel(v: VoxelData, cfg: RegistrationConfig):
    """Return ``(kind, normal or None, tau or None)`` for one voxel."""
    if v.count < cfg.min_points_for_plane:
        return NON_PLANAR, None, None
    cov = v.covariance
    cov = 0.5 * (cov + cov.T)
    vals, vecs = eig3_symmetric(cov)
    vals = np.maximum(vals, 0.0)  # rounding can leave tiny negatives
    total = float(vals.sum())
    if total < 1e-12:
        return NON_PLANAR, None, None
    tau = float(vals[2]) / total
    if tau < cfg.tau_planar:
        return PLANAR, _canonical_sign(vecs[:, 2].copy()), tau
    return NON_PLANAR, None, tau


def anchor_of(v: VoxelData, mode: str = "first", key=None, voxel_size: float | None = None) -> np.ndarray:
    """Registration target of a voxel: first point, running mean or cell center."""
    if mode == "first":
        return v.anchor
    if mode == "mean":
        return v.mean
    if mode == "center":
        if key is None or voxel_size is None:
            raise ValueError("center anchors need the voxel key and size")
        return (np.asarray(key, dtype=float) + 0.5) * voxel_size
    raise ValueError(f"unknown anchor mode {mode!r}")


class MapSnapshot:
    """Frozen arrays of the occupied voxels, sorted by key, plus a k-d tree."""

    def __init__(self, grid: OccupancyGrid, cfg: RegistrationConfig):
        items = sorted(
            ((k, v) for k, v in grid.cells.items() if v.p_occ >= 0.5), key=lambda kv: kv[0]
        )
        m = len(items)
        self.keys = np.array([k for k, _ in items], dtype=np.int64).reshape(m, 3)
        self.anchors = np.array(
            [anchor_of(v, cfg.anchor_mode, k, grid.voxel_size) for k, v in items], dtype=float
        ).reshape(m, 3)
        self.p_occ = np.array([v.p_occ for _, v in items], dtype=float)
        self.labels = np.array([v.label for _, v in items], dtype=np.int64)
        self.label_probs = np.array([v.label_prob for _, v in items], dtype=float)
        self.planar, self.normals = classify_many([v for _, v in items], cfg)
        self.tree = cKDTree(self.anchors) if m else None
        self.workers = cfg.workers

    def __len__(self):
        return len(self.anchors)


def classify_many(voxels, cfg: RegistrationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Planar flags and normals (NaN rows when non-planar) for many voxels.

    Results are cached on each voxel and keyed by its moments object, which
    is replaced on every hit.  Stale voxels are decomposed in one batch.
    """
    m = len(voxels)
    planar = np.zeros(m, dtype=bool)
    normals = np.full((m, 3), np.nan)
    token = (cfg.tau_planar, cfg.min_points_for_plane)
    stale = []
    for i, v in enumerate(voxels):
        cache = getattr(v, "_planarity", None)
        if cache is not None and cache[0] is v.moments and cache[1] == token:
            if cache[2] is not None:
                planar[i] = True
                normals[i] = cache[2]
        elif v.count >= cfg.min_points_for_plane:
            stale.append(i)
        else:
            v._planarity = (v.moments, token, None)
    if stale:
        cov = np.array([voxels[i].covariance for i in stale])
        cov = 0.5 * (cov + cov.transpose(0, 2, 1))
        vals, vecs = np.linalg.eigh(cov)  # ascending
        vals = np.maximum(vals, 0.0)
        total = vals.sum(axis=1)
        tau = vals[:, 0] / np.where(total > 0, total, 1.0)
        flat = (total >= 1e-12) & (tau < cfg.tau_planar)
        n = vecs[:, :, 0]
        lead = np.argmax(n != 0.0, axis=1)
        sign = np.where(n[np.arange(len(n)), lead] < 0, -1.0, 1.0)
        n = n * sign[:, None]
        for j, i in enumerate(stale):
            normal = n[j].copy() if flat[j] else None
            voxels[i]._planarity = (voxels[i].moments, token, normal)
            if flat[j]:
                planar[i] = True
                normals[i] = normal
    return planar, normals


# ---------------------------------------------------------------------------
# correspondence search


def find_correspondences(
    points, classes, snapshot: MapSnapshot, tau_corr: float, k: int = 8
) -> Correspondences:
    """Nearest occupied anchor within ``tau_corr`` for each point.

    Ties in distance go to the lexicographically smallest voxel key.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cls = np.zeros(len(pts), dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64)
    m = len(snapshot)
    if m == 0 or len(pts) == 0:
        return _empty_correspondences()
    k = min(k, m)
    slack = tau_corr * (1.0 + 1e-9) + 1e-12
    _, idx = snapshot.tree.query(pts, k=k, distance_upper_bound=slack, workers=snapshot.workers)
    idx = idx.reshape(len(pts), k)
    valid = idx < m
    safe = np.where(valid, idx, 0)
    diff = pts[:, None, :] - snapshot.anchors[safe]
    dist = np.sqrt((diff * diff).sum(axis=2))
    dist = np.where(valid & (dist <= tau_corr), dist, np.inf)
    best = dist.min(axis=1)
    found = np.isfinite(best)
    # smallest index among the minimal-distance candidates
    tied = dist == best[:, None]
    cand = np.where(tied & found[:, None], safe, m)
    choice = cand.min(axis=1)

    # every returned neighbour tied: there may be more equidistant anchors
    overflow = np.flatnonzero(found & tied.all(axis=1) & (k < m))
    for i in overflow.tolist():
        near = snapshot.tree.query_ball_point(pts[i], slack)
        near = np.asarray(sorted(near), dtype=np.int64)
        d = np.sqrt(((pts[i] - snapshot.anchors[near]) ** 2).sum(axis=1))
        choice[i] = near[d == d.min()].min()

    sel = np.flatnonzero(found)
    vox = choice[sel]
    return Correspondences(
        scan_index=sel,
        voxel_index=vox,
        source=pts[sel],
        source_class=cls[sel],
        target=snapshot.anchors[vox],
        normal=snapshot.normals[vox],
        planar=snapshot.planar[vox],
        p_occ=snapshot.p_occ[vox],
        voxel_label=snapshot.labels[vox],
        voxel_label_prob=snapshot.label_probs[vox],
        distance=best[sel],
    )


def _empty_correspondences() -> Correspondences:
    z = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    return Correspondences(
        zi, zi, np.zeros((0, 3)), zi, np.zeros((0, 3)), np.zeros((0, 3)),
        np.zeros(0, dtype=bool), z, zi, z, z,
    )


# ---------------------------------------------------------------------------
# weights


def gm_weight(residual_norm, c: float):
    """IRLS weight of the Geman-McClure loss, 1 at zero residual."""
    c2 = c * c
    r = np.asarray(residual_norm, dtype=float)
    w = (c2 / (c2 + r * r)) ** 2
    return float(w) if w.ndim == 0 else w


def occ_weight(p_occ, gamma: float):
    w = np.asarray(p_occ, dtype=float) ** gamma
    return float(w) if w.ndim == 0 else w


def sem_weight(c, c_vox, p_vox, w_lower: float):
    c = np.asarray(c)
    c_vox = np.asarray(c_vox)
    match = (c == c_vox) | (c == 0) | (c_vox == 0)
    w = w_lower + match * (1.0 - w_lower) * np.asarray(p_vox, dtype=float)
    return float(w) if w.ndim == 0 else w


def mix_weight(n_planar: int, n_nonplanar: int) -> float:
    total = n_planar + n_nonplanar
    return n_planar / total if total > 0 else 0.0


def assign_weights(corrs: Correspondences, cfg: RegistrationConfig, gm_scale: float) -> Correspondences:
    corrs.w_gm = gm_weight(np.abs(corrs.residuals()), gm_scale) * np.ones(len(corrs))
    corrs.w_occ = occ_weight(corrs.p_occ, cfg.gamma) if cfg.use_occ_weight else np.ones(len(corrs))
    if cfg.use_sem_weight:
        corrs.w_sem = sem_weight(corrs.source_class, corrs.voxel_label, corrs.voxel_label_prob, cfg.w_lower)
    else:
        corrs.w_sem = np.ones(len(corrs))
    return corrs


# ---------------------------------------------------------------------------
# normal equations


def residuals_and_jacobians(corrs: Correspondences):
    """Stacked residual rows and their Jacobians w.r.t. a left twist ``(omega, v)``.

    Returns ``(e, J, row_owner)`` where planar correspondences own one row
    and the others own three.
    """
    pl = np.flatnonzero(corrs.planar)
    po = np.flatnonzero(~corrs.planar)
    s_pl, n_pl = corrs.source[pl], corrs.normal[pl]
    e_pl = np.einsum("ij,ij->i", s_pl - corrs.target[pl], n_pl)
    j_pl = np.hstack([np.cross(s_pl, n_pl), n_pl])

    s_po = corrs.source[po]
    e_po = (s_po - corrs.target[po]).reshape(-1)
    j_po = np.zeros((len(po), 3, 6))
    # d(s)/d(omega) = -[s]_x
    j_po[:, 0, 1], j_po[:, 0, 2] = s_po[:, 2], -s_po[:, 1]
    j_po[:, 1, 0], j_po[:, 1, 2] = -s_po[:, 2], s_po[:, 0]
    j_po[:, 2, 0], j_po[:, 2, 1] = s_po[:, 1], -s_po[:, 0]
    j_po[:, 0, 3] = j_po[:, 1, 4] = j_po[:, 2, 5] = 1.0
    e = np.concatenate([e_pl, e_po])
    jac = np.vstack([j_pl, j_po.reshape(-1, 6)])
    owner = np.concatenate([pl, np.repeat(po, 3)])
    return e, jac, owner


def weighted_cost(corrs: Correspondences, mix_alpha: float) -> float:
    d = corrs.source - corrs.target
    w = corrs.weight
    pl = corrs.planar
    e_pl = np.einsum("ij,ij->i", d[pl], corrs.normal[pl])
    c_pl = float((w[pl] * e_pl * e_pl).sum())
    c_po = float((w[~pl] * (d[~pl] ** 2).sum(axis=1)).sum())
    return mix_alpha * c_pl + (1.0 - mix_alpha) * c_po


def accumulate_system(corrs: Correspondences, mix_alpha: float):
    e, jac, owner = residuals_and_jacobians(corrs)
    lam = np.where(corrs.planar, mix_alpha, 1.0 - mix_alpha)
    rw = (lam * corrs.weight)[owner]
    wj = jac * rw[:, None]
    # plain reductions (no BLAS) keep the sum order fixed
    h = (wj[:, :, None] * jac[:, None, :]).sum(axis=0)
    g = -(wj * e[:, None]).sum(axis=0)
    h = 0.5 * (h + h.T)
    return h, g, weighted_cost(corrs, mix_alpha)


def degeneracy_floor(h: np.ndarray, eps: float) -> float:
    """``eps`` raised to what eigvalsh can resolve for a matrix of this size."""
    return max(eps, 64.0 * np.finfo(float).eps * float(np.trace(h)))


def build_system(corrs: Correspondences, mix_alpha: float, eps: float = 1e-12):
    """Gauss-Newton normal equations ``H xi = g`` and the current cost."""
    if len(corrs) == 0:
        raise NoCorrespondences("cannot build a system without correspondences")
    h, g, cost = accumulate_system(corrs, mix_alpha)
    lam_min = float(np.linalg.eigvalsh(h)[0])
    if lam_min < degeneracy_floor(h, eps):
        raise DegenerateSystem(f"smallest eigenvalue {lam_min:.3e} below {eps:g}", lam_min)
    return h, g, cost


def _moved(corrs: Correspondences, xi) -> Correspondences:
    moved = Correspondences(**{k: getattr(corrs, k) for k in corrs.__dataclass_fields__})
    moved.source = exp_map(xi).transform(corrs.source)
    return moved


def register_scan(
    points,
    classes,
    grid: OccupancyGrid | MapSnapshot,
    t_init: Pose,
    tau_corr: float,
    cfg: RegistrationConfig | None = None,
) -> tuple[Pose, list[IterationStats]]:
    """Refine ``t_init`` so the sensor-frame ``points`` align with the map."""
    cfg = cfg or RegistrationConfig()
    snap = grid if isinstance(grid, MapSnapshot) else MapSnapshot(grid, cfg)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(snap) == 0 or len(pts) == 0:
        return t_init, []
    gm_scale = cfg.gm_scale if cfg.gm_scale is not None else tau_corr
    pose = t_init
    stats: list[IterationStats] = []
    fixed_mix = None
    for _ in range(cfg.max_iterations):
        corrs = find_correspondences(pose.transform(pts), classes, snap, tau_corr)
        if len(corrs) == 0:
            raise NoCorrespondences("no scan point lies within the correspondence threshold")
        n_pl = corrs.n_planar
        n_po = len(corrs) - n_pl
        mix = mix_weight(n_pl, n_po)
        if not cfg.mix_per_iteration:
            fixed_mix = mix if fixed_mix is None else fixed_mix
            mix = fixed_mix
        assign_weights(corrs, cfg, gm_scale)

        h, g, cost = accumulate_system(corrs, mix)
        degenerate = False
        lam_min = float(np.linalg.eigvalsh(h)[0])
        if lam_min < degeneracy_floor(h, cfg.degeneracy_eps):
            degenerate = True
            mu = 1e-6 * float(np.trace(h)) / 6.0
            if not mu > 0.0 or not math.isfinite(mu):
                raise DegenerateSystem("system has no information to damp", lam_min)
            h = h + mu * np.eye(6)
        xi = np.linalg.solve(h, g)

        halvings = 0
        new_cost = weighted_cost(_moved(corrs, xi), mix)
        while new_cost > cost and halvings < cfg.max_halvings:
            xi = 0.5 * xi
            halvings += 1
            new_cost = weighted_cost(_moved(corrs, xi), mix)
        if new_cost > cost:
            xi = np.zeros(6)
        step = float(np.linalg.norm(xi))
        pose = exp_map(xi) @ pose
        stats.append(IterationStats(n_pl, n_po, mix, cost, len(corrs), step, degenerate, halvings))
        if step < cfg.convergence_eps:
            break
    return pose, stats

