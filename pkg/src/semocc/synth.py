"""Synthetic scenes: primitives, a spinning multi-beam sensor, scene files.

A scene is a set of planar rectangles, boxes and vertical cylinders, each
tagged with a semantic class and an optional per-frame motion, observed by a
rotating LiDAR along a ground-truth trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .preprocess import Scan
from .se3 import Pose, exp_map, log_map, so3_exp


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return so3_exp([0, 0, yaw]) @ so3_exp([0, pitch, 0]) @ so3_exp([roll, 0, 0])


@dataclass
class Primitive:
    kind: str  # plane | box | cylinder
    params: tuple
    cls: int = 0
    motion: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frames: tuple[int, int] | None = None  # half-open visibility window

    def __post_init__(self):
        self.params = tuple(float(x) for x in self.params)
        expected = {"plane": 11, "box": 7, "cylinder": 5}
        if self.kind not in expected:
            raise ConfigError(f"unknown primitive type {self.kind!r}")
        n = len(self.params)
        if self.kind == "box" and n == 6:
            self.params = self.params + (0.0,)
        elif n != expected[self.kind]:
            raise ConfigError(f"{self.kind} takes {expected[self.kind]} parameters, got {n}")
        p = self.params
        extents = {"plane": p[9:11], "box": p[3:6], "cylinder": p[3:5]}[self.kind]
        if min(extents) <= 0:
            raise ConfigError(f"{self.kind} extents must be positive")

    def visible(self, frame: int) -> bool:
        return self.frames is None or self.frames[0] <= frame < self.frames[1]

    def radius(self) -> float:
        """Radius of a sphere about the center enclosing the primitive."""
        p = self.params
        if self.kind == "plane":
            return math.hypot(p[9], p[10])
        if self.kind == "box":
            return math.sqrt(p[3] ** 2 + p[4] ** 2 + p[5] ** 2)
        return math.hypot(p[3], p[4])

    def center(self, frame: int) -> np.ndarray:
        return np.asarray(self.params[:3]) + frame * np.asarray(self.motion)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, frame: int) -> np.ndarray:
        """Smallest positive ray parameter per ray (``inf`` on miss); dirs are unit."""
        c = self.center(frame)
        if self.kind == "plane":
            return _hit_rect(origins, dirs, c, self.params)
        if self.kind == "box":
            return _hit_box(origins, dirs, c, self.params)
        return _hit_cylinder(origins, dirs, c, self.params)

    def surface_distance(self, pts: np.ndarray, frame: int) -> np.ndarray:
        """Distance from points to the primitive's surface (for verification)."""
        c = self.center(frame)
        p = self.params
        if self.kind == "plane":
            u, v = np.asarray(p[3:6]), np.asarray(p[6:9])
            n = np.cross(u, v)
            d = pts - c
            du = np.maximum(np.abs(d @ u) - p[9], 0.0)
            dv = np.maximum(np.abs(d @ v) - p[10], 0.0)
            return np.sqrt((d @ n) ** 2 + du**2 + dv**2)
        if self.kind == "box":
            rot = so3_exp([0, 0, math.radians(p[6])])
            q = np.abs((pts - c) @ rot) - np.asarray(p[3:6])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return np.abs(outside + inside)
        r, hh = p[3], p[4]
        d = pts - c
        radial = np.hypot(d[:, 0], d[:, 1]) - r
        axial = np.abs(d[:, 2]) - hh
        outside = np.hypot(np.maximum(radial, 0.0), np.maximum(axial, 0.0))
        inside = np.minimum(np.maximum(radial, axial), 0.0)
        return np.abs(outside + inside)


def _hit_rect(o, d, c, p):
    u, v = np.asarray(p[3:6]), np.asarray(p[6:9])
    n = np.cross(u, v)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - o) @ n) / denom
        rel = o + t[:, None] * d - c
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(rel @ u) <= p[9]) & (np.abs(rel @ v) <= p[10])
    return np.where(ok, t, np.inf)


def _hit_box(o, d, c, p):
    rot = so3_exp([0, 0, math.radians(p[6])])
    lo_ = (o - c) @ rot
    dl = d @ rot
    h = np.asarray(p[3:6])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - lo_) / dl
        t2 = (h - lo_) / dl
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside the slab passes, outside misses
    par = dl == 0.0
    inside_slab = np.abs(lo_) <= h
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    ok = near <= far
    t = np.where(near > 1e-9, near, np.where(far > 1e-9, far, np.inf))
    return np.where(ok, t, np.inf)


def _hit_cylinder(o, d, c, p):
    r, hh = p[3], p[4]
    lo_ = o - c
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (lo_[:, 0] * d[:, 0] + lo_[:, 1] * d[:, 1])
    cc = lo_[:, 0] ** 2 + lo_[:, 1] ** 2 - r * r
    disc = b * b - 4 * a * cc
    best = np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = lo_[:, 2] + t * d[:, 2]
            ok = (t > 1e-9) & (np.abs(z) <= hh)
            best = np.where(ok & (t < best), t, best)
        for zc in (-hh, hh):
            t = (zc - lo_[:, 2]) / d[:, 2]
            x = lo_[:, 0] + t * d[:, 0]
            y = lo_[:, 1] + t * d[:, 1]
            ok = (t > 1e-9) & (x * x + y * y <= r * r)
            best = np.where(ok & (t < best), t, best)
    return best


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SensorSpec:
    beams: int = 16
    vfov: tuple[float, float] = (-15.0, 15.0)  # degrees
    hres: float = 1.0  # degrees
    max_range: float = 50.0
    skew: bool = False  # simulate motion during the sweep
    # shift the azimuth grid by a golden-ratio fraction of hres per frame so
    # consecutive sweeps do not sample the same bearings
    phase: bool = False

    def directions(self, frame: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions and their sweep times in ``[0, 1]``."""
        n_az = int(round(360.0 / self.hres))
        offset = (frame * _GOLDEN) % 1.0 if self.phase else 0.0
        az = np.radians((np.arange(n_az) + offset) * self.hres)
        el = np.radians(np.linspace(self.vfov[0], self.vfov[1], self.beams))
        a, e = np.meshgrid(az, el, indexing="ij")
        dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        times = np.repeat(np.arange(n_az) / max(n_az - 1, 1), self.beams)
        return dirs.reshape(-1, 3), times


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    trajectory: list[Pose] = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def render_scene(spec: SceneSpec, frame: int) -> tuple[Scan, Pose]:
    """Simulate one sweep; points are in the instantaneous sensor frame."""
    if not 0 <= frame < len(spec.trajectory):
        raise IndexError(f"frame {frame} outside trajectory of {len(spec.trajectory)}")
    gt = spec.trajectory[frame]
    dirs, times = spec.sensor.directions(frame)
    n = len(dirs)
    if spec.sensor.skew and frame > 0:
        xi = log_map(spec.trajectory[frame - 1].inverse() @ gt)
        start = spec.trajectory[frame - 1]
        uniq, inv = np.unique(times, return_inverse=True)
        sweep = [start @ exp_map(s * xi) for s in uniq]
        rots = np.stack([p.rotation for p in sweep])[inv]
        origins = np.stack([p.translation for p in sweep])[inv]
    else:
        rots = np.broadcast_to(gt.rotation, (n, 3, 3))
        origins = np.broadcast_to(gt.translation, (n, 3)).copy()
    world_dirs = np.einsum("nij,nj->ni", rots, dirs)

    best = np.full(n, np.inf)
    cls = np.zeros(n, dtype=np.int64)
    lo, hi = origins.min(axis=0), origins.max(axis=0)
    for prim in spec.primitives:
        if not prim.visible(frame):
            continue
        # skip primitives that cannot come within range of any ray origin
        c = prim.center(frame)
        gap = np.linalg.norm(np.maximum(np.maximum(lo - c, c - hi), 0.0))
        if gap - prim.radius() > spec.sensor.max_range:
            continue
        t = prim.intersect(origins, world_dirs, frame)
        closer = t < best
        best = np.where(closer, t, best)
        cls = np.where(closer, prim.cls, cls)
    hit = best <= spec.sensor.max_range
    rng = np.random.default_rng([spec.seed, frame])
    ranges = best[hit]
    if spec.noise_sigma > 0:
        ranges = ranges + rng.normal(0.0, spec.noise_sigma, size=ranges.shape)
    pts = dirs[hit] * ranges[:, None]
    rel = times[hit] if spec.sensor.skew else None
    return Scan(pts, cls[hit], rel), gt


def mislabel(scan: Scan, fraction: float, source_classes, wrong_class: int, rng) -> Scan:
    """Relabel a random ``fraction`` of the points of ``source_classes``."""
    cls = scan.classes.copy()
    idx = np.flatnonzero(np.isin(cls, list(source_classes)))
    pick = rng.choice(idx, size=int(round(fraction * len(idx))), replace=False)
    cls[pick] = wrong_class
    return Scan(scan.points, cls, scan.rel_time)


# ---------------------------------------------------------------------------
# trajectories


def straight_trajectory(frames: int, step=(1.0, 0.0, 0.0), start=(0.0, 0.0, 0.0), yaw_rate: float = 0.0):
    """Body-frame constant step with constant yaw rate (degrees per frame)."""
    poses = []
    pos = np.asarray(start, dtype=float)
    yaw = 0.0
    for _ in range(frames):
        rot = so3_exp([0, 0, yaw])
        poses.append(Pose(rot, pos.copy()))
        pos = pos + rot @ np.asarray(step, dtype=float)
        yaw += math.radians(yaw_rate)
    return poses


# ---------------------------------------------------------------------------
# scene files


def _kv(tokens):
    pos, opts = [], {}
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            opts[k] = v
        else:
            pos.append(tok)
    return pos, opts


def _floats(text, n=None):
    vals = [float(x) for x in text.replace(":", ",").split(",")]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers in {text!r}")
    return vals


def parse_scene(text: str) -> SceneSpec:
    """Parse the line-oriented scene format (see ``write_scene``)."""
    spec = SceneSpec()
    explicit = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            pos, opts = _kv(rest)
            if head == "primitive":
                kind, *params = pos
                spec.primitives.append(
                    Primitive(
                        kind,
                        tuple(float(x) for x in params) + ((float(opts["yaw"]),) if "yaw" in opts else ()),
                        cls=int(opts.get("class", 0)),
                        motion=tuple(_floats(opts["motion"], 3)) if "motion" in opts else (0.0, 0.0, 0.0),
                        frames=tuple(int(x) for x in opts["frames"].split(":")) if "frames" in opts else None,
                    )
                )
            elif head == "sensor":
                spec.sensor = SensorSpec(
                    beams=int(opts.get("beams", 16)),
                    vfov=tuple(_floats(opts.get("vfov", "-15:15"), 2)),
                    hres=float(opts.get("hres", 1.0)),
                    max_range=float(opts.get("max_range", 50.0)),
                    skew=opts.get("skew", "0").lower() in ("1", "true", "yes", "on"),
                    phase=opts.get("phase", "0").lower() in ("1", "true", "yes", "on"),
                )
            elif head == "noise":
                spec.noise_sigma = float(opts.get("sigma", 0.0))
                spec.seed = int(opts.get("seed", 0))
            elif head == "trajectory":
                spec.trajectory = straight_trajectory(
                    int(opts["frames"]),
                    step=_floats(opts.get("step", "1,0,0"), 3),
                    start=_floats(opts.get("start", "0,0,0"), 3),
                    yaw_rate=float(opts.get("yaw_rate", 0.0)),
                )
            elif head == "pose":
                x, y, z, roll, pitch, yaw = (float(v) for v in pos)
                explicit.append(Pose(rpy_to_matrix(*np.radians([roll, pitch, yaw])), [x, y, z]))
            else:
                raise ConfigError(f"unknown directive {head!r}")
        except (ValueError, KeyError, IndexError) as exc:
            raise ConfigError(f"scene line {lineno}: {exc}") from exc
    if explicit:
        spec.trajectory = explicit
    if not spec.trajectory:
        raise ConfigError("scene has no trajectory")
    return spec


def read_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text())


def write_scene(spec: SceneSpec, path) -> None:
    s = spec.sensor
    lines = [
        f"sensor beams={s.beams} vfov={s.vfov[0]:g}:{s.vfov[1]:g} hres={s.hres:g} "
        f"max_range={s.max_range:g} skew={int(s.skew)} phase={int(s.phase)}",
        f"noise sigma={spec.noise_sigma:g} seed={spec.seed}",
    ]
    for p in spec.trajectory:
        rot = p.rotation
        yaw = math.atan2(rot[1, 0], rot[0, 0])
        pitch = math.asin(max(-1.0, min(1.0, -rot[2, 0])))
        roll = math.atan2(rot[2, 1], rot[2, 2])
        vals = [*p.translation, *np.degrees([roll, pitch, yaw])]
        lines.append("pose " + " ".join(f"{v:.12g}" for v in vals))
    for prim in spec.primitives:
        params = prim.params[:6] if prim.kind == "box" else prim.params
        tok = [f"primitive {prim.kind}"] + [f"{x:.12g}" for x in params]
        if prim.kind == "box" and prim.params[6]:
            tok.append(f"yaw={prim.params[6]:.12g}")
        tok.append(f"class={prim.cls}")
        if any(prim.motion):
            tok.append("motion=" + ",".join(f"{x:.12g}" for x in prim.motion))
        if prim.frames is not None:
            tok.append(f"frames={prim.frames[0]}:{prim.frames[1]}")
        lines.append(" ".join(tok))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# stock scenes

BUILDING, ROAD, POLE, CAR, VEGETATION, FENCE = 13, 9, 18, 1, 15, 14


def _rect(center, u, v, hu, hv, cls):
    return Primitive("plane", (*center, *u, *v, hu, hv), cls=cls)


def corridor_scene(
    frames: int = 100,
    pillars: bool = True,
    step: float = 0.5,
    length: float = 120.0,
    half_width: float = 2.25,
    floor_z: float = -1.25,
    wall_top: float = 3.5,
    pillar_spacing: float = 3.0,
    pillar_half: float = 0.5,
    pillar_depth: float = 0.5,
    pillar_offset: float = 0.25,
    pillar_kind: str = "box",
    sensor: SensorSpec | None = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> SceneSpec:
    """Long straight corridor: two walls and a floor, optional box pillars.

    Walls start 0.35 m above the floor so that, with 0.5 m voxels, no
    voxel holds both a wall face and floor points. Pillars stand on the
    floor.
    """
    x0 = -20.0
    cx = x0 + length / 2
    wall_lo = floor_z + 0.35
    wz, wh = 0.5 * (wall_lo + wall_top), 0.5 * (wall_top - wall_lo)
    prims = [
        _rect((cx, half_width, wz), (1, 0, 0), (0, 0, 1), length / 2, wh, BUILDING),
        _rect((cx, -half_width, wz), (1, 0, 0), (0, 0, 1), length / 2, wh, BUILDING),
        _rect((cx, 0.0, floor_z), (1, 0, 0), (0, 1, 0), length / 2, half_width, ROAD),
    ]
    if pillars:
        # 1 m pillars against the walls; faces sit mid-voxel for 0.5 m
        # voxels so each face owns voxels of its own
        pz, ph = 0.5 * (floor_z + wall_top), 0.5 * (wall_top - floor_z)
        for x in np.arange(x0 + 0.5 * pillar_spacing, x0 + length, pillar_spacing):
            for side in (1, -1):
                y = side * (half_width - pillar_depth)
                if pillar_kind == "cylinder":
                    prims.append(Primitive("cylinder", (x + pillar_offset, y, pz, pillar_half, ph), cls=POLE))
                else:
                    prims.append(Primitive("box", (x + pillar_offset, y, pz, pillar_half, pillar_depth, ph), cls=POLE))
    if sensor is None:
        # downward-looking head: the floor and the lower walls dominate
        sensor = SensorSpec(beams=48, vfov=(-50.0, -10.0), hres=0.25, max_range=10.0, phase=True)
    return SceneSpec(prims, sensor, straight_trajectory(frames, (step, 0, 0)), noise_sigma, seed)


def room_scene(frames: int = 50, step: float = 1.0, noise_sigma: float = 0.0, seed: int = 0) -> SceneSpec:
    """Textured hall: outer walls, floor, scattered boxes, cylinders and slanted panels."""
    prims = [
        _rect((30.0, 12.0, 2.0), (1, 0, 0), (0, 0, 1), 50.0, 5.0, BUILDING),
        _rect((30.0, -12.0, 2.0), (1, 0, 0), (0, 0, 1), 50.0, 5.0, BUILDING),
        _rect((-20.0, 0.0, 2.0), (0, 1, 0), (0, 0, 1), 12.0, 5.0, BUILDING),
        _rect((80.0, 0.0, 2.0), (0, 1, 0), (0, 0, 1), 12.0, 5.0, BUILDING),
        _rect((30.0, 0.0, -1.5), (1, 0, 0), (0, 1, 0), 50.0, 12.0, ROAD),
    ]
    rng = np.random.default_rng(1234)
    for x in np.arange(-15.0, 78.0, 7.0):
        for side in (1, -1):
            y = side * rng.uniform(5.0, 9.0)
            if rng.random() < 0.5:
                h = rng.uniform(0.4, 1.2, size=3)
                prims.append(Primitive("box", (x + rng.uniform(-2, 2), y, -1.5 + h[2], *h, rng.uniform(0, 90)), cls=CAR))
            else:
                prims.append(Primitive("cylinder", (x + rng.uniform(-2, 2), y, 0.5, rng.uniform(0.15, 0.5), 2.0), cls=POLE))
    for x in np.arange(-10.0, 75.0, 13.0):
        a = math.radians(rng.uniform(20, 70))
        u = (math.cos(a), math.sin(a), 0.0)
        prims.append(_rect((x, 11.0 * rng.choice([-1, 1]) * 0.8, 0.5), u, (0, 0, 1), 1.5, 1.5, FENCE))
    sensor = SensorSpec(beams=16, vfov=(-20.0, 20.0), hres=1.0, max_range=40.0)
    return SceneSpec(prims, sensor, straight_trajectory(frames, (step, 0, 0)), noise_sigma, seed)
