"""Frame-by-frame odometry: predict, deskew, downsample, register, integrate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .classes import MOVING_CLASSES, NUM_CLASSES, default_class_factors, read_class_factors
from .errors import ConfigError, DegenerateSystem, EmptyScan, NoCorrespondences
from .grid import MappingConfig, OccupancyGrid, integrate_scan, logit, prune_beyond
from .preprocess import (
    DownsampleConfig,
    Scan,
    ThresholdState,
    deskew,
    predict_delta,
    semantic_downsample,
    update_threshold,
    voxel_downsample,
)
from .registration import (
    IterationStats,
    MapSnapshot,
    RegistrationConfig,
    anchor_of,
    register_scan,
)
from .se3 import Pose

log = logging.getLogger(__name__)

__all__ = ["anchor_of", "process_scan", "OdometryState", "PipelineConfig", "Ablations"]


@dataclass
class Ablations:
    use_cleaning_ray: bool = True
    use_occ_weight: bool = True
    use_sem_weight: bool = True
    use_semantic_downsample: bool = True
    anchor_mode: str = "first"


@dataclass
class ThresholdConfig:
    tau_min: float = 0.3
    sigma_multiplier: float = 3.0
    initial: float = 2.0
    r_max: float = 100.0


@dataclass
class PipelineConfig:
    mapping: MappingConfig = field(default_factory=MappingConfig.semantic)
    downsample: DownsampleConfig = field(default_factory=DownsampleConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    ablations: Ablations = field(default_factory=Ablations)

    def registration_config(self) -> RegistrationConfig:
        a = self.ablations
        return replace(
            self.registration,
            use_occ_weight=self.registration.use_occ_weight and a.use_occ_weight,
            use_sem_weight=self.registration.use_sem_weight and a.use_sem_weight,
            anchor_mode=a.anchor_mode,
        )


@dataclass
class FrameReport:
    frame: int
    iterations: int
    mix_alpha: float
    correspondences: int
    degenerate: bool
    fallback: str | None
    tau_corr: float


@dataclass
class OdometryState:
    grid: OccupancyGrid
    trajectory: list[Pose] = field(default_factory=list)
    threshold_state: ThresholdState = field(default_factory=ThresholdState)
    frame_index: int = 0
    reports: list[FrameReport] = field(default_factory=list)
    last_stats: list[IterationStats] = field(default_factory=list)

    @classmethod
    def initial(cls, cfg: PipelineConfig) -> "OdometryState":
        t = cfg.threshold
        return cls(
            grid=OccupancyGrid(cfg.mapping),
            threshold_state=ThresholdState(
                tau_min=t.tau_min, sigma_multiplier=t.sigma_multiplier, initial_threshold=t.initial
            ),
        )


def process_scan(state: OdometryState, raw: Scan, cfg: PipelineConfig) -> tuple[OdometryState, Pose]:
    """Advance the odometry by one sweep (``state`` is updated in place)."""
    if len(raw) == 0:
        raise EmptyScan(f"frame {state.frame_index} has no points")
    traj = state.trajectory
    delta_pred = predict_delta(traj[-2], traj[-1]) if len(traj) >= 2 else Pose.identity()
    scan = deskew(raw, delta_pred)

    stats: list[IterationStats] = []
    fallback = None
    tau = state.threshold_state.threshold
    if not traj:
        pose = Pose.identity()
    else:
        last = traj[-1]
        t_init = last @ delta_pred
        v_adapt = cfg.downsample.base_multiplier * cfg.mapping.voxel_size
        if cfg.ablations.use_semantic_downsample:
            source = semantic_downsample(scan, cfg.downsample, v_adapt)
        else:
            source = voxel_downsample(scan, v_adapt)
        rcfg = cfg.registration_config()
        try:
            pose, stats = register_scan(
                source.points, source.classes, MapSnapshot(state.grid, rcfg), t_init, tau, rcfg
            )
        except (NoCorrespondences, DegenerateSystem) as exc:
            log.warning("frame %d: registration failed (%s); using prediction", state.frame_index, exc)
            pose, fallback = t_init, type(exc).__name__
        state.threshold_state, _ = update_threshold(
            state.threshold_state, delta_pred, last.inverse() @ pose, cfg.threshold.r_max
        )

    world = pose.transform(scan.points)
    integrate_scan(state.grid, pose.translation, world, scan.classes, cfg.ablations.use_cleaning_ray)
    prune_beyond(state.grid, pose.translation, cfg.mapping.max_range)

    traj.append(pose)
    state.last_stats = stats
    state.reports.append(
        FrameReport(
            frame=state.frame_index,
            iterations=len(stats),
            mix_alpha=stats[-1].mix_alpha if stats else float("nan"),
            correspondences=stats[-1].correspondence_count if stats else 0,
            degenerate=any(s.degenerate for s in stats),
            fallback=fallback,
            tau_corr=tau,
        )
    )
    state.frame_index += 1
    return state, pose


def run_sequence(scans, cfg: PipelineConfig, state: OdometryState | None = None) -> OdometryState:
    state = state or OdometryState.initial(cfg)
    for scan in scans:
        process_scan(state, scan, cfg)
    return state


# ---------------------------------------------------------------------------
# config files: flat ``section.key = value`` lines

DEFAULTS = {
    "mapping.voxel_size": "0.5",
    "mapping.ema_alpha": "0.8",
    "mapping.p_hit": "0.55",
    "mapping.p_miss": "0.49",
    "mapping.p_miss_static": "0.498",
    "mapping.p_miss_moving": "0.475",
    "mapping.moving_classes": ",".join(str(c) for c in MOVING_CLASSES),
    "mapping.l_min": repr(logit(0.12)),
    "mapping.l_max": repr(logit(0.97)),
    "mapping.max_range": "100",
    "mapping.class_count": str(NUM_CLASSES),
    "downsample.beta": "1.5",
    "downsample.class_map": "",
    "registration.tau_planar": "0.1",
    "registration.min_points_for_plane": "5",
    "registration.gamma": "1.5",
    "registration.w_lower": "0.25",
    "registration.gm_scale": "",
    "registration.max_iterations": "100",
    "registration.convergence_eps": "1e-6",
    "registration.mix_per_iteration": "true",
    "registration.workers": "1",
    "threshold.tau_min": "0.3",
    "threshold.sigma_multiplier": "3",
    "threshold.initial": "2.0",
    "threshold.r_max": "100",
    "ablation.use_cleaning_ray": "true",
    "ablation.use_occ_weight": "true",
    "ablation.use_sem_weight": "true",
    "ablation.use_semantic_downsample": "true",
    "ablation.anchor_mode": "first",
}

# degenerate-corridor profile: only these two values differ from the defaults
CORRIDOR_PROFILE = {"mapping.voxel_size": "0.2", "mapping.p_miss": "0.485"}


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_config_text(text: str, base_dir: Path | None = None) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key == "downsample.class_map" and value and base_dir is not None:
            value = str((base_dir / value).resolve()) if not Path(value).is_absolute() else value
        values[key] = value
    return values


def build_config(overrides: dict[str, str] | None = None) -> PipelineConfig:
    v = dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        v[key] = value
    try:
        k = int(v["mapping.class_count"])
        moving = [int(x) for x in v["mapping.moving_classes"].split(",") if x.strip()]
        mapping = MappingConfig.semantic(
            p_miss=float(v["mapping.p_miss"]),
            p_miss_static=float(v["mapping.p_miss_static"]),
            p_miss_moving=float(v["mapping.p_miss_moving"]),
            moving_classes=moving,
            class_count=k,
            voxel_size=float(v["mapping.voxel_size"]),
            ema_alpha=float(v["mapping.ema_alpha"]),
            p_hit=float(v["mapping.p_hit"]),
            log_odds_clamp=(float(v["mapping.l_min"]), float(v["mapping.l_max"])),
            max_range=float(v["mapping.max_range"]),
        )
        factors = (
            read_class_factors(v["downsample.class_map"], k)
            if v["downsample.class_map"]
            else default_class_factors(k)
        )
        downsample = DownsampleConfig(factors, float(v["downsample.beta"]))
        registration = RegistrationConfig(
            tau_planar=float(v["registration.tau_planar"]),
            min_points_for_plane=int(v["registration.min_points_for_plane"]),
            gamma=float(v["registration.gamma"]),
            w_lower=float(v["registration.w_lower"]),
            gm_scale=float(v["registration.gm_scale"]) if v["registration.gm_scale"] else None,
            max_iterations=int(v["registration.max_iterations"]),
            convergence_eps=float(v["registration.convergence_eps"]),
            mix_per_iteration=parse_bool(v["registration.mix_per_iteration"]),
            workers=int(v["registration.workers"]),
        )
        threshold = ThresholdConfig(
            tau_min=float(v["threshold.tau_min"]),
            sigma_multiplier=float(v["threshold.sigma_multiplier"]),
            initial=float(v["threshold.initial"]),
            r_max=float(v["threshold.r_max"]),
        )
        ablations = Ablations(
            use_cleaning_ray=parse_bool(v["ablation.use_cleaning_ray"]),
            use_occ_weight=parse_bool(v["ablation.use_occ_weight"]),
            use_sem_weight=parse_bool(v["ablation.use_sem_weight"]),
            use_semantic_downsample=parse_bool(v["ablation.use_semantic_downsample"]),
            anchor_mode=v["ablation.anchor_mode"],
        )
        if ablations.anchor_mode not in ("first", "mean", "center"):
            raise ConfigError(f"unknown anchor mode {ablations.anchor_mode!r}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return PipelineConfig(mapping, downsample, registration, threshold, ablations)


def load_config(path=None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    values = {}
    if path is not None:
        p = Path(path)
        values = parse_config_text(p.read_text(), p.parent)
    values.update(overrides or {})
    return build_config(values)


def write_default_config(path, overrides: dict[str, str] | None = None) -> None:
    v = dict(DEFAULTS)
    v.update(overrides or {})
    lines = []
    section = None
    for key in DEFAULTS:
        sec = key.split(".")[0]
        if sec != section:
            if section is not None:
                lines.append("")
            lines.append(f"# {sec}")
            section = sec
        lines.append(f"{key} = {v[key]}")
    Path(path).write_text("\n".join(lines) + "\n")

