import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

from semocc.errors import ConfigError, EmptyScan
from semocc.grid import logit
from semocc.pipeline import (
    CORRIDOR_PROFILE,
    DEFAULTS,
    OdometryState,
    build_config,
    load_config,
    parse_config_text,
    process_scan,
    run_sequence,
    write_default_config,
)
from semocc.preprocess import Scan
from semocc.se3 import Pose
from semocc.synth import Primitive, SceneSpec, SensorSpec, render_scene, room_scene, straight_trajectory


def run_scene(spec, cfg, frames=None):
    state = OdometryState.initial(cfg)
    for k in range(frames or len(spec.trajectory)):
        scan, _ = render_scene(spec, k)
        process_scan(state, scan, cfg)
    return state


def plane_patches(frames):
    # separated patches whose edges follow voxel boundaries: every map voxel
    # holds a full square of one plane, so every voxel is planar
    prims = [
        Primitive("plane", (4.25, 0, 0.5, 0, 1, 0, 0, 0, 1, 2, 1), cls=13),
        Primitive("plane", (-4.25, 0, 0.5, 0, 1, 0, 0, 0, 1, 2, 1), cls=13),
        Primitive("plane", (0, 4.25, 0.5, 1, 0, 0, 0, 0, 1, 2, 1), cls=13),
        Primitive("plane", (0, -4.25, 0.5, 1, 0, 0, 0, 0, 1, 2, 1), cls=13),
        Primitive("plane", (0, 0, -1.25, 1, 0, 0, 0, 1, 0, 2, 2), cls=9),
    ]
    sensor = SensorSpec(beams=64, vfov=(-45, 45), hres=0.25, max_range=30)
    return SceneSpec(prims, sensor, straight_trajectory(frames, step=(0, 0, 0)))


class TestProcessScan:
    def test_first_frame(self):
        spec = room_scene(1)
        scan, _ = render_scene(spec, 0)
        cfg = build_config()
        state, pose = process_scan(OdometryState.initial(cfg), scan, cfg)
        assert np.array_equal(pose.matrix(), np.eye(4))
        assert len(state.grid) > 0
        assert state.frame_index == 1
        assert state.reports[0].iterations == 0

    def test_empty_scan(self):
        cfg = build_config()
        with pytest.raises(EmptyScan):
            process_scan(OdometryState.initial(cfg), Scan(np.zeros((0, 3))), cfg)

    def test_trajectory_invariants(self):
        state = run_scene(room_scene(3), build_config())
        assert len(state.trajectory) == 3 == state.frame_index
        assert np.array_equal(state.trajectory[0].matrix(), np.eye(4))
        for p in state.trajectory:
            assert_allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-9)

    def test_map_uses_full_cloud(self):
        spec = room_scene(2)
        cfg = build_config()
        state = OdometryState.initial(cfg)
        total = 0
        for k in range(2):
            scan, _ = render_scene(spec, k)
            process_scan(state, scan, cfg)
            total += len(scan)
            assert sum(v.count for _, v in state.grid) == total
        assert state.reports[1].correspondences < len(scan)

    def test_stationary_planar_scene_is_fixed_point(self):
        # every downsampled point lies on its voxel's plane, so residuals vanish
        spec = plane_patches(4)
        state = run_scene(spec, build_config())
        for p in state.trajectory:
            assert np.linalg.norm(p.translation) < 1e-6
            assert_allclose(p.rotation, np.eye(3), atol=1e-9)

    def test_stationary_textured_scene_is_fixed_point(self):
        spec = dataclasses.replace(room_scene(1), trajectory=straight_trajectory(4, step=(0, 0, 0)))
        scan, _ = render_scene(spec, 0)
        cfg = build_config()
        state = OdometryState.initial(cfg)
        for _ in range(4):
            _, pose = process_scan(state, scan, cfg)
            assert np.linalg.norm(pose.translation) < 1e-6

    def test_fallback_on_no_correspondences(self):
        cfg = build_config({"threshold.initial": "0.5", "threshold.tau_min": "0.1"})
        state = OdometryState.initial(cfg)
        process_scan(state, Scan([[1.0, 0, 0], [1.0, 0.1, 0]]), cfg)
        _, pose = process_scan(state, Scan([[40.0, 0, 0], [40.0, 0.1, 0]]), cfg)
        assert state.reports[-1].fallback == "NoCorrespondences"
        assert np.array_equal(pose.matrix(), np.eye(4))

    def test_deterministic_and_thread_independent(self):
        spec = room_scene(3)
        a = run_scene(spec, build_config())
        b = run_scene(spec, build_config({"registration.workers": "4"}))
        for p, q in zip(a.trajectory, b.trajectory):
            assert np.array_equal(p.matrix(), q.matrix())

    def test_semantics_free_reduction(self):
        spec = room_scene(3)
        scans = []
        for k in range(3):
            s, _ = render_scene(spec, k)
            scans.append(Scan(s.points))
        geometric = build_config({"ablation.use_sem_weight": "false", "ablation.use_semantic_downsample": "false"})
        a = run_sequence(scans, geometric)
        b = run_sequence(scans, build_config())
        for p, q in zip(a.trajectory, b.trajectory):
            assert np.array_equal(p.matrix(), q.matrix())

    @pytest.mark.parametrize(
        "flag",
        ["use_cleaning_ray", "use_occ_weight", "use_sem_weight", "use_semantic_downsample"],
    )
    def test_ablations_run(self, flag):
        state = run_scene(room_scene(2), build_config({f"ablation.{flag}": "false"}))
        assert len(state.trajectory) == 2

    @pytest.mark.parametrize("mode", ["mean", "center"])
    def test_anchor_modes_run(self, mode):
        state = run_scene(room_scene(2), build_config({"ablation.anchor_mode": mode}))
        assert len(state.trajectory) == 2

    @pytest.mark.slow
    def test_room_drift(self):
        spec = room_scene(50)
        state = run_scene(spec, build_config())
        gt = spec.trajectory
        path = np.linalg.norm(gt[-1].translation - gt[0].translation)
        drift = np.linalg.norm(state.trajectory[-1].translation - gt[-1].translation)
        assert drift < 0.005 * path


class TestConfig:
    def test_defaults(self):
        cfg = build_config()
        m = cfg.mapping
        assert m.voxel_size == 0.5 and m.ema_alpha == 0.8
        assert np.all(m.p_hit == 0.55)
        # unlabeled, moving classes, everything else
        assert m.p_miss[0] == 0.49 and m.p_miss[1] == 0.475 and m.p_miss[8] == 0.475
        assert np.all(m.p_miss[9:] == 0.498)
        assert m.log_odds_clamp == (logit(0.12), logit(0.97))
        r = cfg.registration
        assert r.tau_planar == 0.1 and r.gamma == 1.5 and r.w_lower == 0.25
        assert cfg.downsample.base_multiplier == 1.5
        assert cfg.threshold.initial == 2.0 and cfg.threshold.tau_min == 0.3

    def test_corridor_profile(self):
        assert set(CORRIDOR_PROFILE) == {"mapping.voxel_size", "mapping.p_miss"}
        cfg = build_config(CORRIDOR_PROFILE)
        assert cfg.mapping.voxel_size == 0.2 and cfg.mapping.p_miss[0] == 0.485
        assert cfg.registration == build_config().registration

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "a.conf"
        write_default_config(path, {"mapping.voxel_size": "0.2"})
        cfg = load_config(path)
        assert cfg.mapping.voxel_size == 0.2
        assert cfg.registration == build_config().registration
        assert len(parse_config_text(path.read_text())) == len(DEFAULTS)

    def test_comments_and_overrides(self, tmp_path):
        path = tmp_path / "b.conf"
        path.write_text("# comment\n\nmapping.p_hit = 0.6  # trailing\nablation.use_occ_weight = off\n")
        cfg = load_config(path, {"mapping.p_hit": "0.7"})
        assert np.all(cfg.mapping.p_hit == 0.7)
        assert not cfg.registration_config().use_occ_weight

    def test_class_map_relative_to_file(self, tmp_path):
        (tmp_path / "f.txt").write_text("15 0.5 vegetation\n")
        path = tmp_path / "c.conf"
        path.write_text("downsample.class_map = f.txt\n")
        cfg = load_config(path)
        assert cfg.downsample.class_factors[15] == 0.5

    @pytest.mark.parametrize(
        "text",
        [
            "mapping.nope = 1\n",
            "mapping.voxel_size 0.5\n",
            "mapping.voxel_size = abc\n",
            "ablation.use_occ_weight = maybe\n",
            "ablation.anchor_mode = centroid\n",
            "mapping.p_hit = 0.4\n",
        ],
    )
    def test_errors(self, tmp_path, text):
        path = tmp_path / "bad.conf"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)
