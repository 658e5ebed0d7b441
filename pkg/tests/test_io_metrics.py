import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from semocc.classes import RAW_TO_CLASS, read_class_factors, read_label_map, write_class_factors
from semocc.errors import ConfigError, CountMismatch, DataError, MalformedFile, TooShort
from semocc.io import (
    list_frames,
    load_frame,
    read_labels,
    read_point_cloud_bin,
    read_times,
    read_trajectory_kitti,
    write_labels,
    write_point_cloud_bin,
    write_times,
    write_trajectory_kitti,
)
from semocc.metrics import eval_ape_rpe, eval_rte_rre, segment_errors, umeyama_rigid
from semocc.se3 import Pose, exp_map, so3_exp


def line(n, step=1.0, scale=1.0):
    return [Pose(np.eye(3), [scale * step * i, 0.0, 0.0]) for i in range(n)]


def random_traj(rng, n):
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(poses[-1] @ exp_map(np.r_[rng.normal(scale=0.02, size=3), [1.0, 0, 0] + rng.normal(scale=0.1, size=3)]))
    return poses


class TestPointFiles:
    def test_two_records(self, tmp_path):
        rec = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.1]], dtype="<f4")
        rec.tofile(tmp_path / "a.bin")
        s = read_point_cloud_bin(tmp_path / "a.bin")
        assert_allclose(s.points, [[1, 2, 3], [4, 5, 6]])
        assert s.classes.tolist() == [0, 0] and s.rel_time is None

    def test_empty(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        assert len(read_point_cloud_bin(tmp_path / "e.bin")) == 0

    def test_truncated(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"\0" * 20)
        with pytest.raises(MalformedFile):
            read_point_cloud_bin(tmp_path / "t.bin")

    def test_missing(self, tmp_path):
        with pytest.raises(OSError):
            read_point_cloud_bin(tmp_path / "nope.bin")

    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(scale=30, size=(1000, 3)).astype(np.float32)
        write_point_cloud_bin(tmp_path / "r.bin", pts)
        back = read_point_cloud_bin(tmp_path / "r.bin").points
        assert np.array_equal(back, pts.astype(float))


class TestLabels:
    def test_zero(self, tmp_path):
        np.zeros(1, dtype="<u4").tofile(tmp_path / "l.label")
        assert read_labels(tmp_path / "l.label", 1).tolist() == [0]

    def test_instance_bits_ignored(self, tmp_path):
        np.array([50, 50 | (7 << 16)], dtype="<u4").tofile(tmp_path / "l.label")
        assert read_labels(tmp_path / "l.label", 2).tolist() == [13, 13]

    def test_table(self, tmp_path):
        raw = np.array(sorted(RAW_TO_CLASS) + [12345], dtype="<u4")
        raw.tofile(tmp_path / "l.label")
        got = read_labels(tmp_path / "l.label", len(raw))
        assert got.tolist() == [RAW_TO_CLASS[k] for k in sorted(RAW_TO_CLASS)] + [0]

    def test_custom_map(self, tmp_path):
        np.array([1, 2, 3], dtype="<u4").tofile(tmp_path / "l.label")
        assert read_labels(tmp_path / "l.label", 3, {1: 9, 2: 13}).tolist() == [9, 13, 0]

    def test_count_mismatch(self, tmp_path):
        np.zeros(3, dtype="<u4").tofile(tmp_path / "l.label")
        with pytest.raises(CountMismatch):
            read_labels(tmp_path / "l.label", 4)
        (tmp_path / "odd.label").write_bytes(b"\0" * 5)
        with pytest.raises(MalformedFile):
            read_labels(tmp_path / "odd.label", 1)

    def test_write_round_trip(self, tmp_path):
        classes = np.arange(20)
        write_labels(tmp_path / "w.label", classes, instance=np.full(20, 3))
        assert read_labels(tmp_path / "w.label", 20).tolist() == classes.tolist()

    def test_label_map_file(self, tmp_path):
        (tmp_path / "m.txt").write_text("# raw class\n7 13\n8 9\n")
        assert read_label_map(tmp_path / "m.txt") == {7: 13, 8: 9}

    def test_class_factor_file(self, tmp_path):
        f = np.linspace(0, 1, 20)
        write_class_factors(tmp_path / "f.txt", f)
        assert_allclose(read_class_factors(tmp_path / "f.txt"), f)
        (tmp_path / "bad.txt").write_text("3 abc road\n")
        with pytest.raises(ConfigError):
            read_class_factors(tmp_path / "bad.txt")


class TestTimes:
    def test_round_trip(self, tmp_path):
        t = np.linspace(0, 1, 11)
        write_times(tmp_path / "t.bin", t)
        assert_allclose(read_times(tmp_path / "t.bin", 11), t, atol=1e-7)
        with pytest.raises(CountMismatch):
            read_times(tmp_path / "t.bin", 12)


class TestTrajectoryFile:
    def test_identity(self, tmp_path):
        write_trajectory_kitti([Pose.identity()], tmp_path / "p.txt")
        assert (tmp_path / "p.txt").read_text() == "1 0 0 0 0 1 0 0 0 0 1 0\n"

    def test_translation(self, tmp_path):
        write_trajectory_kitti([Pose(np.eye(3), [1, 2, 3])], tmp_path / "p.txt")
        fields = (tmp_path / "p.txt").read_text().split()
        assert (fields[3], fields[7], fields[11]) == ("1", "2", "3")

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        # 9 significant digits resolve 1e-8 for magnitudes below 10
        poses = [Pose(so3_exp(rng.normal(size=3)), rng.uniform(-9.9, 9.9, 3)) for _ in range(100)]
        write_trajectory_kitti(poses, tmp_path / "p.txt")
        back = read_trajectory_kitti(tmp_path / "p.txt")
        err = max(np.abs(a.matrix() - b.matrix()).max() for a, b in zip(poses, back))
        assert err < 1e-8

    def test_malformed(self, tmp_path):
        (tmp_path / "p.txt").write_text("1 0 0\n")
        with pytest.raises(MalformedFile):
            read_trajectory_kitti(tmp_path / "p.txt")
        (tmp_path / "q.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 x\n")
        with pytest.raises(MalformedFile):
            read_trajectory_kitti(tmp_path / "q.txt")


class TestSequence:
    def test_layout(self, tmp_path):
        (tmp_path / "velodyne").mkdir()
        (tmp_path / "labels").mkdir()
        (tmp_path / "times").mkdir()
        for i in range(3):
            write_point_cloud_bin(tmp_path / "velodyne" / f"{i:06d}.bin", np.ones((4, 3)) * i)
            write_labels(tmp_path / "labels" / f"{i:06d}.label", [13] * 4)
            write_times(tmp_path / "times" / f"{i:06d}.bin", [0, 0.25, 0.5, 1.0])
        frames = list_frames(tmp_path)
        assert [f.name for f in frames] == ["000000.bin", "000001.bin", "000002.bin"]
        s = load_frame(frames[1], tmp_path / "labels")
        assert s.classes.tolist() == [13] * 4
        assert_allclose(s.rel_time, [0, 0.25, 0.5, 1.0])

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            list_frames(tmp_path / "nothing")
        with pytest.raises(DataError):
            list_frames(tmp_path)

    def test_missing_label(self, tmp_path):
        write_point_cloud_bin(tmp_path / "000000.bin", np.ones((2, 3)))
        (tmp_path / "labels").mkdir()
        with pytest.raises(DataError):
            load_frame(tmp_path / "000000.bin", tmp_path / "labels")


class TestRte:
    def test_identical(self):
        gt = line(300)
        assert eval_rte_rre(gt, gt) == (0.0, 0.0)

    def test_scaled_line(self):
        rte, rre = eval_rte_rre(line(300, scale=1.01), line(300))
        assert rte == pytest.approx(1.0, abs=1e-6)
        assert rre == 0.0

    def test_too_short(self):
        with pytest.raises(TooShort):
            eval_rte_rre(line(50), line(50))

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            eval_rte_rre(line(200), line(201))

    def test_heading_bias_hand_computed(self):
        n, mid = 401, 200
        gt = line(n)
        kink = Pose(so3_exp([0, 0, math.radians(1.0)]), np.zeros(3))
        est = gt[: mid + 1] + [gt[mid] @ kink @ (gt[mid].inverse() @ g) for g in gt[mid + 1:]]
        rte, rre = eval_rte_rre(est, gt)
        # every segment that crosses the kink carries exactly 1 degree
        terms = []
        for start in range(n):
            for length in range(100, 900, 100):
                end = start + length
                if end >= n:
                    continue
                terms.append((1.0 if start <= mid < end else 0.0) / length)
        assert rre > 0
        assert rre == pytest.approx(100 * np.mean(terms), rel=1e-9)

    def test_segment_end_reaches_length(self):
        # irregular steps: segment must end at the first frame at or past L
        steps = np.r_[0.0, np.full(150, 0.7)]
        gt = [Pose(np.eye(3), [x, 0, 0]) for x in np.cumsum(steps)]
        segs = segment_errors(gt, gt, lengths=(100.0,))
        assert len(segs) == sum(1 for i in range(151) if any(np.cumsum(steps)[i:] - np.cumsum(steps)[i] >= 100))

    def test_invariant_to_global_transform(self):
        rng = np.random.default_rng(2)
        gt = random_traj(rng, 250)
        est = [p @ exp_map(rng.normal(scale=0.01, size=6)) for p in gt]
        t = exp_map([0.3, -0.2, 1.0, 50, -20, 3])
        a = eval_rte_rre(est, gt)
        b = eval_rte_rre([t @ p for p in est], [t @ p for p in gt])
        assert_allclose(a, b, rtol=1e-9)


class TestApe:
    def test_identical(self):
        gt = random_traj(np.random.default_rng(3), 50)
        ape, rpe = eval_ape_rpe(gt, gt)
        assert all(abs(v) < 1e-9 for v in ape.values())
        assert all(abs(v) < 1e-9 for v in rpe.values())

    def test_rigid_offset_absorbed(self):
        rng = np.random.default_rng(4)
        gt = random_traj(rng, 60)
        t = exp_map([0.5, 0.1, -2.0, 10, 20, -5])
        ape, _ = eval_ape_rpe([t @ p for p in gt], gt)
        assert ape["max"] < 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
    def test_invariant_to_global_transform_of_est(self, xi):
        rng = np.random.default_rng(5)
        gt = random_traj(rng, 40)
        est = [p @ exp_map(rng.normal(scale=0.05, size=6)) for p in gt]
        t = exp_map(np.asarray(xi) * [0.5, 0.5, 0.5, 10, 10, 10])
        a_ape, a_rpe = eval_ape_rpe(est, gt)
        b_ape, b_rpe = eval_ape_rpe([t @ p for p in est], gt)
        for k in a_ape:
            assert b_ape[k] == pytest.approx(a_ape[k], abs=1e-8)
            assert b_rpe[k] == pytest.approx(a_rpe[k], abs=1e-8)

    def test_spike_against_brute_force(self):
        gt = random_traj(np.random.default_rng(6), 80)
        est = list(gt)
        est[40] = Pose(gt[40].rotation, gt[40].translation + [0, 0.3, 0])
        ape, _ = eval_ape_rpe(est, gt)
        src = np.array([p.translation for p in est])
        dst = np.array([p.translation for p in gt])
        # Kabsch via scipy on centred points
        rot, _ = Rotation.align_vectors(dst - dst.mean(0), src - src.mean(0))
        aligned = rot.apply(src - src.mean(0)) + dst.mean(0)
        err = np.linalg.norm(aligned - dst, axis=1)
        assert ape["max"] == pytest.approx(err.max(), abs=1e-9)
        assert ape["rmse"] == pytest.approx(np.sqrt(np.mean(err**2)), abs=1e-9)
        assert ape["max"] == pytest.approx(0.3, abs=0.01)

    def test_umeyama_recovers_transform(self):
        rng = np.random.default_rng(7)
        src = rng.normal(size=(30, 3))
        t = exp_map([0.2, -1.0, 2.5, 3, 4, 5])
        fit = umeyama_rigid(src, t.transform(src))
        assert_allclose(fit.matrix(), t.matrix(), atol=1e-10)
        assert np.linalg.det(fit.rotation) == pytest.approx(1.0)

    def test_rpe_delta(self):
        gt = line(10)
        est = line(10, scale=1.1)
        _, rpe = eval_ape_rpe(est, gt, rpe_delta=2)
        assert rpe["mean"] == pytest.approx(0.2)
        with pytest.raises(TooShort):
            eval_ape_rpe(est, gt, rpe_delta=10)
        with pytest.raises(ValueError):
            eval_ape_rpe(est, gt, rpe_delta=0)
