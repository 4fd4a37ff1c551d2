import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lattebench.geometry import (ClassSet, MultiModalFrame, Pose,
                                 PredictionFrame, WindowConfig, relative_pose,
                                 transform_points)


def random_pose(rng):
    q = rng.normal(size=(3, 3))
    u, _, vt = np.linalg.svd(q)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = rng.normal(scale=5.0, size=3)
    return Pose(m)


def translate(x, y, z):
    m = np.eye(4)
    m[:3, 3] = (x, y, z)
    return Pose(m)


class TestPose:
    def test_identity_valid(self):
        Pose(np.eye(4))

    def test_rejects_non_orthonormal(self):
        m = np.eye(4)
        m[0, 1] = 0.5
        with pytest.raises(ValueError):
            Pose(m)

    def test_rejects_reflection(self):
        m = np.eye(4)
        m[0, 0] = -1.0
        with pytest.raises(ValueError):
            Pose(m)

    def test_rejects_bad_last_row(self):
        m = np.eye(4)
        m[3, 0] = 1.0
        with pytest.raises(ValueError):
            Pose(m)


class TestRelativePose:
    def test_identity_pair(self):
        out = relative_pose(Pose(np.eye(4)), Pose(np.eye(4)))
        assert np.allclose(out.matrix, np.eye(4))

    def test_identity_base_translation(self):
        out = relative_pose(Pose(np.eye(4)), translate(1, 0, 0))
        assert np.allclose(out.matrix, translate(1, 0, 0).matrix)

    def test_composition_recovers(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ti, tj = random_pose(rng), random_pose(rng)
            rel = relative_pose(ti, tj)
            assert np.abs(ti.matrix @ rel.matrix - tj.matrix).max() < 1e-9

    def test_self_relative_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            t = random_pose(rng)
            assert np.abs(relative_pose(t, t).matrix - np.eye(4)).max() < 1e-9


class TestTransformPoints:
    def test_identity(self):
        pts = np.random.default_rng(2).normal(size=(50, 3))
        assert np.allclose(transform_points(pts, Pose(np.eye(4))), pts)

    def test_pure_translation(self):
        out = transform_points(np.array([[1.0, 2.0, 3.0]]), translate(0, 0, 1))
        assert np.allclose(out, [[1.0, 2.0, 4.0]])

    def test_90deg_yaw(self):
        m = np.eye(4)
        m[:2, :2] = [[0.0, -1.0], [1.0, 0.0]]
        out = transform_points(np.array([[1.0, 0.0, 0.0]]), Pose(m))
        assert np.abs(out - np.array([[0.0, 1.0, 0.0]])).max() < 1e-12

    def test_isometry(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(40, 3))
        out = transform_points(pts, random_pose(rng))
        d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
        assert np.abs(d_in - d_out).max() < 1e-9


class TestClassSet:
    def test_requires_two_classes(self):
        with pytest.raises(ValueError):
            ClassSet(names=("only",), interest=())

    def test_interest_indices_bounded(self):
        with pytest.raises(ValueError):
            ClassSet(names=("a", "b"), interest=(2,))


class TestFrames:
    def test_frame_length_mismatch(self):
        with pytest.raises(ValueError):
            MultiModalFrame(t=0, points=np.zeros((3, 3)),
                            feat2d=np.zeros((4, 2)), feat3d=np.zeros((3, 2)),
                            pose=Pose(np.eye(4)), gt=np.zeros(3, dtype=int))

    def test_frame_rejects_nonfinite(self):
        feat = np.zeros((3, 2))
        feat[0, 0] = np.nan
        with pytest.raises(ValueError):
            MultiModalFrame(t=0, points=np.zeros((3, 3)), feat2d=feat,
                            feat3d=np.zeros((3, 2)), pose=Pose(np.eye(4)),
                            gt=np.zeros(3, dtype=int))

    def test_prediction_rows_sum_to_one(self):
        with pytest.raises(ValueError):
            PredictionFrame(t=0, probs2d=np.full((2, 2), 0.4),
                            probs3d=np.full((2, 2), 0.5), source="student")

    @given(st.integers(min_value=1, max_value=30),
           st.integers(min_value=2, max_value=8))
    @settings(max_examples=25, deadline=None)
    def test_prediction_accepts_simplex_rows(self, n, k):
        rng = np.random.default_rng(n * 100 + k)
        p = rng.random((n, k)) + 1e-3
        p /= p.sum(axis=1, keepdims=True)
        fr = PredictionFrame(t=0, probs2d=p, probs3d=p, source="teacher")
        assert np.allclose(fr.probs("2d").sum(axis=1), 1.0, atol=1e-6)


class TestWindowConfig:
    def test_defaults(self):
        wc = WindowConfig()
        assert wc.sizes == (3,) and wc.voxel_size == 0.2 and wc.alpha == 0.9

    def test_strictly_increasing(self):
        with pytest.raises(ValueError):
            WindowConfig(sizes=(5, 3))

    def test_positive_voxel(self):
        with pytest.raises(ValueError):
            WindowConfig(voxel_size=0.0)
