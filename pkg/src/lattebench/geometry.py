"""Core geometric and stream value types shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_POSE_ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ClassSet:
    """Semantic label space plus the rare classes targeted by interaction."""

    names: tuple
    interest: tuple = ()

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("need at least 2 classes")
        for c in self.interest:
            if not 0 <= c < len(self.names):
                raise ValueError(f"interest class {c} out of range")

    @property
    def count(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class Pose:
    """Rigid sensor-to-world transform as a 4x4 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _frozen(np.asarray(self.matrix))
        if m.shape != (4, 4):
            raise ValueError("pose must be 4x4")
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > _POSE_ORTHO_TOL:
            raise ValueError("rotation block not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must be proper (det +1)")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 0:
            raise ValueError("last row must be (0,0,0,1)")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(4))

    @staticmethod
    def from_rt(rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return Pose(m)

    def inverse(self) -> "Pose":
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ t
        return Pose(m)

    def compose(self, other: "Pose") -> "Pose":
        m = self.matrix @ other.matrix
        # Re-orthonormalize the rotation block so long pose chains stay valid.
        u, _, vt = np.linalg.svd(m[:3, :3])
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1
            r = u @ vt
        out = np.eye(4)
        out[:3, :3] = r
        out[:3, 3] = m[:3, 3]
        return Pose(out)


def relative_pose(pose_i: Pose, pose_j: Pose) -> Pose:
    """Transform taking frame-j coordinates into frame i."""
    return pose_i.inverse().compose(pose_j)


def transform_points(points: np.ndarray, pose: Pose) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    r = pose.matrix[:3, :3]
    t = pose.matrix[:3, 3]
    return points @ r.T + t


@dataclass(frozen=True)
class MultiModalFrame:
    """One timestamped sensor frame with aligned per-point modality features."""

    t: int
    points: np.ndarray
    feat2d: np.ndarray
    feat3d: np.ndarray
    pose: Pose
    gt: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        f2 = _frozen(self.feat2d)
        f3 = _frozen(self.feat3d)
        gt = np.ascontiguousarray(self.gt, dtype=np.int64)
        gt.flags.writeable = False
        n = pts.shape[0]
        if n == 0 or pts.shape != (n, 3):
            raise ValueError("points must be non-empty N x 3")
        if f2.shape[0] != n or f3.shape[0] != n or gt.shape != (n,):
            raise ValueError("per-point arrays must share leading dimension")
        if not (np.isfinite(f2).all() and np.isfinite(f3).all()):
            raise ValueError("features must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "feat2d", f2)
        object.__setattr__(self, "feat3d", f3)
        object.__setattr__(self, "gt", gt)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PredictionFrame:
    """Per-point class probabilities for both modalities of one frame."""

    t: int
    probs2d: np.ndarray
    probs3d: np.ndarray
    source: str  # "student" | "teacher"

    def __post_init__(self):
        for name in ("probs2d", "probs3d"):
            p = _frozen(getattr(self, name))
            if p.ndim != 2:
                raise ValueError(f"{name} must be N x K")
            if p.min() < -1e-12 or p.max() > 1 + 1e-12:
                raise ValueError(f"{name} entries must lie in [0, 1]")
            if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
                raise ValueError(f"{name} rows must sum to 1")
            object.__setattr__(self, name, p)
        if self.source not in ("student", "teacher"):
            raise ValueError("source must be student or teacher")

    def probs(self, modality: str) -> np.ndarray:
        return self.probs2d if modality == "2d" else self.probs3d


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window sizes, voxel edge length and the keep-quantile."""

    sizes: tuple = (3,)
    voxel_size: float = 0.2
    alpha: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(w) for w in self.sizes))
        if not self.sizes or any(w < 0 for w in self.sizes):
            raise ValueError("window sizes must be non-negative")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("window sizes must be strictly increasing")
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")

    @property
    def max_size(self) -> int:
        return self.sizes[-1]


MODALITIES = ("2d", "3d")
