"""Sliding-window aggregation, spatial hashing and spatial-temporal voxels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MultiModalFrame, Pose, PredictionFrame, WindowConfig, relative_pose, transform_points


@dataclass(frozen=True)
class MergedCloud:
    """Points of a window of frames expressed in the query frame."""

    points: np.ndarray        # (H, 3) query-frame coordinates
    origin_frame: np.ndarray  # (H,) source frame index j
    origin_index: np.ndarray  # (H,) point index g within frame j
    query_frame: int


@dataclass(frozen=True)
class VoxelGrid:
    """Floor-quantized hash of a merged cloud."""

    voxel_size: float
    keys: np.ndarray     # (Nv, 3) int64, sorted lexicographically by (x, y, z)
    inverse: np.ndarray  # (H,) voxel index of each merged point
    counts: np.ndarray   # (Nv,)

    @property
    def n_voxels(self) -> int:
        return self.keys.shape[0]

    def table(self) -> dict:
        """Voxel key tuple -> list of merged-point indices."""
        order = np.argsort(self.inverse, kind="stable")
        bounds = np.cumsum(self.counts)[:-1]
        groups = np.split(order, bounds)
        return {tuple(k): list(g) for k, g in zip(self.keys, groups)}


@dataclass
class STVoxel:
    """Query/reference prediction rows sharing one voxel, per window size."""

    key: tuple
    query2d: np.ndarray   # (Nq, K) student rows from the query frame
    query3d: np.ndarray
    refs2d: list          # per window d: (Nr_d, K) teacher rows
    refs3d: list
    ref_frames: list      # per window d: (Nr_d,) source frame index
    ref_indices: list     # per window d: (Nr_d,) point index within frame


def aggregate_window(frames, query: int, window: int) -> MergedCloud:
    """Merge every available frame with |j - query| <= window into frame
    ``query``'s coordinates, ordered by (ascending j, original index)."""
    by_t = {f.t: f for f in frames}
    if query not in by_t:
        raise KeyError(f"query frame {query} missing from buffer")
    pose_i = by_t[query].pose
    chunks, of, oi = [], [], []
    for j in sorted(by_t):
        if abs(j - query) > window:
            continue
        f = by_t[j]
        rel = relative_pose(pose_i, f.pose)
        chunks.append(transform_points(f.points, rel))
        of.append(np.full(f.n_points, j, dtype=np.int64))
        oi.append(np.arange(f.n_points, dtype=np.int64))
    return MergedCloud(points=np.concatenate(chunks, axis=0),
                       origin_frame=np.concatenate(of),
                       origin_index=np.concatenate(oi),
                       query_frame=query)


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def voxelize(cloud: MergedCloud, voxel_size: float) -> VoxelGrid:
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    keys = voxel_keys(cloud.points, voxel_size)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return VoxelGrid(voxel_size=voxel_size, keys=uniq, inverse=inverse.ravel(), counts=counts)


def build_st_voxels(grid: VoxelGrid, cloud: MergedCloud, student: PredictionFrame,
                    teachers: dict, windows: WindowConfig) -> list:
    """Per-voxel query (student, frame i) and per-window reference (teacher)
    prediction rows. Voxels with no references under any window are dropped.

    ``grid``/``cloud`` must come from the largest window; smaller windows
    select the time-nested subset of the same merged points.
    """
    i = cloud.query_frame
    dt = np.abs(cloud.origin_frame - i)
    is_query = cloud.origin_frame == i
    if is_query.any():
        n = int(cloud.origin_index[is_query].max()) + 1
        if student.probs2d.shape[0] < n:
            raise ValueError("student prediction rows do not cover the query frame")
    order = np.argsort(grid.inverse, kind="stable")
    bounds = np.cumsum(grid.counts)[:-1]
    groups = np.split(order, bounds)

    # Teacher rows aligned with the merged-point order, gathered frame-wise.
    k_classes = student.probs2d.shape[1]
    t2 = np.zeros((cloud.points.shape[0], k_classes))
    t3 = np.zeros_like(t2)
    for j in np.unique(cloud.origin_frame):
        sel = cloud.origin_frame == j
        gg = cloud.origin_index[sel]
        t2[sel] = teachers[j].probs2d[gg]
        t3[sel] = teachers[j].probs3d[gg]

    out = []
    for k, members in zip(grid.keys, groups):
        q = members[is_query[members]]
        qi = cloud.origin_index[q]
        refs2d, refs3d, rframes, rindices = [], [], [], []
        any_ref = False
        for w in windows.sizes:
            r = members[dt[members] <= w]
            refs2d.append(t2[r])
            refs3d.append(t3[r])
            rframes.append(cloud.origin_frame[r])
            rindices.append(cloud.origin_index[r])
            any_ref = any_ref or len(r) > 0
        if not any_ref:
            continue
        out.append(STVoxel(key=tuple(k),
                           query2d=student.probs2d[qi],
                           query3d=student.probs3d[qi],
                           refs2d=refs2d, refs3d=refs3d,
                           ref_frames=rframes, ref_indices=rindices))
    return out
