"""Deterministic synthetic multi-modal point-cloud stream.

The world is a small outdoor scene (ground plane, buildings, vegetation,
moving vehicles and a handful of rare pedestrians/bicycles). Each per-point
"modality" feature is that class's prototype vector plus scheduled corruption
noise, which is what the adaptation losses actually consume; there is no
camera model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ClassSet, MultiModalFrame, Pose
from .models import AdamW, ModelPair, backward, forward

DEFAULT_CLASSES = ClassSet(
    names=("road", "building", "vegetation", "vehicle", "pedestrian", "bicycle"),
    interest=(4, 5),
)


@dataclass(frozen=True)
class Corruption:
    """Per-modality corruption applied on top of the base feature noise."""

    extra_sigma: float = 0.0
    drop_prob: float = 0.0
    bias: float = 0.0

    def __post_init__(self):
        if self.extra_sigma < 0 or not 0 <= self.drop_prob <= 1:
            raise ValueError("invalid corruption parameters")


IDENTITY_CORRUPTION = Corruption()


@dataclass(frozen=True)
class ShiftSegment:
    start: int
    end: int  # exclusive
    corrupt2d: Corruption = IDENTITY_CORRUPTION
    corrupt3d: Corruption = IDENTITY_CORRUPTION

    def corruption(self, modality: str) -> Corruption:
        return self.corrupt2d if modality == "2d" else self.corrupt3d


@dataclass(frozen=True)
class ShiftSchedule:
    segments: tuple = ()

    def __post_init__(self):
        segs = tuple(self.segments)
        for a, b in zip(segs, segs[1:]):
            if a.end > b.start:
                raise ValueError("shift segments must not overlap")
        object.__setattr__(self, "segments", segs)

    def active(self, t: int) -> ShiftSegment:
        for seg in self.segments:
            if seg.start <= t < seg.end:
                return seg
        return ShiftSegment(t, t + 1)

    @staticmethod
    def identity() -> "ShiftSchedule":
        return ShiftSchedule(())


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    extent: float = 40.0
    class_set: ClassSet = DEFAULT_CLASSES
    points_per_frame: int = 4096
    feature_dim: int = 16
    prototype_scale: float = 2.0
    noise_sigma2d: float = 0.25
    noise_sigma3d: float = 0.25
    sensor_radius: float = 28.0
    # per-class instance counts; geometry is fixed per class kind
    counts: dict = field(default_factory=lambda: {
        "road": 1, "building": 4, "vegetation": 6,
        "vehicle": 3, "pedestrian": 2, "bicycle": 2,
    })

    def __post_init__(self):
        if self.points_per_frame <= 0 or self.feature_dim < 4:
            raise ValueError("invalid world config")
        if min(self.noise_sigma2d, self.noise_sigma3d) < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class Instance:
    class_id: int
    template: np.ndarray   # (M, 3) surface points relative to the center
    center: np.ndarray     # (3,)
    velocity: np.ndarray   # (3,) meters per frame; zeros when static

    def points_at(self, t: int, extent: float) -> np.ndarray:
        c = _bounce(self.center + self.velocity * t, self.velocity, extent)
        return self.template + c


def _bounce(raw, velocity, extent):
    """Reflect a linearly moving center back into [margin, extent - margin]."""
    margin = 2.0
    lo, hi = margin, extent - margin
    span = hi - lo
    out = np.array(raw, dtype=np.float64)
    for ax in range(2):  # keep z fixed
        if velocity[ax] == 0.0:
            continue
        x = (raw[ax] - lo) % (2 * span)
        out[ax] = lo + (x if x <= span else 2 * span - x)
    return out


@dataclass(frozen=True)
class World:
    config: WorldConfig
    instances: tuple
    proto2d: np.ndarray  # (K, D)
    proto3d: np.ndarray

    def prototypes(self, modality: str) -> np.ndarray:
        return self.proto2d if modality == "2d" else self.proto3d


@dataclass(frozen=True)
class StreamSpec:
    world: WorldConfig = WorldConfig()
    shift: ShiftSchedule = ShiftSchedule.identity()
    length: int = 400
    waypoints: tuple = ((8.0, 8.0, 1.5), (32.0, 8.0, 1.5), (32.0, 32.0, 1.5), (8.0, 32.0, 1.5))
    heading_noise_sigma: float = 0.0
    pose_noise: tuple = ()  # (trans_sigma_m, rot_sigma_deg) to model SLAM error

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("stream length must be positive")


def _box_surface(rng, size, density):
    """Sample points on the faces of an axis-aligned box centered at origin."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    n = max(int(areas.sum() * density), 24)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.zeros((n, 3))
    for f in range(6):
        m = faces == f
        ax = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        other = [a for a in range(3) if a != ax]
        pts[m, ax] = sign * 0.5 * size[ax]
        pts[m, other[0]] = u[m, 0] * size[other[0]]
        pts[m, other[1]] = u[m, 1] * size[other[1]]
    return pts


def _cylinder_surface(rng, radius, height, n):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(0, height, size=n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _blob_surface(rng, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(0.7, 1.0, size=(n, 1))
    return v * r


def generate_world(config: WorldConfig) -> World:
    """Deterministic function of the seed; rare classes are kept to at most
    ~2% of total surface points by construction."""
    rng = np.random.default_rng([config.seed, 1])
    k = config.class_set.count
    names = config.class_set.names
    proto2d = rng.normal(size=(k, config.feature_dim)) * config.prototype_scale
    proto3d = rng.normal(size=(k, config.feature_dim)) * config.prototype_scale
    ext = config.extent
    instances = []

    def place(margin=4.0):
        if 2 * margin >= ext:
            raise ValueError(f"extent {ext} too small for the requested layout")
        return np.array([rng.uniform(margin, ext - margin),
                         rng.uniform(margin, ext - margin), 0.0])

    for name, n_inst in config.counts.items():
        if name not in names:
            raise ValueError(f"layout class {name!r} not in class set")
        cid = names.index(name)
        for _ in range(int(n_inst)):
            if name == "road":
                n = int(ext * ext * 3.0)
                tpl = np.stack([rng.uniform(0, ext, n), rng.uniform(0, ext, n),
                                np.zeros(n)], axis=1)
                inst = Instance(cid, tpl - np.array([ext / 2, ext / 2, 0.0]),
                                np.array([ext / 2, ext / 2, 0.0]), np.zeros(3))
            elif name == "building":
                size = rng.uniform([6, 6, 5], [10, 10, 8])
                tpl = _box_surface(rng, size, density=3.0)
                tpl[:, 2] += size[2] / 2
                inst = Instance(cid, tpl, place(margin=7.0), np.zeros(3))
            elif name == "vegetation":
                tpl = _blob_surface(rng, rng.uniform(1.5, 2.5), 420)
                tpl[:, 2] = np.abs(tpl[:, 2]) + 0.5
                inst = Instance(cid, tpl, place(), np.zeros(3))
            elif name == "vehicle":
                tpl = _box_surface(rng, np.array([4.2, 1.9, 1.6]), density=40.0)
                tpl[:, 2] += 0.8
                speed = rng.uniform(0.3, 0.7)
                ang = rng.uniform(0, 2 * np.pi)
                vel = np.array([np.cos(ang), np.sin(ang), 0.0]) * speed
                inst = Instance(cid, tpl, place(), vel)
            else:  # pedestrian / bicycle: rare, small, slowly moving
                tpl = _cylinder_surface(rng, 0.35, 1.7, 70)
                speed = rng.uniform(0.05, 0.25)
                ang = rng.uniform(0, 2 * np.pi)
                vel = np.array([np.cos(ang), np.sin(ang), 0.0]) * speed
                inst = Instance(cid, tpl, place(), vel)
            instances.append(inst)

    if not instances:
        raise ValueError("layout produced an empty world")
    instances = _enforce_rare_budget(instances, config)
    return World(config=config, instances=tuple(instances),
                 proto2d=proto2d, proto3d=proto3d)


_RARE_BUDGET = 0.02
_RARE_MIN_POINTS = 12


def _enforce_rare_budget(instances, config: WorldConfig):
    """Thin rare-class surface templates so classes of interest hold at most
    2% of all surface points; the imbalance is guaranteed by construction."""
    interest = set(config.class_set.interest)
    common = sum(i.template.shape[0] for i in instances
                 if i.class_id not in interest)
    rare_insts = [i for i in instances if i.class_id in interest]
    rare = sum(i.template.shape[0] for i in rare_insts)
    if not rare_insts or rare <= _RARE_BUDGET * (common + rare):
        return instances
    budget = int(np.floor(_RARE_BUDGET / (1 - _RARE_BUDGET) * common))
    scale = budget / rare
    out = []
    for inst in instances:
        if inst.class_id in interest:
            keep = max(_RARE_MIN_POINTS, int(inst.template.shape[0] * scale))
            inst = Instance(inst.class_id, inst.template[:keep], inst.center,
                            inst.velocity)
        out.append(inst)
    kept = sum(i.template.shape[0] for i in out if i.class_id in interest)
    total = sum(i.template.shape[0] for i in out)
    if kept > _RARE_BUDGET * total:
        raise ValueError(
            "classes of interest exceed the 2% surface budget even at the "
            "minimum instance size; reduce their counts or enlarge the layout")
    return out


def _trajectory_pose(spec: StreamSpec, t: int, rng) -> Pose:
    wps = np.asarray(spec.waypoints, dtype=np.float64)
    if len(wps) == 1:
        pos, heading = wps[0], 0.0
    else:
        # Constant-speed traversal of the closed polyline across the run.
        seg = np.diff(np.vstack([wps, wps[:1]]), axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        total = cum[-1]
        s = (t / max(spec.length, 1)) * total % total
        idx = int(np.searchsorted(cum, s, side="right") - 1)
        idx = min(idx, len(seg) - 1)
        frac = (s - cum[idx]) / lengths[idx]
        pos = wps[idx] + frac * seg[idx]
        heading = np.arctan2(seg[idx][1], seg[idx][0])
    if spec.heading_noise_sigma > 0:
        heading = heading + rng.normal(0, spec.heading_noise_sigma)
    c, s_ = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s_, 0.0], [s_, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose.from_rt(rot, pos)


def _noisy_pose(pose: Pose, pose_noise, rng) -> Pose:
    trans_sigma, rot_sigma_deg = pose_noise
    dt = rng.normal(0, trans_sigma, size=3)
    ang = np.deg2rad(rng.normal(0, rot_sigma_deg))
    c, s = np.cos(ang), np.sin(ang)
    dr = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pose.compose(Pose.from_rt(dr, dt))


def render_frame(world: World, spec: StreamSpec, t: int) -> MultiModalFrame:
    """Pure function of (world, spec, t)."""
    if not 0 <= t < spec.length:
        raise ValueError(f"frame index {t} outside stream of length {spec.length}")
    cfg = world.config
    rng = np.random.default_rng([cfg.seed, 2, t])
    true_pose = _trajectory_pose(spec, t, rng)
    sensor = true_pose.matrix[:3, 3]

    pts, labels = [], []
    for inst in world.instances:
        p = inst.points_at(t, cfg.extent)
        d = np.linalg.norm(p[:, :2] - sensor[None, :2], axis=1)
        vis = p[d <= cfg.sensor_radius]
        if vis.shape[0]:
            pts.append(vis)
            labels.append(np.full(vis.shape[0], inst.class_id, dtype=np.int64))
    pool = np.concatenate(pts, axis=0)
    gt_pool = np.concatenate(labels)
    n = cfg.points_per_frame
    idx = rng.choice(pool.shape[0], size=n, replace=pool.shape[0] < n)
    world_pts = pool[idx]
    gt = gt_pool[idx]

    seg = spec.shift.active(t)
    feats = {}
    for m, proto, base_sigma in (("2d", world.proto2d, cfg.noise_sigma2d),
                                 ("3d", world.proto3d, cfg.noise_sigma3d)):
        cor = seg.corruption(m)
        sigma = base_sigma + cor.extra_sigma
        f = proto[gt] + cor.bias + rng.normal(size=(n, cfg.feature_dim)) * sigma
        if cor.drop_prob > 0:
            f = np.where(rng.random(f.shape) < cor.drop_prob, 0.0, f)
        feats[m] = f

    sensor_pts = (world_pts - true_pose.matrix[:3, 3]) @ true_pose.matrix[:3, :3]
    reported = _noisy_pose(true_pose, spec.pose_noise, rng) if spec.pose_noise else true_pose
    return MultiModalFrame(t=t, points=sensor_pts, feat2d=feats["2d"],
                           feat3d=feats["3d"], pose=reported, gt=gt)


def render_stream(world: World, spec: StreamSpec):
    for t in range(spec.length):
        yield render_frame(world, spec, t)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (32, 32)
    lr: float = 1e-2
    weight_decay: float = 0.01


def pretrain_source(spec: StreamSpec, model_config: ModelConfig = ModelConfig(),
                    steps: int = 1500, seed: int = 0, frame_pool: int = 24) -> dict:
    """Supervised cross-entropy fit of both modality classifiers on the
    source (shift-free) distribution. Returns {"2d": ModelPair, "3d": ...}
    with teacher == student."""
    source_spec = replace(spec, shift=ShiftSchedule.identity())
    world = generate_world(source_spec.world)
    cfg = world.config
    frames = [render_frame(world, source_spec, t)
              for t in range(min(frame_pool, source_spec.length))]
    k = cfg.class_set.count
    pairs = {}
    for m_i, m in enumerate(("2d", "3d")):
        pair = ModelPair.fresh(cfg.feature_dim, k, seed=seed * 2 + m_i, modality=m)
        opt = AdamW(lr=model_config.lr, weight_decay=model_config.weight_decay)
        for step in range(steps):
            f = frames[step % len(frames)]
            x = f.feat2d if m == "2d" else f.feat3d
            probs, cache = forward(pair.student, x)
            onehot = np.eye(k)[f.gt]
            loss = -np.log(np.clip(probs[np.arange(len(f.gt)), f.gt], 1e-12, None)).mean()
            if not np.isfinite(loss):
                raise FloatingPointError(f"pretraining diverged at step {step}")
            grads = backward(cache, dlogits=(probs - onehot) / len(f.gt), scope="all")
            opt.step(pair.student, grads)
        pair.teacher = {kk: v.copy() for kk, v in pair.student.items()}
        pairs[m] = pair
    return pairs
