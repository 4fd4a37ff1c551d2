"""Human-in-the-loop additions: prompt simulation, a promptable mask head,
feature-inversion centroids, clustering/refinement objectives and momentum
gradient record/reuse."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf
from sklearn.cluster import DBSCAN

from .models import AdamW, Params, softmax

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class IttaConfig:
    p_i: float = 0.01
    tau_in: float = 0.9
    tau_out: float = 0.7
    lambda_p: float = 0.01
    lambda_ac: float = 1.0
    lambda_cls: float = 1.0
    gamma_mg: float = 0.9
    dt_max: int = 10
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    mask_threshold: float = 0.5
    rho_min: int = 5
    rho_max: int = 10
    warmup_rho_min: int = 1
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    bottleneck_dim: int = 16
    head_lr: float = 3e-3

    def __post_init__(self):
        if not 0 <= self.p_i <= 1:
            raise ValueError("p_i must be in [0, 1]")
        if self.tau_out > self.tau_in:
            raise ValueError("tau_out must not exceed tau_in")


@dataclass(frozen=True)
class Prompt:
    """One human (or simulated) intervention on a single object."""

    t: int
    class_id: int
    point_indices: tuple
    box: tuple = None  # ((min x,y,z), (max x,y,z)) or None
    rho: int = 1
    simulated: bool = True


# ---------------------------------------------------------------------------
# instance extraction and prompt simulation


def extract_instances(frame, class_id: int, eps: float = 0.5, min_pts: int = 5):
    """Density clusters over the frame's points of one class.

    Returns (point_ids, labels): indices into the frame and their cluster id,
    -1 for noise. Fewer than ``min_pts`` class points yields all noise.
    """
    ids = np.flatnonzero(frame.gt == class_id)
    if ids.size == 0:
        return ids, np.empty(0, dtype=np.int64)
    if ids.size < min_pts:
        return ids, np.full(ids.size, -1, dtype=np.int64)
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(frame.points[ids])
    return ids, labels.astype(np.int64)


def instance_box(points: np.ndarray):
    return (tuple(points.min(axis=0)), tuple(points.max(axis=0)))


def points_in_box(points: np.ndarray, box) -> np.ndarray:
    if box is None:
        return np.zeros(points.shape[0], dtype=bool)
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    return ((points >= lo) & (points <= hi)).all(axis=1)


def simulate_prompts(frame, instance_ids: np.ndarray, rho: int, rng,
                     class_id: int, head_params: Params = None,
                     mask_threshold: float = 0.5) -> Prompt:
    """Click growth over one instance: first the point nearest the instance
    centroid, then the farthest point the current head mask still misses
    (falling back to the farthest from existing clicks)."""
    if instance_ids.size == 0:
        raise ValueError("instance must be non-empty")
    pts = frame.points[instance_ids]
    rho = int(np.clip(rho, 1, instance_ids.size))
    centroid = pts.mean(axis=0)
    clicks = [int(instance_ids[np.argmin(np.linalg.norm(pts - centroid, axis=1))])]
    box = instance_box(pts)
    in_box = points_in_box(frame.points, box)
    prev = np.zeros(frame.n_points)
    while len(clicks) < rho:
        remaining = np.setdiff1d(instance_ids, clicks)
        if remaining.size == 0:
            break
        if head_params is not None:
            prev, _ = head_forward(head_params, frame.feat2d, np.array(clicks),
                                   in_box, prev)
            missed = remaining[prev[remaining] < mask_threshold]
        else:
            missed = np.empty(0, dtype=np.int64)
        pool = missed if missed.size else remaining
        click_pts = frame.points[np.array(clicks)]
        dmin = np.linalg.norm(frame.points[pool][:, None, :] - click_pts[None], axis=2).min(axis=1)
        clicks.append(int(pool[np.argmax(dmin)]))
    return Prompt(t=frame.t, class_id=class_id, point_indices=tuple(clicks),
                  box=box, rho=rho)


class SimulatedPrompter:
    """Bernoulli(p_i)-per-frame prompt source over the classes of interest."""

    def __init__(self, class_set, cfg: IttaConfig, seed: int = 0):
        self.class_set = class_set
        self.cfg = cfg
        self.seed = seed
        if not class_set.interest:
            raise ValueError("classes of interest required for prompting")

    def __call__(self, frame, head_params: Params = None):
        rng = np.random.default_rng([self.seed, 3, frame.t])
        if rng.random() >= self.cfg.p_i:
            return None
        order = rng.permutation(list(self.class_set.interest))
        for c in order:
            ids, labels = extract_instances(frame, int(c), self.cfg.dbscan_eps,
                                            self.cfg.dbscan_min_pts)
            clusters = np.unique(labels[labels >= 0])
            if clusters.size == 0:
                continue
            pick = int(rng.choice(clusters))
            inst = ids[labels == pick]
            lo = min(self.cfg.rho_min, inst.size)
            hi = min(self.cfg.rho_max, inst.size)
            rho = int(rng.integers(lo, hi + 1))
            return simulate_prompts(frame, inst, rho, rng, int(c),
                                    head_params, self.cfg.mask_threshold)
        return None


# ---------------------------------------------------------------------------
# promptable head


def init_head(feature_dim: int, bottleneck_dim: int = 16, seed: int = 0,
              zero_decoder: bool = False) -> Params:
    rng = np.random.default_rng([seed, 4])
    dp = bottleneck_dim
    p: Params = {}
    d = feature_dim
    for i in range(2):
        p[f"n{i}.W"] = rng.normal(0, np.sqrt(2.0 / d), size=(d, dp))
        p[f"n{i}.b"] = np.zeros(dp)
        p[f"n{i}.gamma"] = np.ones(dp)
        p[f"n{i}.beta"] = np.zeros(dp)
        d = dp
    din = 2 * dp + 2
    if zero_decoder:
        p["d0.W"] = np.zeros((din, 16))
        p["d1.W"] = np.zeros((16, 1))
    else:
        p["d0.W"] = rng.normal(0, np.sqrt(2.0 / din), size=(din, 16))
        p["d1.W"] = rng.normal(0, np.sqrt(1.0 / 16), size=(16, 1))
    p["d0.b"] = np.zeros(16)
    p["d1.b"] = np.zeros(1)
    return p


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


LN_EPS = 1e-5


def head_forward(params: Params, features: np.ndarray, clicks: np.ndarray,
                 in_box: np.ndarray, prev_mask: np.ndarray):
    """Per-point mask probabilities for one prompt round.

    Decoder input per point: [bottleneck feature, mean bottleneck feature of
    the clicked points, in-box flag, previous-round mask].
    """
    clicks = np.asarray(clicks, dtype=np.int64)
    if clicks.size == 0:
        raise ValueError("empty click set")
    h = np.asarray(features, dtype=np.float64)
    stages = []
    for i in range(2):
        a = h @ params[f"n{i}.W"] + params[f"n{i}.b"]
        mu = a.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(a.var(axis=1, keepdims=True) + LN_EPS)
        xhat = (a - mu) * inv
        y = params[f"n{i}.gamma"] * xhat + params[f"n{i}.beta"]
        out = _gelu(y)
        stages.append({"in": h, "xhat": xhat, "inv": inv, "y": y})
        h = out
    f = h
    ftilde = f[clicks].mean(axis=0)
    n = f.shape[0]
    z = np.concatenate([f, np.tile(ftilde, (n, 1)),
                        np.asarray(in_box, dtype=np.float64)[:, None],
                        np.asarray(prev_mask, dtype=np.float64)[:, None]], axis=1)
    a1 = z @ params["d0.W"] + params["d0.b"]
    h1 = np.maximum(a1, 0.0)
    logit = (h1 @ params["d1.W"] + params["d1.b"]).ravel()
    prob = 1.0 / (1.0 + np.exp(-logit))
    cache = {"stages": stages, "f": f, "ftilde": ftilde, "clicks": clicks,
             "z": z, "a1": a1, "h1": h1, "prob": prob, "params": params}
    return prob, cache


def head_backward(cache, dprob: np.ndarray) -> Params:
    """Analytic gradients through decoder, click pooling and bottleneck."""
    params = cache["params"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    p = cache["prob"]
    dlogit = (dprob * p * (1 - p))[:, None]
    grads["d1.W"] = cache["h1"].T @ dlogit
    grads["d1.b"] = dlogit.sum(axis=0)
    dh1 = dlogit @ params["d1.W"].T
    da1 = dh1 * (cache["a1"] > 0)
    grads["d0.W"] = cache["z"].T @ da1
    grads["d0.b"] = da1.sum(axis=0)
    dz = da1 @ params["d0.W"].T
    dp_feat = dz.shape[1] - 2
    dpn = dp_feat // 2
    df = dz[:, :dpn].copy()
    dftilde = dz[:, dpn:2 * dpn].sum(axis=0)
    df[cache["clicks"]] += dftilde / cache["clicks"].size
    dh = df
    for i in (1, 0):
        st = cache["stages"][i]
        dy = dh * _gelu_grad(st["y"])
        grads[f"n{i}.gamma"] = (dy * st["xhat"]).sum(axis=0)
        grads[f"n{i}.beta"] = dy.sum(axis=0)
        dxhat = dy * params[f"n{i}.gamma"]
        da = st["inv"] * (dxhat - dxhat.mean(axis=1, keepdims=True)
                          - st["xhat"] * (dxhat * st["xhat"]).mean(axis=1, keepdims=True))
        grads[f"n{i}.W"] = st["in"].T @ da
        grads[f"n{i}.b"] = da.sum(axis=0)
        dh = da @ params[f"n{i}.W"].T
    return grads


def focal_loss(prob: np.ndarray, target: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.5, with_grad: bool = False):
    """Binary focal loss averaged over points; gradient is w.r.t. ``prob``."""
    p = np.asarray(prob, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    pt = np.clip(np.where(y > 0.5, p, 1.0 - p), 1e-12, 1.0)
    at = np.where(y > 0.5, alpha, 1.0 - alpha)
    loss = float((-at * (1 - pt) ** gamma * np.log(pt)).mean())
    if not with_grad:
        return loss
    dpt = -at * ((1 - pt) ** gamma / pt - gamma * (1 - pt) ** (gamma - 1) * np.log(pt))
    dp = dpt * np.where(y > 0.5, 1.0, -1.0) / p.size
    return loss, dp


def mask_refinement_loss(student_prob, teacher_mask, cfg: IttaConfig,
                         with_grad: bool = False):
    """Focal loss between the 1-click student mask and the thresholded
    multi-click teacher mask, scaled by lambda_p."""
    out = focal_loss(student_prob, teacher_mask, cfg.focal_gamma,
                     cfg.focal_alpha, with_grad=with_grad)
    if with_grad:
        loss, dp = out
        return cfg.lambda_p * loss, cfg.lambda_p * dp
    return cfg.lambda_p * out


def rollout_mask(params: Params, features: np.ndarray, points: np.ndarray,
                 clicks, box):
    """Replay click rounds, feeding each round's mask into the next.

    Returns the final round's probabilities and cache; earlier rounds are
    treated as constants, so gradients flow through the last round only.
    """
    clicks = np.asarray(clicks, dtype=np.int64)
    in_box = points_in_box(points, box)
    prev = np.zeros(points.shape[0])
    prob, cache = None, None
    for j in range(1, clicks.size + 1):
        prob, cache = head_forward(params, features, clicks[:j], in_box, prev)
        prev = prob
    return prob, cache


def _instance_pool(world, spec, class_set, cfg: IttaConfig, n_frames: int):
    from .synth import render_frame
    pool = []
    for t in range(min(n_frames, spec.length)):
        frame = render_frame(world, spec, t)
        for c in class_set.interest:
            ids, labels = extract_instances(frame, int(c), cfg.dbscan_eps,
                                            cfg.dbscan_min_pts)
            for lab in np.unique(labels[labels >= 0]):
                pool.append((frame, ids[labels == lab], int(c)))
    return pool


def warmup_head(head: Params, spec, class_set, iterations: int = 2000,
                seed: int = 0, cfg: IttaConfig = IttaConfig(), lr: float = None,
                frame_pool: int = 20) -> Params:
    """Train the bottleneck and decoder on source-domain instances: grow
    clicks round by round against the current head, supervise the final-round
    mask with the instance's ground-truth mask via focal loss.

    The ground-truth mask stands in for a foundation-model pseudo-mask; the
    decoder trains together with the bottleneck since it starts from scratch.
    """
    from dataclasses import replace as _replace
    from .synth import ShiftSchedule, generate_world

    if iterations == 0:
        return head
    source = _replace(spec, shift=ShiftSchedule.identity())
    world = generate_world(source.world)
    pool = _instance_pool(world, source, class_set, cfg, frame_pool)
    if not pool:
        raise ValueError("no source instances to warm up on")
    rng = np.random.default_rng([seed, 6])
    opt = AdamW(lr=lr if lr is not None else cfg.head_lr)
    for it in range(iterations):
        frame, inst, c = pool[int(rng.integers(len(pool)))]
        lo = min(cfg.warmup_rho_min, inst.size)
        hi = min(cfg.rho_max, inst.size)
        rho = int(rng.integers(lo, hi + 1))
        prompt = simulate_prompts(frame, inst, rho, rng, c, head_params=head,
                                  mask_threshold=cfg.mask_threshold)
        target = np.zeros(frame.n_points)
        target[inst] = 1.0
        prob, cache = rollout_mask(head, frame.feat2d, frame.points,
                                   prompt.point_indices, prompt.box)
        loss, dp = focal_loss(prob, target, cfg.focal_gamma, cfg.focal_alpha,
                              with_grad=True)
        if not np.isfinite(loss):
            raise FloatingPointError(f"warm-up diverged at iteration {it}")
        opt.step(head, head_backward(cache, dp))
    return head


def mask_iou(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    pred_mask = np.asarray(pred_mask, dtype=bool)
    true_mask = np.asarray(true_mask, dtype=bool)
    union = (pred_mask | true_mask).sum()
    return float((pred_mask & true_mask).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# centroids


@dataclass
class Centroid:
    mu: np.ndarray       # unit-norm mean feature
    sigma: np.ndarray    # sample covariance (stored; nothing consumes it yet)
    n_features: int
    converged: bool = True


def generate_centroids(cls_w: np.ndarray, cls_b: np.ndarray, classes,
                       n_batches: int = 5, batch: int = 1024,
                       score_threshold: float = 0.8, lr: float = 0.1,
                       max_steps: int = 10000, seed: int = 0) -> dict:
    """Feature inversion against a frozen linear classifier: gradient ascent
    on each class's softmax score until every sample clears the threshold."""
    rng = np.random.default_rng([seed, 5])
    out = {}
    d = cls_w.shape[0]
    for c in classes:
        x = rng.normal(size=(n_batches * batch, d))
        converged = False
        # Each feature ascends independently and freezes once it clears the
        # threshold, so later steps only touch the remaining stragglers.
        active = np.arange(x.shape[0])
        for _ in range(max_steps):
            xa = x[active]
            probs = softmax(xa @ cls_w + cls_b)
            clear = probs[:, c] > score_threshold
            if clear.all():
                converged = True
                break
            keep = ~clear
            probs = probs[keep]
            coef = probs[:, c][:, None] * (np.eye(cls_w.shape[1])[c] - probs)
            active = active[keep]
            x[active] += lr * coef @ cls_w.T
        mu = x.mean(axis=0)
        mu = mu / max(np.linalg.norm(mu), 1e-12)
        out[int(c)] = Centroid(mu=mu, sigma=np.cov(x, rowvar=False),
                               n_features=x.shape[0], converged=converged)
    return out


# ---------------------------------------------------------------------------
# clustering objective


def clustering_objective(hidden: np.ndarray, mask_idx: np.ndarray,
                         pred_labels: np.ndarray, class_id: int,
                         mu: np.ndarray, cfg: IttaConfig,
                         mode: str = "softmin", with_grad: bool = False):
    """Anchor-centroid alignment plus inlier compaction / outlier repulsion
    over cosine similarities of the student's hidden features.

    Default mode thresholds the cosine itself and uses intent-consistent
    signs; ``paper_literal`` thresholds exp(cos) and keeps the printed signs.
    Returns the loss and (optionally) its gradient w.r.t. the raw hidden
    features.
    """
    h = np.asarray(hidden, dtype=np.float64)
    mask_idx = np.asarray(mask_idx, dtype=np.int64)
    if mask_idx.size == 0:
        raise ValueError("empty prompt mask")
    norms = np.maximum(np.linalg.norm(h, axis=1), 1e-12)
    f = h / norms[:, None]
    a = f[mask_idx].mean(axis=0)
    na = max(np.linalg.norm(a), 1e-12)
    ahat = a / na
    mu = mu / max(np.linalg.norm(mu), 1e-12)

    same = np.flatnonzero(pred_labels == class_id)
    cos = f[same] @ ahat
    s = np.exp(cos) if mode == "paper_literal" else cos
    m_in = same[s >= cfg.tau_in]
    m_out = same[s < cfg.tau_out]
    cos_mu = float(ahat @ mu)

    # coeff[j] = dL/d cos_j for every j in `same`; c_a = dL/d cos(a, mu)
    coeff = np.zeros(same.size)
    sel_in = np.isin(same, m_in)
    sel_out = np.isin(same, m_out)
    if mode == "paper_literal":
        loss = cfg.lambda_ac * cos_mu
        if m_in.size:
            loss += cfg.lambda_cls * float(s[sel_in].mean())
            coeff[sel_in] += cfg.lambda_cls * s[sel_in] / m_in.size
        if m_out.size:
            loss -= cfg.lambda_cls * float(s[sel_out].mean())
            coeff[sel_out] -= cfg.lambda_cls * s[sel_out] / m_out.size
        c_a = cfg.lambda_ac
    else:
        loss = cfg.lambda_ac * (1.0 - cos_mu)
        if m_in.size:
            loss -= cfg.lambda_cls * float(cos[sel_in].mean())
            coeff[sel_in] -= cfg.lambda_cls / m_in.size
        if m_out.size:
            loss += cfg.lambda_cls * float(cos[sel_out].mean())
            coeff[sel_out] += cfg.lambda_cls / m_out.size
        c_a = -cfg.lambda_ac
    if not with_grad:
        return float(loss)

    df = np.zeros_like(f)
    # direct dependence of cos_j on f_j
    df[same] += coeff[:, None] * ahat
    # dependence through the anchor: cos_j = a.f_j / ||a||, cos_mu likewise
    da = (f[same] - cos[:, None] * ahat).T @ coeff / na
    da += c_a * (mu - cos_mu * ahat) / na
    df[mask_idx] += da / mask_idx.size
    # through row normalization f = h / ||h||
    dh = (df - (df * f).sum(axis=1, keepdims=True) * f) / norms[:, None]
    return float(loss), dh


# ---------------------------------------------------------------------------
# momentum gradient


@dataclass
class MGRecord:
    """Single-slot memory of one prompt-time clustering gradient."""

    vectors: dict    # key -> flattened gradient
    cosines: dict    # key -> stored relative angle cosine
    t: int


def record_momentum_grad(g_mg: dict, g: dict, t: int) -> MGRecord:
    vectors, cosines = {}, {}
    for k, v in g_mg.items():
        vec = np.asarray(v, dtype=np.float64).ravel().copy()
        other = np.asarray(g[k], dtype=np.float64).ravel()
        nv, no = np.linalg.norm(vec), np.linalg.norm(other)
        cosines[k] = float(vec @ other / (nv * no)) if nv > 0 and no > 0 else 0.0
        vectors[k] = vec
    return MGRecord(vectors=vectors, cosines=cosines, t=t)


def reuse_momentum_grad(record: MGRecord, g_k: dict, k: int,
                        gamma_mg: float = 0.9, dt_max: int = 10,
                        mode: str = "softmin") -> dict:
    """Reconstruct the recorded gradient at iteration k: same stored angle to
    the current gradient, norm decayed by gamma_mg^(k - t), zero beyond
    dt_max. Shapes follow ``g_k``."""
    out = {key: np.zeros_like(np.asarray(v, dtype=np.float64)) for key, v in g_k.items()}
    dt = k - record.t
    if dt <= 0 or dt > dt_max:
        return out
    lam = gamma_mg ** dt
    for key, gk in g_k.items():
        if key not in record.vectors:
            continue
        g = np.asarray(gk, dtype=np.float64).ravel()
        ng = np.linalg.norm(g)
        if ng == 0:
            continue
        gmg = record.vectors[key]
        nmg = np.linalg.norm(gmg)
        if nmg == 0:
            continue
        ghat = g / ng
        cos_d = record.cosines[key]
        base = g if mode == "paper_literal" else ghat
        u = gmg - (g @ gmg) / (ng * ng) * g
        nu = np.linalg.norm(u)
        if nu < 1e-15 * nmg:
            rec = lam * nmg * np.sign(cos_d) * ghat
        else:
            sin_d = np.sqrt(max(0.0, 1.0 - cos_d * cos_d))
            rec = lam * nmg * (cos_d * base + sin_d * (u / nu))
        out[key] = rec.reshape(np.asarray(gk).shape)
    return out
