"""Online evaluate-then-update adaptation loop, overall objective, baseline
methods and segmentation metrics."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import itta as itta_mod
from .geometry import PredictionFrame, WindowConfig
from .models import AdamW, backward, clone_params, ema_update, forward
from .reliability import (accumulate_point_entropy, cross_modal_voxel_weights,
                          entropy, fuse_predictions, merge_windows,
                          nearest_rank_quantile, window_priors,
                          xm_consistency_loss)
from .voxels import aggregate_window, voxelize

BASE_METHODS = ("source_only", "oracle", "tent_like", "pslabel", "latte", "latte_pp")
VOXEL_METHODS = ("latte", "latte_pp")


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "latte"
    batch_size: int = 2
    lambda_xm: float = 0.3
    lambda_s: float = 0.99
    lr: float = 1e-2
    update_scope: str = "norm_only"
    windows: WindowConfig = WindowConfig()
    mode: str = "softmin"  # or "paper_literal"
    pslabel_threshold: float = 0.9
    itta: itta_mod.IttaConfig = None

    def __post_init__(self):
        if self.base_method not in BASE_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.with_itta and self.itta is None:
            object.__setattr__(self, "itta", itta_mod.IttaConfig())
        if not 0 <= self.lambda_s < 1:
            raise ValueError("lambda_s must be in [0, 1)")
        if self.lambda_xm < 0:
            raise ValueError("lambda_xm must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    @property
    def base_method(self) -> str:
        return self.method.split("+")[0]

    @property
    def with_itta(self) -> bool:
        return self.method.endswith("+itta")

    def effective_windows(self) -> WindowConfig:
        if self.base_method == "latte":
            # The single-window path always uses the smallest configured size.
            return WindowConfig(sizes=self.windows.sizes[:1],
                                voxel_size=self.windows.voxel_size,
                                alpha=self.windows.alpha)
        return self.windows


@dataclass
class RunLog:
    method: str
    seed: int
    config_hash: str = ""
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)  # ("metrics"|"update", frame/batch id)

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.records if r[key] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_class_iou(self) -> list:
        if not self.records:
            return []
        k = len(self.records[0]["iou"])
        cols = []
        for c in range(k):
            vals = [r["iou"][c] for r in self.records if r["iou"][c] is not None]
            cols.append(float(np.mean(vals)) if vals else None)
        return cols

    @property
    def n_prompts(self) -> int:
        return int(sum(r["n_prompts"] for r in self.records))


def evaluate_miou(pred: np.ndarray, gt: np.ndarray, k: int):
    """Mean IoU; classes absent from both prediction and truth are excluded."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction/label length mismatch")
    conf = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1.0), np.nan)
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return miou, iou


def _gather_teacher_rows(cloud, teacher_preds, modality):
    rows = np.zeros((cloud.points.shape[0], next(iter(teacher_preds.values())).probs2d.shape[1]))
    for j in np.unique(cloud.origin_frame):
        sel = cloud.origin_frame == j
        rows[sel] = teacher_preds[j].probs(modality)[cloud.origin_index[sel]]
    return rows


def _grouped_mean(rows, inverse, n_groups, mask):
    k = rows.shape[1]
    acc = np.zeros((n_groups, k))
    cnt = np.zeros(n_groups)
    if mask.any():
        np.add.at(acc, inverse[mask], rows[mask])
        np.add.at(cnt, inverse[mask], 1.0)
    with np.errstate(invalid="ignore"):
        mean = np.where(cnt[:, None] > 0, acc / np.maximum(cnt, 1.0)[:, None], np.nan)
    return mean, cnt


class _FrameVoxelStats:
    """Vectorized per-query-frame ST voxel statistics over the shared grid."""

    def __init__(self, query_t, cloud, grid, student_pred, teacher_preds, windows):
        self.query_t = query_t
        self.cloud = cloud
        self.grid = grid
        nv = grid.n_voxels
        dt = np.abs(cloud.origin_frame - query_t)
        is_q = cloud.origin_frame == query_t
        self.ref_mean = {}   # m -> (D, Nv, K)
        self.ref_valid = {}  # m -> (D, Nv)
        self.ref_entropy = {}
        self.q_mean = {}
        self.q_rows = cloud.origin_index[is_q]
        self.q_vox = grid.inverse[is_q]
        self.q_cnt = np.zeros(nv)
        np.add.at(self.q_cnt, self.q_vox, 1.0)
        for m in ("2d", "3d"):
            t_rows = _gather_teacher_rows(cloud, teacher_preds, m)
            means, valids, ents = [], [], []
            for w in windows.sizes:
                mean, cnt = _grouped_mean(t_rows, grid.inverse, nv, dt <= w)
                means.append(mean)
                valids.append(cnt > 0)
                ents.append(np.where(cnt > 0, entropy(np.nan_to_num(mean, nan=1.0)), np.nan))
            self.ref_mean[m] = np.stack(means)
            self.ref_valid[m] = np.stack(valids)
            self.ref_entropy[m] = np.stack(ents)
            s_rows = student_pred.probs(m)[self.q_rows]
            acc = np.zeros((nv, s_rows.shape[1]))
            if len(self.q_rows):
                np.add.at(acc, self.q_vox, s_rows)
            with np.errstate(invalid="ignore"):
                self.q_mean[m] = np.where(self.q_cnt[:, None] > 0,
                                          acc / np.maximum(self.q_cnt, 1.0)[:, None], np.nan)


def _merge_frame(stats: _FrameVoxelStats, quantiles, windows, mode):
    """Quantile keep-flags and the per-modality multi-window merge."""
    tau_b = window_priors(windows.sizes)
    merged = {}
    for m in ("2d", "3d"):
        e = stats.ref_entropy[m]
        valid = stats.ref_valid[m]
        keep = valid & (np.nan_to_num(e, nan=np.inf) <= quantiles[m])
        e_m, pbar, tau, h = merge_windows(np.nan_to_num(e, nan=0.0),
                                          np.nan_to_num(stats.ref_mean[m], nan=0.0),
                                          keep, tau_b, mode=mode, valid=valid)
        merged[m] = {"E": e_m, "pbar": pbar, "tau": tau, "h": h}
    return merged


def _pair_weights(e2, e3, h2, h3, mode):
    """Cross-modal weights; a term whose reference side is filtered loses all
    weight and the surviving term gets weight 1."""
    both = h2 & h3
    w2 = np.full(e2.shape, np.nan)
    w3 = np.full(e3.shape, np.nan)
    if both.any():
        a, b = cross_modal_voxel_weights(np.where(both, e2, 0.0),
                                         np.where(both, e3, 0.0), mode=mode)
        w2[both] = a[both]
        w3[both] = b[both]
    w2[h2 & ~h3] = 1.0
    w3[h3 & ~h2] = 1.0
    return w2, w3


def run_adaptation(stream, models: dict, config: AdaptConfig, prompt_source=None,
                   itta_state=None, on_frame=None, config_hash: str = "",
                   seed: int = 0, abort_flag=None) -> RunLog:
    """One pass over the stream: evaluate each batch with the current models,
    then update them (the latte/latte_pp objective, a baseline step, or nothing).

    ``prompt_source(frame, head_params)`` may return a Prompt for that frame;
    ``on_frame(frame, record, extras)`` is invoked after each frame's metrics.
    """
    cfg = config
    base = cfg.base_method
    windows = cfg.effective_windows()
    use_voxels = base in VOXEL_METHODS
    updating = base != "source_only"
    k_classes = models["2d"].student["cls.b"].shape[0]
    if cfg.with_itta and itta_state is None:
        raise ValueError("ITTA methods need a warmed itta_state")

    log = RunLog(method=cfg.method, seed=seed, config_hash=config_hash)
    opts = {m: AdamW(lr=cfg.lr) for m in ("2d", "3d")}
    history = deque(maxlen=windows.max_size)  # (frame, teacher PredictionFrame)
    iteration = 0

    batch = []
    stream_iter = iter(stream)
    done = False
    while not done:
        try:
            batch.append(next(stream_iter))
        except StopIteration:
            done = True
        if abort_flag is not None and abort_flag.is_set():
            break
        if (len(batch) < cfg.batch_size and not done) or not batch:
            continue
        iteration += 1
        _process_batch(batch, history, models, opts, cfg, windows, base,
                       use_voxels, updating, k_classes, prompt_source,
                       itta_state, on_frame, log, iteration)
        batch = []
    return log


def _process_batch(batch, history, models, opts, cfg, windows, base, use_voxels,
                   updating, k_classes, prompt_source, itta_state, on_frame,
                   log, iteration):
    t_start = time.perf_counter()
    student_preds, teacher_preds, caches = {}, {}, {}
    for f in batch:
        probs, srcs = {}, {}
        for m in ("2d", "3d"):
            x = f.feat2d if m == "2d" else f.feat3d
            ps, cache = forward(models[m].student, x)
            pt, _ = forward(models[m].teacher, x)
            probs[m] = (ps, pt)
            caches[(f.t, m)] = cache
        student_preds[f.t] = PredictionFrame(f.t, probs["2d"][0], probs["3d"][0], "student")
        teacher_preds[f.t] = PredictionFrame(f.t, probs["2d"][1], probs["3d"][1], "teacher")

    avail = [fr for fr, _ in history] + list(batch)
    t_preds = {fr.t: tp for fr, tp in history}
    t_preds.update(teacher_preds)
    slot = {f.t: i for i, f in enumerate(batch)}
    n_pts = {f.t: f.n_points for f in batch}

    # --- voxel statistics and reliabilities -------------------------------
    loss_xm = 0.0
    dprobs = {(f.t, m): np.zeros((f.n_points, k_classes))
              for f in batch for m in ("2d", "3d")}
    contrib_ids = {m: [] for m in ("2d", "3d")}
    contrib_vals = {m: [] for m in ("2d", "3d")}
    offsets = np.cumsum([0] + [f.n_points for f in batch])

    if use_voxels:
        stats_list = []
        pool = {"2d": [], "3d": []}
        for f in batch:
            cloud = aggregate_window(avail, f.t, windows.max_size)
            grid = voxelize(cloud, windows.voxel_size)
            st = _FrameVoxelStats(f.t, cloud, grid, student_preds[f.t], t_preds, windows)
            stats_list.append(st)
            for m in ("2d", "3d"):
                e = st.ref_entropy[m]
                pool[m].append(e[st.ref_valid[m]])
        quantiles = {m: nearest_rank_quantile(np.concatenate(pool[m]), windows.alpha)
                     for m in ("2d", "3d")}

        for st in stats_list:
            merged = _merge_frame(st, quantiles, windows, cfg.mode)
            e2, e3 = merged["2d"]["E"], merged["3d"]["E"]
            h2, h3 = merged["2d"]["h"], merged["3d"]["h"]
            w2, w3 = _pair_weights(np.nan_to_num(e2, nan=0.0),
                                   np.nan_to_num(e3, nan=0.0), h2, h3, cfg.mode)
            r2 = np.where(h2[:, None], merged["2d"]["pbar"], np.nan)
            r3 = np.where(h3[:, None], merged["3d"]["pbar"], np.nan)
            losses, dq2, dq3 = xm_consistency_loss(st.q_mean["2d"], st.q_mean["3d"],
                                                   r2, r3, w2, w3, with_grads=True)
            loss_xm += float(losses.sum())
            if updating:
                scale = cfg.lambda_xm / cfg.batch_size
                safe_cnt = np.maximum(st.q_cnt, 1.0)
                for m, dq in (("2d", dq2), ("3d", dq3)):
                    per_row = dq[st.q_vox] / safe_cnt[st.q_vox][:, None] * scale
                    np.add.at(dprobs[(st.query_t, m)], st.q_rows, per_row)
            # propagate merged entropy to batch reference points of kept voxels
            in_batch = np.isin(st.cloud.origin_frame, list(slot))
            vox = st.grid.inverse[in_batch]
            of = st.cloud.origin_frame[in_batch]
            oi = st.cloud.origin_index[in_batch]
            base_off = np.zeros(of.shape[0], dtype=np.int64)
            for t_, s_ in slot.items():
                base_off[of == t_] = offsets[s_]
            gids = base_off + oi
            for m, em, hm in (("2d", e2, h2), ("3d", e3, h3)):
                kept = hm[vox]
                contrib_ids[m].append(gids[kept])
                contrib_vals[m].append(em[vox][kept])

    # --- point reliabilities and fused predictions ------------------------
    total_pts = offsets[-1]
    fallback = {m: np.concatenate([t_preds[f.t].probs(m) for f in batch]) for m in ("2d", "3d")}
    e_hat = {}
    for m in ("2d", "3d"):
        ids = np.concatenate(contrib_ids[m]) if contrib_ids[m] else np.empty(0, dtype=np.int64)
        vals = np.concatenate(contrib_vals[m]) if contrib_vals[m] else np.empty(0)
        e_hat[m] = accumulate_point_entropy(total_pts, ids, vals, fallback[m]).entropy
    fused, labels, _ = fuse_predictions(fallback["2d"], fallback["3d"],
                                        e_hat["2d"], e_hat["3d"], mode=cfg.mode)

    y_xm = {f.t: labels[offsets[slot[f.t]]:offsets[slot[f.t] + 1]].copy() for f in batch}
    fused_by_t = {f.t: fused[offsets[slot[f.t]]:offsets[slot[f.t] + 1]] for f in batch}

    # --- prompts (consumed at batch boundaries, before metrics) -----------
    prompts, masks = {}, {}
    if cfg.with_itta and prompt_source is not None:
        for f in batch:
            head = itta_state.head_teacher if itta_state else None
            prompt = prompt_source(f, head)
            if prompt is None:
                continue
            mask = teacher_prompt_mask(itta_state, f, prompt, cfg.itta)
            prompts[f.t] = prompt
            masks[f.t] = mask
            y_xm[f.t][mask] = prompt.class_id

    # --- metrics (one-pass protocol: always before this batch's update) ---
    for f in batch:
        miou_xm, iou = evaluate_miou(y_xm[f.t], f.gt, k_classes)
        miou2, _ = evaluate_miou(np.argmax(t_preds[f.t].probs2d, axis=1), f.gt, k_classes)
        miou3, _ = evaluate_miou(np.argmax(t_preds[f.t].probs3d, axis=1), f.gt, k_classes)
        record = {
            "t": int(f.t), "miou_xm": miou_xm, "miou_2d": miou2, "miou_3d": miou3,
            "iou": [None if not np.isfinite(v) else float(v) for v in iou],
            "loss_total": 0.0, "loss_xm": cfg.lambda_xm / cfg.batch_size * loss_xm,
            "n_prompts": int(f.t in prompts), "wall_ms": 0.0,
        }
        log.records.append(record)
        log.events.append(("metrics", int(f.t)))
        if on_frame is not None:
            s = slot[f.t]
            on_frame(f, record, {
                "pred_xm": y_xm[f.t], "fused": fused_by_t[f.t],
                "pred_2d": np.argmax(t_preds[f.t].probs2d, axis=1),
                "pred_3d": np.argmax(t_preds[f.t].probs3d, axis=1),
                "ent_2d": e_hat["2d"][offsets[s]:offsets[s + 1]],
                "ent_3d": e_hat["3d"][offsets[s]:offsets[s + 1]],
            })

    # --- losses and update -------------------------------------------------
    loss_total = cfg.lambda_xm / cfg.batch_size * loss_xm if use_voxels else 0.0
    if updating:
        dlogits = {key: np.zeros_like(v) for key, v in dprobs.items()}
        for f in batch:
            for m in ("2d", "3d"):
                p = student_preds[f.t].probs(m)
                n = f.n_points
                if base == "oracle":
                    onehot = np.eye(k_classes)[f.gt]
                    loss_total += float(-np.log(np.clip(p[np.arange(n), f.gt], 1e-12, None)).mean())
                    dlogits[(f.t, m)] += (p - onehot) / n
                elif base in VOXEL_METHODS:
                    y = y_xm[f.t]
                    onehot = np.eye(k_classes)[y]
                    loss_total += float(-np.log(np.clip(p[np.arange(n), y], 1e-12, None)).mean())
                    dlogits[(f.t, m)] += (p - onehot) / n
                elif base == "tent_like":
                    loss_total += float(entropy(p).mean())
                    logs = np.log(np.clip(p, 1e-12, None))
                    dprobs[(f.t, m)] += -(logs + 1.0) / n
                elif base == "pslabel":
                    tp = t_preds[f.t].probs(m)
                    conf = tp.max(axis=1)
                    keep = conf >= cfg.pslabel_threshold
                    if keep.any():
                        y = np.argmax(tp, axis=1)
                        rows = np.flatnonzero(keep)
                        loss_total += float(-np.log(np.clip(p[rows, y[rows]], 1e-12, None)).mean())
                        onehot = np.eye(k_classes)[y[rows]]
                        dlogits[(f.t, m)][rows] += (p[rows] - onehot) / rows.size

        grads = {}
        for m in ("2d", "3d"):
            g = None
            for f in batch:
                gb = backward(caches[(f.t, m)], dprobs=dprobs[(f.t, m)],
                              dlogits=dlogits[(f.t, m)], scope=cfg.update_scope)
                g = gb if g is None else {k: g[k] + gb[k] for k in g}
            grads[m] = g

        if cfg.with_itta and itta_state is not None:
            loss_total += _itta_gradients(itta_state, batch, prompts, masks, caches,
                                          student_preds, grads, cfg, iteration)

        for m in ("2d", "3d"):
            masked = _scope_grads(grads[m], cfg.update_scope)
            # Empty supervision (all-zero gradients) means no update at all:
            # weight decay must not drift parameters on its own.
            if any(np.any(v) for v in masked.values()):
                opts[m].step(models[m].student, masked)
                ema_update(models[m], cfg.lambda_s)
        log.events.append(("update", iteration))

    for f in batch:
        log.records[-len(batch) + slot[f.t]]["loss_total"] = float(loss_total)

    # history keeps the newest frames with the teacher predictions they had
    for f in batch:
        history.append((f, t_preds[f.t]))
    _ = time.perf_counter() - t_start  # timing is reported by the service layer


def _scope_grads(grads, scope):
    if scope == "all":
        return grads
    return {k: v for k, v in grads.items() if k.endswith(".gamma") or k.endswith(".beta")}


def teacher_prompt_mask(state, frame, prompt, icfg):
    """Teacher multi-round mask for a prompt; clicked points always count."""
    clicks = np.asarray(prompt.point_indices, dtype=np.int64)
    in_box = itta_mod.points_in_box(frame.points, prompt.box)
    prev = np.zeros(frame.n_points)
    prob = prev
    for j in range(1, clicks.size + 1):
        prob, _ = itta_mod.head_forward(state.head_teacher, frame.feat2d,
                                        clicks[:j], in_box, prev)
        prev = prob
    mask = prob >= icfg.mask_threshold
    mask[clicks] = True
    return mask


def _itta_gradients(state, batch, prompts, masks, caches, student_preds, grads,
                    cfg, iteration):
    """Prompt-time objectives (head refinement + feature clustering with
    momentum-gradient recording) or, promptless, momentum-gradient reuse."""
    icfg = cfg.itta
    extra_loss = 0.0
    if prompts:
        flat_mg = {}
        for f in batch:
            if f.t not in prompts:
                continue
            prompt, mask = prompts[f.t], masks[f.t]
            # student 1-click mask refined toward the teacher's multi-click mask
            first = np.asarray(prompt.point_indices[:1], dtype=np.int64)
            in_box = itta_mod.points_in_box(f.points, prompt.box)
            p_s, hcache = itta_mod.head_forward(state.head_student, f.feat2d,
                                                first, in_box, np.zeros(f.n_points))
            l_p, dp = itta_mod.mask_refinement_loss(p_s, mask.astype(float), icfg,
                                                    with_grad=True)
            extra_loss += l_p
            hgrads = itta_mod.head_backward(hcache, dp)
            state.head_opt.step(state.head_student, hgrads)
            for k in state.head_teacher:
                state.head_teacher[k] = (cfg.lambda_s * state.head_teacher[k]
                                         + (1 - cfg.lambda_s) * state.head_student[k])
            # clustering objective on both modalities' hidden features
            mask_idx = np.flatnonzero(mask)
            for m in ("2d", "3d"):
                cen = state.centroids.get((m, prompt.class_id))
                if cen is None or mask_idx.size == 0:
                    continue
                cache = caches[(f.t, m)]
                pred_labels = np.argmax(student_preds[f.t].probs(m), axis=1)
                l_mg, dh = itta_mod.clustering_objective(
                    cache["hidden"], mask_idx, pred_labels, prompt.class_id,
                    cen.mu, icfg, mode=cfg.mode, with_grad=True)
                extra_loss += l_mg
                g_mg = backward(cache, dhidden=dh, scope=cfg.update_scope)
                for k, v in _scope_grads(g_mg, cfg.update_scope).items():
                    flat_mg[f"{m}.{k}"] = flat_mg.get(f"{m}.{k}", 0) + v
        if flat_mg:
            flat_base = {f"{m}.{k}": v for m in ("2d", "3d")
                         for k, v in _scope_grads(grads[m], cfg.update_scope).items()}
            state.record = itta_mod.record_momentum_grad(flat_mg, flat_base, iteration)
            for key, v in flat_mg.items():
                m, k = key.split(".", 1)
                grads[m][k] = grads[m][k] + v
    elif state.record is not None:
        flat_base = {f"{m}.{k}": v for m in ("2d", "3d")
                     for k, v in _scope_grads(grads[m], cfg.update_scope).items()}
        reuse = itta_mod.reuse_momentum_grad(state.record, flat_base, iteration,
                                             gamma_mg=icfg.gamma_mg,
                                             dt_max=icfg.dt_max, mode=cfg.mode)
        for key, v in reuse.items():
            m, k = key.split(".", 1)
            grads[m][k] = grads[m][k] + v
    return extra_loss


@dataclass
class IttaState:
    """Mutable ITTA runtime state owned by the adaptation loop."""

    head_student: dict
    head_teacher: dict
    centroids: dict            # (modality, class_id) -> Centroid
    head_opt: AdamW
    record: itta_mod.MGRecord = None

    @staticmethod
    def fresh(head_params, centroids, lr: float = 3e-3) -> "IttaState":
        return IttaState(head_student=clone_params(head_params),
                         head_teacher=clone_params(head_params),
                         centroids=centroids, head_opt=AdamW(lr=lr))


def build_itta_state(models: dict, head_params: dict, class_set,
                     cfg: itta_mod.IttaConfig, seed: int = 0) -> IttaState:
    """Invert each modality's frozen classifier into per-class feature
    centroids for the classes of interest, then wrap the prompt head."""
    centroids = {}
    for m in ("2d", "3d"):
        per = itta_mod.generate_centroids(models[m].teacher["cls.W"],
                                          models[m].teacher["cls.b"],
                                          class_set.interest, seed=seed)
        for c, cen in per.items():
            centroids[(m, int(c))] = cen
    return IttaState.fresh(head_params, centroids, lr=cfg.head_lr)
