"""Voxel reliability: ST entropy, quantile filtering, window merging,
cross-modal attending and point-level fusion.

Two weighting conventions are supported everywhere an exponential weight
appears. The default ``softmin`` mode uses exp(-E) so lower entropy earns
more weight; ``paper_literal`` evaluates the published formulas exactly as
printed, with exp(+E) and the tau normalization missing its prior term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12

MODES = ("softmin", "paper_literal")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0*log(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    logs = np.log(np.clip(p, PROB_FLOOR, None))
    return -(p * logs).sum(axis=-1)


def st_entropy(refs: np.ndarray):
    """Entropy of the average reference distribution of one voxel."""
    refs = np.asarray(refs, dtype=np.float64)
    if refs.ndim != 2 or refs.shape[0] == 0:
        raise ValueError("need at least one reference row")
    pbar = refs.mean(axis=0)
    return float(entropy(pbar)), pbar


def nearest_rank_quantile(values: np.ndarray, alpha: float) -> float:
    """Nearest-rank quantile: element at rank ceil(alpha * n) of the
    ascending sort."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty entropy population")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    rank = int(np.ceil(alpha * v.size))
    return float(np.sort(v)[rank - 1])


def quantile_filter(entropies: np.ndarray, alpha: float) -> np.ndarray:
    """Keep flags: E <= nearest-rank alpha-quantile of the population."""
    e = np.asarray(entropies, dtype=np.float64)
    return e <= nearest_rank_quantile(e, alpha)


def window_priors(sizes) -> np.ndarray:
    """Initial per-window weights log2(2 + w), favoring longer windows."""
    return np.log2(2.0 + np.asarray(sizes, dtype=np.float64))


def merge_windows(entropies, mean_refs, keep, tau_b, mode: str = "softmin", valid=None):
    """Entropy-weighted merge over window sizes (axis 0).

    Inputs broadcast over trailing voxel axes; ``valid`` marks windows that
    actually held references. Returns (E, pbar, tau, h). Voxels with no kept
    window get h = 0 and NaN merged values; callers must treat them as
    filtered.
    """
    _check_mode(mode)
    e = np.asarray(entropies, dtype=np.float64)
    p = np.asarray(mean_refs, dtype=np.float64)
    h = np.asarray(keep, dtype=bool)
    tau_b = np.asarray(tau_b, dtype=np.float64)
    if valid is None:
        valid = np.ones_like(h, dtype=bool)
    active = h & np.asarray(valid, dtype=bool)
    tb = tau_b.reshape((-1,) + (1,) * (e.ndim - 1))
    e_safe = np.where(active, e, 0.0)
    if mode == "softmin":
        num = np.where(active, tb * np.exp(-e_safe), 0.0)
        den = num.sum(axis=0)
    else:
        num = np.where(active, tb * np.exp(e_safe), 0.0)
        den = np.where(active, np.exp(e_safe), 0.0).sum(axis=0)
    h_merged = active.any(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = num / den
    tau = np.where(h_merged, tau, np.nan)
    e_merged = np.where(h_merged, np.nansum(np.where(active, tau * e, 0.0), axis=0), np.nan)
    tau_p = tau[..., None]
    pbar = np.where(h_merged[..., None],
                    np.nansum(np.where(active[..., None], tau_p * p, 0.0), axis=0), np.nan)
    return e_merged, pbar, tau, h_merged


def cross_modal_voxel_weights(e2d, e3d, mode: str = "softmin"):
    """Per-voxel attending weights over the two modalities; sums to 1."""
    _check_mode(mode)
    e2d = np.asarray(e2d, dtype=np.float64)
    e3d = np.asarray(e3d, dtype=np.float64)
    sign = -1.0 if mode == "softmin" else 1.0
    # Subtract the max for stability; the ratio is shift-invariant.
    a, b = sign * e2d, sign * e3d
    m = np.maximum(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    w2 = ea / (ea + eb)
    return w2, 1.0 - w2


def kl_div(p, q) -> np.ndarray:
    """KL(p || q) along the last axis, inputs clamped to >= 1e-12 before log."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, None)
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_FLOOR, None)
    return (p * (np.log(p) - np.log(q))).sum(axis=-1)


def kl_grad_wrt_p(p, q) -> np.ndarray:
    """d KL(p || q) / d p (q treated as constant)."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, None)
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_FLOOR, None)
    return np.log(p) - np.log(q) + 1.0


def xm_consistency_loss(q2_mean, q3_mean, r2_mean, r3_mean, w2, w3,
                        with_grads: bool = False):
    """Weighted cross-modal consistency: w2 * KL(q3 || r2) + w3 * KL(q2 || r3).

    Mean rows may be stacked (Nv, K). A term whose query or reference side is
    missing (any NaN) is dropped. Reference rows and weights are constants;
    gradients flow to the query means only.
    """
    q2 = np.atleast_2d(np.asarray(q2_mean, dtype=np.float64))
    q3 = np.atleast_2d(np.asarray(q3_mean, dtype=np.float64))
    r2 = np.atleast_2d(np.asarray(r2_mean, dtype=np.float64))
    r3 = np.atleast_2d(np.asarray(r3_mean, dtype=np.float64))
    w2 = np.atleast_1d(np.asarray(w2, dtype=np.float64))
    w3 = np.atleast_1d(np.asarray(w3, dtype=np.float64))
    ok_a = ~(np.isnan(q3).any(axis=-1) | np.isnan(r2).any(axis=-1) | np.isnan(w2))
    ok_b = ~(np.isnan(q2).any(axis=-1) | np.isnan(r3).any(axis=-1) | np.isnan(w3))
    term_a = np.where(ok_a, np.where(ok_a, w2, 0.0) * kl_div(np.where(ok_a[..., None], q3, 1.0),
                                                             np.where(ok_a[..., None], r2, 1.0)), 0.0)
    term_b = np.where(ok_b, np.where(ok_b, w3, 0.0) * kl_div(np.where(ok_b[..., None], q2, 1.0),
                                                             np.where(ok_b[..., None], r3, 1.0)), 0.0)
    losses = term_a + term_b
    if not with_grads:
        return losses
    dq3 = np.where(ok_a[..., None], w2[..., None] * kl_grad_wrt_p(
        np.where(ok_a[..., None], q3, 1.0), np.where(ok_a[..., None], r2, 1.0)), 0.0)
    dq2 = np.where(ok_b[..., None], w3[..., None] * kl_grad_wrt_p(
        np.where(ok_b[..., None], q2, 1.0), np.where(ok_b[..., None], r3, 1.0)), 0.0)
    return losses, dq2, dq3


@dataclass
class PointReliability:
    """Propagated per-point ST entropy and how many voxels contributed."""

    entropy: np.ndarray
    contributors: np.ndarray


def accumulate_point_entropy(n_points: int, contrib_ids, contrib_values,
                             fallback_probs: np.ndarray) -> PointReliability:
    """Average the voxel entropies propagated to each point; points that
    received none fall back to their own prediction entropy."""
    total = np.zeros(n_points)
    count = np.zeros(n_points)
    ids = np.asarray(contrib_ids, dtype=np.int64)
    vals = np.asarray(contrib_values, dtype=np.float64)
    if ids.size:
        np.add.at(total, ids, vals)
        np.add.at(count, ids, 1.0)
    own = entropy(fallback_probs)
    with np.errstate(invalid="ignore"):
        e_hat = np.where(count > 0, total / np.maximum(count, 1.0), own)
    return PointReliability(entropy=e_hat, contributors=count.astype(np.int64))


def fuse_predictions(p2d, p3d, e2d, e3d, mode: str = "softmin"):
    """Entropy-weighted convex fusion of the two modality rows; labels break
    ties toward the lower class index (argmax semantics)."""
    p2d = np.asarray(p2d, dtype=np.float64)
    p3d = np.asarray(p3d, dtype=np.float64)
    w2, w3 = cross_modal_voxel_weights(e2d, e3d, mode=mode)
    fused = w2[..., None] * p2d + w3[..., None] * p3d
    labels = np.argmax(fused, axis=-1)
    return fused, labels, w2
