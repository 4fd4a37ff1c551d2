"""End-to-end acceptance checks: exact oracles for the voxel/reliability
kernels, analytic-gradient verification, protocol ordering, determinism, and
directional quality of the adaptation methods on the fixed benchmark stream.

Each test function covers one acceptance criterion at its stated tolerance.
"""

import hashlib
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from lattebench import synth
from lattebench.adapt import build_itta_state, run_adaptation
from lattebench.cli import _pretrain, main
from lattebench.config import parse_config
from lattebench.itta import (SimulatedPrompter, clustering_objective,
                             focal_loss, init_head, record_momentum_grad,
                             reuse_momentum_grad, warmup_head)
from lattebench.models import ModelPair, softmax
from lattebench.reliability import (cross_modal_voxel_weights, entropy,
                                    fuse_predictions, merge_windows,
                                    quantile_filter, st_entropy,
                                    window_priors, xm_consistency_loss)
from lattebench.voxels import MergedCloud, voxelize

# ---------------------------------------------------------------------------
# fixed benchmark stream: 400 frames, one shift segment per modality

SEGMENT = {"extra_sigma": 2.0, "bias": 3.0}
BENCH_DOC = {
    "seed": 42,
    "stream": {"length": 400},
    "windows": {"sizes": [3, 5]},
    "shift": [
        {"start": 50, "end": 190, "corrupt_2d": SEGMENT},
        {"start": 210, "end": 350, "corrupt_3d": SEGMENT},
    ],
}

# Reference mean mIoU values pinned from a one-time oracle run of this exact
# configuration; regressions beyond +-0.5 mIoU points fail.
PINNED_MIOU_XM = {
    "source_only": 0.99520,
    "latte": 0.99584,
    "latte_pp": 0.99635,
}
PIN_TOL = 0.005  # 0.5 mIoU points


def clone_models(models):
    return {m: ModelPair(student={k: v.copy() for k, v in p.student.items()},
                         teacher={k: v.copy() for k, v in p.teacher.items()},
                         modality=m)
            for m, p in models.items()}


class Bench:
    """Runs benchmark methods on demand, sharing pretraining and warm-up."""

    def __init__(self):
        self.cfg0 = parse_config(BENCH_DOC)
        self.spec0 = self.cfg0.stream_spec()
        self.models0 = _pretrain(self.cfg0)
        self.head0 = None
        self.logs = {}
        self.wall = {}

    def _warm_head(self):
        if self.head0 is None:
            head = init_head(self.spec0.world.feature_dim,
                             self.cfg0.itta.bottleneck_dim, seed=self.cfg0.seed)
            warmup_head(head, self.spec0, synth.DEFAULT_CLASSES,
                        iterations=self.cfg0.itta.warmup_iterations,
                        seed=self.cfg0.seed, cfg=self.cfg0.adapt_config().itta)
            self.head0 = head
        return {k: v.copy() for k, v in self.head0.items()}

    def run(self, method, p_i=0.01):
        key = (method, p_i)
        if key in self.logs:
            return self.logs[key]
        cfg = parse_config({**BENCH_DOC, "method": {"name": method},
                            "itta": {"p_i": p_i}})
        spec = cfg.stream_spec()
        world = synth.generate_world(spec.world)
        adapt_cfg = cfg.adapt_config()
        models = clone_models(self.models0)
        itta_state, prompt_source = None, None
        if adapt_cfg.with_itta:
            itta_state = build_itta_state(models, self._warm_head(),
                                          synth.DEFAULT_CLASSES,
                                          adapt_cfg.itta, seed=cfg.seed)
            prompt_source = SimulatedPrompter(synth.DEFAULT_CLASSES,
                                              adapt_cfg.itta, seed=cfg.seed)
        t0 = time.monotonic()
        log = run_adaptation(synth.render_stream(world, spec), models,
                             adapt_cfg, prompt_source=prompt_source,
                             itta_state=itta_state,
                             config_hash=cfg.config_hash(), seed=cfg.seed)
        self.wall[key] = time.monotonic() - t0
        self.logs[key] = log
        return log


@pytest.fixture(scope="module")
def bench():
    return Bench()


# ---------------------------------------------------------------------------
# kernel oracles


def test_voxel_oracle_matches_brute_force():
    rng = np.random.default_rng(0)
    t0 = time.monotonic()
    for _ in range(200):
        n = int(rng.integers(1, 1001))
        s = float(rng.uniform(0.05, 1.0))
        pts = rng.uniform(-30, 30, size=(n, 3))
        cloud = MergedCloud(points=pts,
                            origin_frame=np.zeros(n, dtype=np.int64),
                            origin_index=np.arange(n, dtype=np.int64),
                            query_frame=0)
        grid = voxelize(cloud, s)
        oracle = {}
        for i, p in enumerate(pts):
            oracle.setdefault(tuple(np.floor(p / s).astype(np.int64)),
                              []).append(i)
        table = {k: sorted(v) for k, v in grid.table().items()}
        assert table == {k: sorted(v) for k, v in oracle.items()}
    assert time.monotonic() - t0 < 10.0


def test_entropy_and_weight_invariants():
    rng = np.random.default_rng(1)
    n, k = 100_000, 6
    # random voxels: random reference counts collapsed to their mean rows
    refs = rng.dirichlet(np.full(k, 0.3), size=n)
    e = entropy(refs)
    assert (e >= 0.0).all() and (e <= np.log(k) + 1e-12).all()
    one = st_entropy(rng.dirichlet(np.ones(k), size=3))[0]
    assert 0.0 <= one <= np.log(k) + 1e-12

    e2, e3 = e[: n // 2], e[n // 2:]
    w2, w3 = cross_modal_voxel_weights(e2, e3)
    assert np.abs(w2 + w3 - 1.0).max() < 1e-9

    _, _, wp = fuse_predictions(refs[: n // 2], refs[n // 2:], e2, e3)
    assert np.abs(wp + (1.0 - wp) - 1.0).max() < 1e-9

    sizes = (3, 5)
    ew = rng.uniform(0, np.log(k), size=(2, n // 2))
    pw = np.broadcast_to(refs[: n // 2], (2, n // 2, k))
    _, _, tau, h = merge_windows(ew, pw, np.ones_like(ew, dtype=bool),
                                 window_priors(sizes))
    assert h.all()
    assert np.abs(tau.sum(axis=0) - 1.0).max() < 1e-9

    # softmin monotonicity: the lower-entropy member never gets less weight
    a, b = rng.uniform(0, np.log(k), size=(2, 10_000))
    wa, wb = cross_modal_voxel_weights(a, b)
    assert np.where(a == b, wa == wb, (a < b) == (wa > wb)).all()


def test_quantile_filter_counts():
    rng = np.random.default_rng(2)
    for n in (10, 100, 1000):
        values = rng.permutation(np.linspace(0.1, 2.0, n))  # distinct
        keep = quantile_filter(values, 0.9)
        filtered = int(n - keep.sum())
        assert filtered == n - int(np.ceil(0.9 * n))


def test_latte_pp_single_window_reduction(bench):
    """windows=[3] multi-window machinery equals the plain single-window path
    on 50 random voxel batches, to 1e-12."""
    rng = np.random.default_rng(3)
    k = 6
    for _ in range(50):
        nv = int(rng.integers(1, 40))
        e = rng.uniform(0, np.log(k), size=(1, nv))
        p = rng.dirichlet(np.ones(k), size=(1, nv))
        keep = rng.random((1, nv)) < 0.8
        em, pm, tau, h = merge_windows(e, p, keep, window_priors([3]))
        assert np.array_equal(h, keep[0])
        if h.any():
            assert np.abs(em[h] - e[0, h]).max() < 1e-12
            assert np.abs(pm[h] - p[0, h]).max() < 1e-12
            assert np.abs(tau[0, h] - 1.0).max() < 1e-12
    # and end-to-end: the latte_pp code path with a single window is the
    # latte code path
    doc = {**BENCH_DOC, "stream": {"length": 8}, "windows": {"sizes": [3]},
           "shift": []}
    logs = {}
    for method in ("latte", "latte_pp"):
        cfg = parse_config({**doc, "method": {"name": method}})
        spec = cfg.stream_spec()
        world = synth.generate_world(spec.world)
        logs[method] = run_adaptation(synth.render_stream(world, spec),
                                      clone_models(bench.models0),
                                      cfg.adapt_config(), seed=cfg.seed)
    for ra, rb in zip(logs["latte"].records, logs["latte_pp"].records):
        assert abs(ra["miou_xm"] - rb["miou_xm"]) <= 1e-12
        assert abs(ra["loss_total"] - rb["loss_total"]) <= 1e-12


# ---------------------------------------------------------------------------
# analytic gradients vs central finite differences


def _rel_err(num, ana):
    return abs(num - ana) / max(abs(num) + abs(ana), 1e-8)


def test_gradient_check_cross_entropy():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n, k = int(rng.integers(2, 12)), 6
        z = rng.normal(size=(n, k))
        y = rng.integers(0, k, size=n)

        def loss(logits):
            p = softmax(logits)
            return -np.mean(np.log(p[np.arange(n), y]))

        p = softmax(z)
        onehot = np.eye(k)[y]
        dz = (p - onehot) / n
        step = 1e-5
        for i in range(n):
            for j in range(k):
                up, down = z.copy(), z.copy()
                up[i, j] += step
                down[i, j] -= step
                num = (loss(up) - loss(down)) / (2 * step)
                assert _rel_err(num, dz[i, j]) < 1e-4


def test_gradient_check_kl_consistency():
    rng = np.random.default_rng(5)
    step = 1e-6
    for _ in range(20):
        k = 6
        q2, q3, r2, r3 = rng.dirichlet(np.ones(k), size=4)
        w2 = float(rng.uniform(0.1, 0.9))
        w3 = 1.0 - w2
        _, dq2, dq3 = xm_consistency_loss(q2, q3, r2, r3, w2, w3,
                                          with_grads=True)
        for which, grad in (("q2", dq2[0]), ("q3", dq3[0])):
            for j in range(k):
                up = {"q2": q2.copy(), "q3": q3.copy()}
                down = {"q2": q2.copy(), "q3": q3.copy()}
                up[which][j] += step
                down[which][j] -= step
                lu = float(xm_consistency_loss(up["q2"], up["q3"], r2, r3,
                                               w2, w3)[0])
                ld = float(xm_consistency_loss(down["q2"], down["q3"], r2, r3,
                                               w2, w3)[0])
                num = (lu - ld) / (2 * step)
                assert _rel_err(num, grad[j]) < 1e-4


def test_gradient_check_entropy_loss():
    rng = np.random.default_rng(6)
    step = 1e-6
    for _ in range(20):
        n, k = int(rng.integers(2, 10)), 6
        p = rng.dirichlet(np.ones(k), size=n)
        p = np.clip(p, 1e-3, None)
        dp = -(np.log(p) + 1.0) / n  # gradient of mean entropy
        for i in range(n):
            for j in range(k):
                up, down = p.copy(), p.copy()
                up[i, j] += step
                down[i, j] -= step
                num = (np.mean(entropy(up)) - np.mean(entropy(down))) / (2 * step)
                assert _rel_err(num, dp[i, j]) < 1e-4


def test_gradient_check_focal_loss():
    rng = np.random.default_rng(7)
    step = 1e-6
    for _ in range(20):
        n = int(rng.integers(3, 20))
        prob = rng.uniform(0.05, 0.95, size=n)
        target = rng.integers(0, 2, size=n).astype(float)
        _, dp = focal_loss(prob, target, with_grad=True)
        for j in range(n):
            up, down = prob.copy(), prob.copy()
            up[j] += step
            down[j] -= step
            num = (focal_loss(up, target) - focal_loss(down, target)) / (2 * step)
            assert _rel_err(num, dp[j]) < 1e-4


def test_gradient_check_clustering_loss():
    from lattebench.itta import IttaConfig

    rng = np.random.default_rng(8)
    cfg = IttaConfig()
    step = 1e-6
    for _ in range(20):
        n, d = int(rng.integers(6, 14)), int(rng.integers(3, 8))
        hidden = rng.normal(size=(n, d))
        labels = rng.integers(0, 3, size=n)
        labels[: n // 2] = 2
        mask_idx = np.array([0, 1])
        mu = rng.normal(size=d)
        mu /= np.linalg.norm(mu)
        _, dh = clustering_objective(hidden, mask_idx, labels, 2, mu, cfg,
                                     with_grad=True)
        for i in range(n):
            for j in range(d):
                up, down = hidden.copy(), hidden.copy()
                up[i, j] += step
                down[i, j] -= step
                lu = clustering_objective(up, mask_idx, labels, 2, mu, cfg)
                ld = clustering_objective(down, mask_idx, labels, 2, mu, cfg)
                num = (lu - ld) / (2 * step)
                assert _rel_err(num, dh[i, j]) < 1e-4


# ---------------------------------------------------------------------------
# momentum-gradient geometry


def test_momentum_gradient_geometry():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        d = int(rng.integers(2, 513))
        g_mg = rng.normal(size=d)
        g_ref = rng.normal(size=d)
        g_k = rng.normal(size=d)
        rec = record_momentum_grad({"w": g_mg}, {"w": g_ref}, 0)
        dt = int(rng.integers(1, 11))
        out = reuse_momentum_grad(rec, {"w": g_k}, dt)["w"]
        lam = 0.9 ** dt
        assert abs(np.linalg.norm(out) - lam * np.linalg.norm(g_mg)) < 1e-6
        cos = out @ g_k / (np.linalg.norm(out) * np.linalg.norm(g_k))
        assert abs(cos - rec.cosines["w"]) < 1e-6
        beyond = reuse_momentum_grad(rec, {"w": g_k}, 11)["w"]
        assert np.all(beyond == 0.0)


# ---------------------------------------------------------------------------
# protocol, directional end-to-end, determinism


def test_one_pass_protocol_ordering(bench):
    """Every frame's metrics event precedes the update of the batch that
    contains the frame (evaluate-then-update, single pass)."""
    log = bench.run("latte")
    batch_size = 2
    update_pos = {}
    metric_pos = {}
    seen_t = []
    for pos, (kind, ident) in enumerate(log.events):
        if kind == "update":
            update_pos[ident] = pos
        else:
            metric_pos[ident] = pos
            seen_t.append(ident)
    assert seen_t == sorted(seen_t) and len(set(seen_t)) == len(seen_t)
    assert len(metric_pos) == 400
    for t, pos in metric_pos.items():
        batch = t // batch_size + 1  # update ids count batches from 1
        assert batch in update_pos
        assert pos < update_pos[batch], f"frame {t} evaluated after update"


def test_directional_end_to_end(bench):
    source = bench.run("source_only").mean("miou_xm")
    latte = bench.run("latte").mean("miou_xm")
    latte_pp = bench.run("latte_pp").mean("miou_xm")
    assert latte > source
    assert latte_pp >= latte
    assert bench.wall[("latte", 0.01)] < 120.0
    for method, pinned in PINNED_MIOU_XM.items():
        got = bench.run(method).mean("miou_xm")
        assert abs(got - pinned) <= PIN_TOL, (method, got, pinned)


@pytest.mark.parametrize("base", ["pslabel", "tent_like", "latte", "latte_pp"])
def test_directional_itta_improves_interest_classes(bench, base):
    base_iou = bench.run(base).mean_class_iou()
    itta_iou = bench.run(base + "+itta").mean_class_iou()
    assert bench.run(base + "+itta").n_prompts > 0
    for c in synth.DEFAULT_CLASSES.interest:
        assert itta_iou[c] > base_iou[c], (
            f"{base}+itta class {c}: {itta_iou[c]:.5f} !> {base_iou[c]:.5f}")


@pytest.mark.parametrize("base", ["pslabel", "tent_like", "latte", "latte_pp"])
def test_itta_base_equivalence_at_zero_prompt_rate(bench, base):
    plain = bench.run(base)
    gated = bench.run(base + "+itta", p_i=0.0)
    assert gated.n_prompts == 0
    for ra, rb in zip(plain.records, gated.records):
        assert ra == rb


def test_run_determinism_sha256(tmp_path):
    runner = CliRunner()
    doc = {**BENCH_DOC, "stream": {"length": 40}}
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(doc), encoding="utf-8")
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(main, ["run", "--config", str(cfg_path),
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        digest = hashlib.sha256((out / "run.jsonl").read_bytes()).hexdigest()
        hashes.append(digest)
    assert hashes[0] == hashes[1]
