import json
import time

import pytest
from fastapi.testclient import TestClient

from lattebench.config import parse_config
from lattebench.service import create_app


def service_config(**overrides):
    doc = {
        "seed": 13,
        "world": {"points_per_frame": 384, "feature_dim": 8},
        "stream": {"length": 30},
        "model": {"pretrain_steps": 60, "pretrain_pool": 6},
        "service": {"frames_per_second": 100.0},
    }
    doc.update(overrides)
    return parse_config(doc)


def wait_for_frame(client, timeout=60.0, min_t=0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        r = client.get("/api/frame/latest")
        if r.status_code == 200 and r.json()["t"] >= min_t:
            return r.json()
        time.sleep(0.05)
    raise AssertionError("no frame processed in time")


def wait_done(client, timeout=60.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if client.get("/api/metrics").json()["done"]:
            return
        time.sleep(0.05)
    raise AssertionError("run did not finish in time")


@pytest.fixture(scope="module")
def latte_client():
    cfg = service_config()
    app = create_app(cfg)
    with TestClient(app) as client:
        client.config = cfg
        wait_done(client)
        yield client


@pytest.fixture(scope="module")
def itta_client():
    cfg = service_config(
        world={"points_per_frame": 1024, "feature_dim": 8},
        stream={"length": 400},
        method={"name": "latte+itta"},
        itta={"p_i": 0.0, "warmup_iterations": 0},
        service={"frames_per_second": 5.0, "live_prompts": "hybrid"},
    )
    app = create_app(cfg)
    with TestClient(app) as client:
        client.config = cfg
        wait_for_frame(client)
        yield client


class TestFrameEndpoints:
    def test_latest_frame_contract(self, latte_client):
        f = latte_client.get("/api/frame/latest").json()
        n = len(f["points"])
        assert n == 384
        assert all(len(p) == 3 for p in f["points"])
        for key in ("pred_xm", "pred_2d", "pred_3d", "gt", "ent_2d", "ent_3d"):
            assert len(f[key]) == n, key
        assert len(f["pose"]) == 16
        assert len(f["classes"]) == 6
        assert all(isinstance(v, int) for v in f["pred_xm"][:5])
        # coordinates are rounded to millimeters
        for p in f["points"][:10]:
            for v in p:
                assert abs(v * 1000 - round(v * 1000)) < 1e-9

    def test_frame_by_t_and_latest_agree(self, latte_client):
        latest = latte_client.get("/api/frame/latest").json()
        same = latte_client.get(f"/api/frame/{latest['t']}").json()
        assert same == latest

    def test_unknown_frame_404(self, latte_client):
        assert latte_client.get("/api/frame/99999").status_code == 404

    def test_all_frames_retained(self, latte_client):
        for t in (0, 10, 29):
            r = latte_client.get(f"/api/frame/{t}")
            assert r.status_code == 200
            assert r.json()["t"] == t


class TestMetricsAndConfig:
    def test_metrics_contract(self, latte_client):
        m = latte_client.get("/api/metrics").json()
        assert m["done"] is True
        assert "error" not in m
        assert m["t"] == 29
        assert 0.0 <= m["miou_xm"] <= 1.0
        assert len(m["per_class_iou"]) == 6
        assert m["prompts_consumed"] == 0
        assert m["prompts_human"] == 0
        assert m["frames_per_second"] <= 100.0

    def test_config_endpoint_matches_resolved(self, latte_client):
        r = latte_client.get("/api/config")
        assert r.json() == json.loads(latte_client.config.resolved_json())

    def test_prompt_rejected_without_itta(self, latte_client):
        r = latte_client.post("/api/prompt", json={
            "t": 0, "class_id": 4, "point_indices": [0]})
        assert r.status_code == 400


class TestPromptRoundTrip:
    def _interest_indices(self, frame):
        for c in (4, 5):
            idx = [i for i, g in enumerate(frame["gt"]) if g == c]
            if len(idx) >= 3:
                return c, idx[:3]
        raise AssertionError("no interest-class points in frame")

    def test_prompt_applied_within_window(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        c, idx = self._interest_indices(frame)
        t = frame["t"]
        r = itta_client.post("/api/prompt", json={
            "t": t, "class_id": c, "point_indices": idx,
            "client_id": "test"})
        assert r.status_code == 200
        body = r.json()
        assert body["accepted"] is True
        assert t <= body["applied_at_t"] <= t + 2
        m = itta_client.get("/api/metrics").json()
        assert m["prompts_human"] >= 1
        # the clicked points' fused pseudo-labels carry the prompted class;
        # the snapshot is published shortly after the prompt is consumed
        wait_for_frame(itta_client, min_t=body["applied_at_t"])
        applied = itta_client.get(f"/api/frame/{body['applied_at_t']}").json()
        assert all(applied["pred_xm"][i] == c for i in idx)

    def test_prompt_with_box(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        c, idx = self._interest_indices(frame)
        pts = [frame["points"][i] for i in idx]
        lo = [min(p[k] for p in pts) for k in range(3)]
        hi = [max(p[k] for p in pts) for k in range(3)]
        r = itta_client.post("/api/prompt", json={
            "t": frame["t"], "class_id": c, "point_indices": idx,
            "box": {"min": lo, "max": hi}})
        assert r.status_code == 200
        assert r.json()["accepted"] is True

    def test_invalid_class_400(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        r = itta_client.post("/api/prompt", json={
            "t": frame["t"], "class_id": 0, "point_indices": [0]})
        assert r.status_code == 400

    def test_empty_indices_400(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        r = itta_client.post("/api/prompt", json={
            "t": frame["t"], "class_id": 4, "point_indices": []})
        assert r.status_code == 400

    def test_out_of_range_index_400(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        r = itta_client.post("/api/prompt", json={
            "t": frame["t"], "class_id": 4, "point_indices": [100000]})
        assert r.status_code == 400

    def test_malformed_box_400(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        c, idx = self._interest_indices(frame)
        r = itta_client.post("/api/prompt", json={
            "t": frame["t"], "class_id": c, "point_indices": idx,
            "box": {"min": [1, 1, 1], "max": [0, 0, 0]}})
        assert r.status_code == 400

    def test_far_future_404(self, itta_client):
        frame = itta_client.get("/api/frame/latest").json()
        r = itta_client.post("/api/prompt", json={
            "t": frame["t"] + 100, "class_id": 4, "point_indices": [0]})
        assert r.status_code == 404

    def test_stale_frame_409(self, itta_client):
        wait_for_frame(itta_client, min_t=4)
        r = itta_client.post("/api/prompt", json={
            "t": 0, "class_id": 4, "point_indices": [0]})
        assert r.status_code == 409

    def test_unknown_payload_key_422(self, itta_client):
        r = itta_client.post("/api/prompt", json={
            "t": 0, "class_id": 4, "point_indices": [0], "bogus": 1})
        assert r.status_code == 422

    def test_run_log_records_prompt(self, tmp_path):
        cfg = service_config(
            world={"points_per_frame": 1024, "feature_dim": 8},
            stream={"length": 30},
            method={"name": "latte+itta"},
            itta={"p_i": 0.0, "warmup_iterations": 0},
            service={"frames_per_second": 10.0, "live_prompts": "human"},
        )
        app = create_app(cfg, out_dir=tmp_path)
        with TestClient(app) as client:
            frame = wait_for_frame(client)
            c, idx = self._interest_indices(frame)
            r = client.post("/api/prompt", json={
                "t": frame["t"], "class_id": c, "point_indices": idx})
            assert r.status_code == 200
            applied_at = r.json()["applied_at_t"]
            wait_done(client)
        records = [json.loads(line)
                   for line in (tmp_path / "run.jsonl").read_text().splitlines()]
        by_t = {rec["t"]: rec for rec in records}
        assert by_t[applied_at]["n_prompts"] == 1
        assert sum(rec["n_prompts"] for rec in records) == 1
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n_prompts"] == 1

    def test_event_stream_delivers_metrics(self, itta_client):
        with itta_client.stream("GET", "/api/events") as resp:
            assert resp.headers["content-type"].startswith("text/event-stream")
            for line in resp.iter_lines():
                if line.startswith("data:"):
                    event = json.loads(line.split("data:", 1)[1])
                    assert set(event) >= {"t", "metrics"}
                    assert event["metrics"]["t"] == event["t"]
                    assert len(event["metrics"]["per_class_iou"]) == 6
                    break
