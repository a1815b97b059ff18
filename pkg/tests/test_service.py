from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from filterank.model import SchemaMismatchError, load, save
from filterank.ranking import RankingConfig, recommend
from filterank.service import create_app
from filterank.service.app import config_from_env
from filterank.service.loadtest import make_requests, run_loadtest
from filterank.service.runner import background_server, parse_addr
from filterank.service.schemas import QueryModel


@pytest.fixture(scope="module")
def client(tiny_model_dir):
    with TestClient(create_app(tiny_model_dir)) as c:
        yield c


@pytest.fixture(scope="module")
def payloads(tiny_model, small_world):
    schema = tiny_model[0].schema
    return make_requests(schema, 40, seed=3, world=small_world) + make_requests(schema, 40, seed=4)


def in_process(params, body, cfg=RankingConfig()):
    q = QueryModel(**body["query"]).to_query()
    return [r.to_json() for r in recommend(params, q, body["facet_counts"], cfg, body["applied_filters"])]


def test_health_not_ready_before_load(tiny_model_dir):
    with TestClient(create_app(tiny_model_dir, load_on_startup=False)) as c:
        r = c.get("/health")
        assert r.status_code == 503 and r.json()["status"] == "not_ready"
        assert c.post("/recommend", json=payload_for_k(8)).status_code == 503
        # validation happens before the model is needed
        assert c.post("/recommend", json={"query": {}, "facet_counts": []}).status_code == 422


def payload_for_k(k):
    return {
        "query": {"location_id": 1, "num_adults": 2, "checkin_date": "2025-05-01", "checkout_date": "2025-05-04",
                  "platform": "web", "device_type": "desktop", "search_timestamp": "2025-04-20"},
        "applied_filters": [],
        "facet_counts": [30] * k,
    }


def test_health_ready_with_weight_hash(client, tiny_model_dir):
    body = client.get("/health").json()
    assert body["status"] == "ready" and body["k"] == 8
    digest = hashlib.sha256((tiny_model_dir / "model.bin").read_bytes()).hexdigest()
    assert body["model_version"] == digest[:12]
    assert body["uptime_seconds"] >= 0


def test_responses_equal_in_process_recommend(client, tiny_model_dir, payloads):
    params = load(tiny_model_dir)
    for body in payloads:
        r = client.post("/recommend", json=body)
        assert r.status_code == 200, r.text
        out = r.json()
        assert out["recommendations"] == in_process(params, body)
        assert out["latency_micros"] >= 0


def test_responses_are_bitwise_equal_floats(client, tiny_model_dir):
    params = load(tiny_model_dir)
    body = payload_for_k(8)
    got = client.post("/recommend", json=body).json()["recommendations"]
    want = in_process(params, body, RankingConfig())
    for g, w in zip(got, want):
        for key in ("score", "p_engage", "p_book"):
            assert np.float64(g[key]).tobytes() == np.float64(w[key]).tobytes()


def test_request_order_does_not_matter(client, payloads):
    forward = [client.post("/recommend", json=b).json()["recommendations"] for b in payloads]
    order = np.random.default_rng(0).permutation(len(payloads))
    shuffled = {int(i): client.post("/recommend", json=payloads[i]).json()["recommendations"] for i in order}
    assert [shuffled[i] for i in range(len(payloads))] == forward


@pytest.mark.parametrize("mutate", [
    lambda b: b.update(facet_counts=[30] * 7),
    lambda b: b.update(facet_counts=[30] * 7 + [-1]),
    lambda b: b.update(applied_filters=[8]),
    lambda b: b["query"].update(checkout_date="2025-04-30"),
    lambda b: b["query"].update(surprise=1),
    lambda b: b["query"].pop("platform"),
    lambda b: b.pop("facet_counts"),
])
def test_invalid_requests_get_422(client, mutate):
    body = payload_for_k(8)
    mutate(body)
    r = client.post("/recommend", json=body)
    assert r.status_code == 422
    assert "detail" in r.json()


def test_malformed_json_gets_4xx(client):
    r = client.post("/recommend", content=b"{not json", headers={"content-type": "application/json"})
    assert 400 <= r.status_code < 500
    assert r.json()["detail"]


def test_errors_are_counted(client):
    before = client.get("/health").json()
    client.post("/recommend", json={"query": {}})
    client.post("/recommend", json=payload_for_k(8))
    after = client.get("/health").json()
    assert after["requests"] == before["requests"] + 2
    assert after["errors"] == before["errors"] + 1


def test_model_is_read_only(client):
    params = client.app.state.filterank.params
    for arr in params.arrays.values():
        assert not arr.flags.writeable
        with pytest.raises(ValueError):
            arr[(0,) * arr.ndim] = 1.0


def test_schema_mismatch_refuses_to_start(tiny_model, tmp_path):
    save(tiny_model[0], None, tmp_path)
    d = json.loads((tmp_path / "schema.json").read_text())
    d["continuous"][0]["std"] *= 2
    (tmp_path / "schema.json").write_text(json.dumps(d))
    with pytest.raises(SchemaMismatchError):
        with TestClient(create_app(tmp_path)):
            pass


def test_ranking_settings_apply(tiny_model_dir):
    cfg = RankingConfig(conversion_weight_exponent=0.5, top_k=2, min_inventory=0)
    with TestClient(create_app(tiny_model_dir, cfg)) as c:
        body = payload_for_k(8)
        recs = c.post("/recommend", json=body).json()["recommendations"]
    assert len(recs) == 2
    assert recs == in_process(load(tiny_model_dir), body, cfg)


def test_config_from_env(monkeypatch):
    monkeypatch.setenv("FILTERANK_TOP_K", "3")
    monkeypatch.setenv("FILTERANK_EXPONENT", "1.5")
    cfg = config_from_env()
    assert (cfg.top_k, cfg.conversion_weight_exponent, cfg.min_inventory) == (3, 1.5, 18)


def test_parse_addr():
    assert parse_addr("0.0.0.0:9000") == ("0.0.0.0", 9000)
    for bad in ("9000", "host:", "host:port"):
        with pytest.raises(ValueError):
            parse_addr(bad)


def test_loadtest_over_http(tiny_model_dir, payloads):
    with background_server(create_app(tiny_model_dir)) as url:
        report = run_loadtest(url, payloads, concurrency=2, warmup=5, keep_responses=True)
    assert report.requests == len(payloads) and report.errors == 0
    j = report.to_json()
    assert j["latency_ms"]["p50"] <= j["latency_ms"]["p99"] <= j["latency_ms"]["max"]
    params = load(tiny_model_dir)
    for body, resp in zip(payloads, report.responses):
        assert resp["recommendations"] == in_process(params, body)
