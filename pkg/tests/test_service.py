import numpy as np
import pytest
from fastapi.testclient import TestClient

from hiptune.checkpoint import save_checkpoint
from hiptune.service import create_app


@pytest.fixture(scope="module")
def client(tiny_trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("svc") / "m.safetensors"
    save_checkpoint(path, tiny_trained[2].checkpoint)
    return TestClient(create_app(str(path)))


def test_health_and_taxonomy(client):
    h = client.get("/health").json()
    assert h["status"] == "ok" and h["model_loaded"] and h["stage"] == 2
    t = client.get("/taxonomy").json()
    assert len(t["nodes"]) == 22 and t["digest"] == h["taxonomy_digest"]


def test_metrics_endpoint(client):
    r = client.post("/metrics", json={"scores": [0.1, 0.4, 0.35, 0.8], "labels": [0, 0, 1, 1]})
    assert r.status_code == 200
    body = r.json()
    assert body["auc"] == 0.75 and body["percent"]["auc"] == 75.0
    assert client.post("/metrics", json={"scores": [0.1], "labels": [1]}).status_code == 422
    assert client.post("/metrics", json={"scores": "x"}).status_code == 422


def test_score_endpoint(client, tiny_trained):
    corpus = tiny_trained[0]
    r = client.post("/score", json={"image": corpus.images[3].tolist()})
    assert r.status_code == 200
    body = r.json()
    assert abs(body["p_live"] + body["p_fake"] - 1) < 1e-6
    for level in body["path"]:
        assert abs(sum(level["distribution"]) - 1) < 1e-6
    assert len(body["path"]) == (1 if body["stopped_at_live"] else 3)
    bad = client.post("/score", json={"image": np.zeros((3, 4, 4)).tolist()})
    assert bad.status_code == 422


def test_score_without_model():
    c = TestClient(create_app())
    assert c.get("/health").json()["model_loaded"] is False
    assert c.post("/score", json={"image": [[[0.0]]]}).status_code == 503
