import pytest
from fastapi.testclient import TestClient

from main import app

client = TestClient(app)


def test_root_and_health():
    body = client.get("/").json()
    assert body["status"] == "running"
    assert client.get("/health").json() == {"status": "healthy"}


def test_experiment_kinds():
    kinds = client.get("/experiments/kinds").json()["kinds"]
    assert len(kinds) == 11
    assert "interference" in kinds and "sae-mask" in kinds


def test_interference_full_rank():
    body = client.post("/interference", json={"d1": 32, "d2": 32, "trials": 5}).json()
    assert body["expected"] == 0.0
    assert body["global_error"] == pytest.approx(0.0, abs=1e-12)
    assert body["max_ttt_error"] < 1e-16
    assert body["ci_low"] <= body["global_error"] <= body["ci_high"]


def test_interference_bad_dimensions():
    response = client.post("/interference", json={"d1": 8, "d2": 16, "trials": 2})
    assert response.status_code == 400


def test_run_experiment():
    config = {"experiment": "interference", "seed": 0, "trials": 5, "resamples": 50,
              "world": {"d1": 16}, "axes": {"d2": [4, 16]}}
    response = client.post("/experiments/run", json=config)
    assert response.status_code == 200
    body = response.json()
    assert body["experiment"] == "interference"
    assert len(body["rows"]) == 6
    assert body["failures"] == []
    assert body["provenance"]["seed"] == 0


def test_run_experiment_rejects_unknown_field():
    response = client.post("/experiments/run",
                           json={"experiment": "interference", "seed": 0, "colour": "red"})
    assert response.status_code == 422
