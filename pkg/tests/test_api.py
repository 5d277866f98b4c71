"""
Tests for the HTTP API
"""

import pytest
from fastapi.testclient import TestClient


@pytest.fixture
def client(workdir):
    from app.main import app
    return TestClient(app)


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    body = response.json()
    assert body["message"] == "Marcus Wong-Zakai Weak Convergence API"
    assert body["endpoints"]["converge"] == "/converge"


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"
    assert "numpy" in response.json()["dependencies"]


def test_catalog(client):
    body = client.get("/catalog").json()
    assert set(body["models"]) == {"linear", "constant", "bounded_trig"}
    assert "one_sided_stable" in body["levy_families"]
    assert "gaussian_bump" in body["test_functions"]
    assert body["oracles"] == ["reference", "exact_linear"]


def test_converge_linear(client, linear_config):
    response = client.post("/converge", json={"config": linear_config.model_dump(mode="json")})
    assert response.status_code == 200
    body = response.json()
    assert body["verdict"] == "degenerate: scheme exact"
    assert [row["h"] for row in body["rows"]] == [0.25, 0.125, 0.0625]


def test_converge_rejects_invalid_config(client, linear_config):
    config = linear_config.model_dump(mode="json")
    config["run"]["h_list"] = [0.125, 0.25]
    assert client.post("/converge", json={"config": config}).status_code == 422


def test_converge_reports_bad_requests(client, linear_config):
    config = linear_config.model_dump(mode="json")
    config["run"]["n_paths"] = 10
    response = client.post("/converge", json={"config": config})
    assert response.status_code == 400
    assert "n_paths" in response.json()["detail"]


def test_verify_headline_model(client, small_trig_config):
    response = client.post("/verify", json=small_trig_config.model_dump(mode="json"))
    assert response.status_code == 200
    checks = [check["check"] for check in response.json()["checks"]]
    assert checks == ["H_abc", "H_nu", "H'_nu", "H_grad_phi_nu", "flow_derivative_bounds", "psi_growth",
                      "L_equals_Q", "generator_growth", "marcus_vs_ito"]
    assert response.json()["passed"]
