import numpy as np
import pytest
from fastapi.testclient import TestClient

from lddaudit.calibration import AuditParams
from lddaudit.model import DeviationConfig, ModelSpec
from lddaudit.protocol import Auditor, HttpTransport, LocalTransport, Outcome, Server
from lddaudit.errors import ProbeError
from lddaudit.service import create_app

from conftest import QUANTIZED

PARAMS = AuditParams(0.1, 0.2, 0.0, 1.0)
SPEC = ModelSpec(seed=5, max_steps=10)


@pytest.fixture
def client():
    return TestClient(create_app(Server(SPEC, QUANTIZED, root_seed=9)))


def test_health_and_model(client):
    h = client.get("/v1/health").json()
    assert h["status"] == "ok" and h["logged"] == 0
    info = client.get("/v1/model").json()
    assert ModelSpec.from_dict(info["spec"]) == SPEC
    assert info["model_commitment"]["digest"] == h["model_commitment"]


def test_request_audit_roundtrip(client):
    rid = "0f" * 16
    r = client.post("/v1/request", json={"request_id": rid, "prompt": [1, 2, 3]})
    assert r.status_code == 200 and r.json()["request_id"] == rid
    p = client.post("/v1/audit", json={"request_id": rid})
    assert p.status_code == 200 and p.json()["vc_ok"]
    assert client.post("/v1/request", json={"request_id": rid, "prompt": [1]}).status_code == 409
    assert client.post("/v1/audit", json={"request_id": "1f" * 16}).status_code == 404
    assert client.post("/v1/audits", json=[{"request_id": "1f" * 16}]).json() == [None]


def test_validation_errors(client):
    assert client.post("/v1/request", json={"request_id": "bad", "prompt": [1]}).status_code == 422
    assert client.post("/v1/request", json={"request_id": "0f" * 16, "prompt": [999]}).status_code == 422
    assert client.post("/v1/plan", json={"alpha": 2, "p_detect": 0.1, "eta": 0.1, "fp": 0,
                                         "completeness_target": 0.1}).status_code == 422


def test_purge_and_plan(client):
    client.post("/v1/requests", json=[{"request_id": f"{i:032x}", "prompt": [1, 2]} for i in range(3)])
    assert client.post("/v1/purge", json={"age": 0}).json() == {"purged": 3}
    plan = client.post("/v1/plan", json={"alpha": 0.1, "p_detect": 0.01, "eta": 0.05, "fp": 1e-5,
                                         "completeness_target": 1e-6}).json()
    assert plan["n_audits"] == 2995


def test_http_auditor_matches_local(client):
    remote = Auditor(HttpTransport("http://test", client=client), PARAMS, SPEC.vocab_size, root_seed=1)
    local = Auditor(LocalTransport(Server(SPEC, QUANTIZED, root_seed=9)), PARAMS, SPEC.vocab_size, root_seed=1)
    a, b = remote.probe_many(15), local.probe_many(15)
    assert [x.outcome for x in a] == [x.outcome for x in b]
    assert all(np.array_equal(x.report.samples.value, y.report.samples.value) for x, y in zip(a, b))
    assert any(x.outcome is not Outcome.BOTTOM for x in a)


def test_unreachable_server_raises_probe_error():
    t = HttpTransport("http://127.0.0.1:9", timeout=0.5)
    with pytest.raises(ProbeError):
        t.health()
