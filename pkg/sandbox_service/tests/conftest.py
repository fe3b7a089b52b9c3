import pytest
from fastapi.testclient import TestClient

from sandbox_service.service import Settings, create_app


@pytest.fixture
def client():
    with TestClient(create_app(Settings())) as c:
        yield c


def make_client(**settings_kwargs):
    return TestClient(create_app(Settings(**settings_kwargs)))


def execute(client, code, **extra):
    payload = {"code": code, **extra}
    resp = client.post("/execute", json=payload)
    assert resp.status_code == 200, resp.text
    return resp.json()
