import base64
import socket
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from wisefuse_sidecar.app import SidecarConfig, create_app
from wisefuse_sidecar.main import main
from wisefuse_sidecar.synth import echo_vector

# the engine is the conformance oracle: its synthetic provider must agree
# with echo mode bit for bit at float32
from wisefuse.encoder import synthetic_vector

DIM = 16
SEED = 7


@pytest.fixture()
def client():
    app = create_app(SidecarConfig(model_id="echo", dim=DIM, seed=SEED, batch_max=8))
    return TestClient(app)


def embed(client, items, modality="vision"):
    return client.post("/embed", json={"modality": modality, "items": items})


def image_item(item_id, payload: bytes):
    return {"id": item_id, "image_b64": base64.b64encode(payload).decode()}


class TestInfo:
    def test_reports_configured_dim(self, client):
        doc = client.get("/info").json()
        assert doc == {"provider_id": "echo", "dim": DIM, "modality": "both"}

    def test_idempotent(self, client):
        assert client.get("/info").content == client.get("/info").content


class TestEmbed:
    def test_rows_match_engine_bit_for_bit(self, client):
        rng = np.random.default_rng(42)
        for _ in range(100):
            payload = rng.bytes(int(rng.integers(0, 200)))
            resp = embed(client, [image_item("x", payload)])
            assert resp.status_code == 200
            row = np.asarray(resp.json()["embeddings"][0], dtype=np.float32)
            expected = synthetic_vector(payload, DIM, SEED)
            assert np.array_equal(row, expected)

    def test_text_payloads(self, client):
        resp = embed(client, [{"id": "t", "text": "nuclei"}], modality="text")
        row = np.asarray(resp.json()["embeddings"][0], dtype=np.float32)
        assert np.array_equal(row, synthetic_vector(b"nuclei", DIM, SEED))

    def test_row_length_matches_info_dim(self, client):
        dim = client.get("/info").json()["dim"]
        items = [image_item(f"i{k}", bytes([k, k + 1])) for k in range(5)]
        resp = embed(client, items)
        rows = resp.json()["embeddings"]
        assert len(rows) == 5
        assert all(len(row) == dim for row in rows)

    def test_order_preserved_and_deterministic(self, client):
        items = [image_item(f"i{k}", bytes([k] * 4)) for k in range(6)]
        a = embed(client, items).json()["embeddings"]
        b = embed(client, items).json()["embeddings"]
        assert a == b
        singles = [
            embed(client, [item]).json()["embeddings"][0] for item in items
        ]
        assert a == singles

    def test_json_floats_survive_float32_round_trip(self, client):
        resp = embed(client, [image_item("x", b"roundtrip")])
        for value in resp.json()["embeddings"][0]:
            assert value == float(np.float32(value))


class TestErrorCodes:
    def test_empty_items_400(self, client):
        assert embed(client, []).status_code == 400

    def test_missing_items_400(self, client):
        assert client.post("/embed", json={"modality": "vision"}).status_code == 400

    def test_non_json_body_400(self, client):
        resp = client.post("/embed", content=b"\x00not json",
                           headers={"Content-Type": "application/json"})
        assert resp.status_code == 400

    def test_bad_base64_400(self, client):
        resp = embed(client, [{"id": "x", "image_b64": "@@@not base64@@@"}])
        assert resp.status_code == 400

    def test_missing_payload_field_400(self, client):
        assert embed(client, [{"id": "x"}]).status_code == 400
        resp = embed(client, [{"id": "x", "text": "words"}], modality="vision")
        assert resp.status_code == 400

    def test_batch_too_large_413(self, client):
        items = [image_item(f"i{k}", b"p") for k in range(9)]  # batch_max is 8
        assert embed(client, items).status_code == 413

    def test_unsupported_modality_422(self, client):
        assert embed(client, [image_item("x", b"p")],
                     modality="audio").status_code == 422


class TestStartup:
    def test_unknown_model_rejected(self):
        with pytest.raises(ValueError):
            create_app(SidecarConfig(model_id="resnet"))

    def test_cli_exits_nonzero_for_unknown_model(self, capsys):
        assert main(["--model-id", "resnet"]) == 2
        assert "unknown model_id" in capsys.readouterr().err


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture()
def live_server():
    import uvicorn

    port = free_port()
    app = create_app(SidecarConfig(model_id="echo", dim=DIM, seed=SEED,
                                   batch_max=4, port=port))
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port,
                                           log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.02)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


class TestEngineIntegration:
    def test_remote_provider_round_trip(self, live_server):
        from wisefuse.encoder import EncodeRequest, EncoderGateway, RemoteProvider

        gateway = EncoderGateway(RemoteProvider(live_server, batch_max=4))
        info = gateway.info()
        assert info.dim == DIM
        items = [(f"p{k}", bytes([k, 2 * k])) for k in range(7)]  # spans chunks
        store = gateway.encode_batch(EncodeRequest(items, "vision"))
        for item_id, payload in items:
            assert np.array_equal(store.get(item_id),
                                  synthetic_vector(payload, DIM, SEED))
        assert gateway.total_calls == 7
