import base64
import io
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from minifabric import service as service_mod
from minifabric.embedder import EmbedderConfig, init_embedder
from minifabric.evaluation import EmbeddingModel
from minifabric.feedback import GenerationConfig, ModelBundle, run_feedback_rounds
from minifabric.schedule import build_schedule
from minifabric.service import create_app
from minifabric.shapes import Prompt, from_uint8
from minifabric.unet import DenoiserConfig, init_denoiser

FAST_CONFIG = {"steps": 6, "batch_size": 2, "seed": 42}
PROMPT_BODY = {"shape": "circle", "color": "red", "size": "large"}


def tiny_models():
    params = init_denoiser(DenoiserConfig(), seed=2)
    for name in ("attn.out.w", "head.conv.w"):
        params.params[name].data[:] = (
            np.random.default_rng(5).standard_normal(params.params[name].data.shape) * 0.2
        ).astype(np.float32)
    bundle = ModelBundle(params, DenoiserConfig(), build_schedule())
    embedder = EmbeddingModel(init_embedder(EmbedderConfig(), seed=3))
    return bundle, embedder


@pytest.fixture()
def data_dir(tmp_path):
    return tmp_path / "data"


@pytest.fixture()
def client(data_dir):
    bundle, embedder = tiny_models()
    app = create_app(bundle, embedder, data_dir=data_dir)
    with TestClient(app, raise_server_exceptions=False) as c:
        yield c


def make_session(client, config=FAST_CONFIG, prompt=PROMPT_BODY):
    resp = client.post("/v1/sessions", json={"prompt": prompt, "config": config})
    assert resp.status_code == 200, resp.text
    return resp.json()["session_id"]


def decode_png(b64: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(b64))) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def test_healthz(client):
    assert client.get("/v1/healthz").json() == {"status": "ok"}


def test_create_session_minimal(client):
    resp = client.post("/v1/sessions", json={"prompt": PROMPT_BODY})
    assert resp.status_code == 200
    sid = resp.json()["session_id"]
    assert len(sid) == 32  # 128-bit hex
    state = client.get(f"/v1/sessions/{sid}").json()
    # defaults: batch 4, w = 0.8, first-half schedule
    assert state["config"]["batch_size"] == 4
    assert state["config"]["feedback_strength"] == 0.8
    assert state["config"]["schedule_kind"] == "first_half"
    assert state["rounds"] == []
    assert state["feedback"] == {"liked": [], "disliked": []}


def test_malformed_prompt_rejected(client):
    resp = client.post("/v1/sessions", json={"prompt": {"shape": "blob"}})
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "bad_request"


def test_unknown_config_key_rejected(client):
    resp = client.post("/v1/sessions", json={"prompt": PROMPT_BODY, "config": {"warp": 9}})
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "bad_request"


def test_unknown_session(client):
    resp = client.get("/v1/sessions/deadbeef")
    assert resp.status_code == 404
    assert resp.json()["error"]["code"] == "unknown_session"


def test_generate_first_round(client):
    sid = make_session(client)
    resp = client.post(f"/v1/sessions/{sid}/generate")
    assert resp.status_code == 200, resp.text
    body = resp.json()
    assert body["round_index"] == 1
    assert len(body["images"]) == FAST_CONFIG["batch_size"]
    for img in body["images"]:
        arr = decode_png(img["png_base64"])
        assert arr.shape == (3, 16, 16)
    assert body["metrics"]["s_pos"] is None  # no feedback yet
    assert body["metrics"]["s_neg"] is None
    assert body["metrics"]["diversity"] is not None


def test_feedback_roundtrip(client):
    sid = make_session(client)
    ids = [im["id"] for im in client.post(f"/v1/sessions/{sid}/generate").json()["images"]]
    resp = client.post(f"/v1/sessions/{sid}/feedback", json={"liked": [ids[0]], "disliked": [ids[1]]})
    assert resp.status_code == 200
    body = resp.json()
    assert body["liked_count"] == 1 and body["disliked_count"] == 1

    second = client.post(f"/v1/sessions/{sid}/generate").json()
    assert second["round_index"] == 2
    assert second["metrics"]["s_pos"] is not None
    assert second["metrics"]["s_neg"] is not None


def test_empty_feedback_is_noop(client):
    sid = make_session(client)
    client.post(f"/v1/sessions/{sid}/generate")
    resp = client.post(f"/v1/sessions/{sid}/feedback", json={})
    assert resp.status_code == 200
    assert resp.json()["liked_count"] == 0


def test_foreign_image_id_rejected(client):
    sid_a = make_session(client)
    sid_b = make_session(client)
    ids_a = [im["id"] for im in client.post(f"/v1/sessions/{sid_a}/generate").json()["images"]]
    client.post(f"/v1/sessions/{sid_b}/generate")
    # same id string exists in b, but ids are validated against the session's own rounds
    resp = client.post(f"/v1/sessions/{sid_b}/feedback", json={"liked": ["r999_0"]})
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "invalid_feedback"
    resp = client.post(f"/v1/sessions/{sid_a}/feedback", json={"liked": [ids_a[0]], "disliked": [ids_a[0]]})
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "invalid_feedback"


def test_busy_while_generating(client):
    sid = make_session(client)
    store = client.app.state.store
    session = store.get(sid)
    with store.lock(sid):
        session.status = "generating"
    resp = client.post(f"/v1/sessions/{sid}/generate")
    assert resp.status_code == 409
    assert resp.json()["error"]["code"] == "busy"
    resp = client.post(f"/v1/sessions/{sid}/feedback", json={"liked": []})
    assert resp.status_code == 409
    with store.lock(sid):
        session.status = "idle"
    assert client.post(f"/v1/sessions/{sid}/generate").status_code == 200


def test_concurrent_generate_single_job(client, monkeypatch):
    sid = make_session(client)
    release = threading.Event()
    calls = []
    real_generate = service_mod.generate

    def slow_generate(*args, **kw):
        calls.append(1)
        release.wait(timeout=10)
        return real_generate(*args, **kw)

    monkeypatch.setattr(service_mod, "generate", slow_generate)
    results = {}

    def first():
        results["first"] = client.post(f"/v1/sessions/{sid}/generate").status_code

    t = threading.Thread(target=first)
    t.start()
    for _ in range(100):
        if calls:
            break
        time.sleep(0.02)
    second = client.post(f"/v1/sessions/{sid}/generate")
    release.set()
    t.join()
    assert results["first"] == 200
    assert second.status_code == 409
    assert len(calls) == 1  # no second job started


def test_session_history_contiguous(client):
    sid = make_session(client)
    for r in range(1, 4):
        ids = [im["id"] for im in client.post(f"/v1/sessions/{sid}/generate").json()["images"]]
        client.post(f"/v1/sessions/{sid}/feedback", json={"liked": [ids[0]], "disliked": [ids[1]]})
    state = client.get(f"/v1/sessions/{sid}").json()
    assert [r["round_index"] for r in state["rounds"]] == [1, 2, 3]
    assert len(state["feedback"]["liked"]) == 3


def test_persistence_across_restart(data_dir):
    bundle, embedder = tiny_models()
    app1 = create_app(bundle, embedder, data_dir=data_dir)
    with TestClient(app1) as c1:
        sid = make_session(c1)
        c1.post(f"/v1/sessions/{sid}/generate")
        ids = c1.get(f"/v1/sessions/{sid}").json()["rounds"][0]["image_ids"]
        c1.post(f"/v1/sessions/{sid}/feedback", json={"liked": [ids[0]], "disliked": [ids[1]]})
        before = c1.get(f"/v1/sessions/{sid}").json()

    app2 = create_app(bundle, embedder, data_dir=data_dir)
    with TestClient(app2) as c2:
        after = c2.get(f"/v1/sessions/{sid}").json()
        assert after == before
        # and the session continues generating from persisted feedback
        resp = c2.post(f"/v1/sessions/{sid}/generate")
        assert resp.status_code == 200
        assert resp.json()["round_index"] == 2


def test_service_reproduces_feedback_loop(client):
    """create -> generate -> feedback -> generate equals run_feedback_rounds
    with the same seeds and selections."""
    sid = make_session(client)
    first = client.post(f"/v1/sessions/{sid}/generate").json()
    ids = [im["id"] for im in first["images"]]
    client.post(f"/v1/sessions/{sid}/feedback", json={"liked": [ids[0]], "disliked": [ids[1]]})
    second = client.post(f"/v1/sessions/{sid}/generate").json()

    bundle, _ = tiny_models()
    config = GenerationConfig(
        batch_size=FAST_CONFIG["batch_size"],
        rounds=2,
        steps=FAST_CONFIG["steps"],
        seed=FAST_CONFIG["seed"],
    )
    records = run_feedback_rounds(
        bundle, Prompt(**PROMPT_BODY), lambda batch, r: ([0], [1]), config
    )
    for api_round, record in zip((first, second), records):
        api_images = np.stack([decode_png(im["png_base64"]) for im in api_round["images"]])
        np.testing.assert_array_equal(api_images, record.images)
