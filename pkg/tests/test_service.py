import numpy as np
import pytest
from fastapi.testclient import TestClient

from brushpaint.data import rle
from brushpaint.data.backends import HttpCaptioner, HttpSegmenter, image_to_b64
from brushpaint.data.pipeline import annotate_corpus, read_records
from brushpaint.data.backends import StubAesthetic
from brushpaint.data.scenes import Corpus
from brushpaint.errors import DataError
from brushpaint.service import app


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_health(client):
    assert client.get("/health").json()["status"] == "ok"


def test_segment_endpoint_finds_objects(client):
    scene = Corpus(1, 3).scene(0)
    resp = client.post("/segment", json={"image_b64": image_to_b64(scene.pixels)})
    assert resp.status_code == 200
    dets = resp.json()["detections"]
    assert len(dets) == len(scene.objects)
    truth = {tuple(o.bbox): o for o in scene.objects}
    for d in dets:
        o = truth[tuple(d["bbox"])]
        assert d["label"] == o.label and np.array_equal(rle.decode(d["mask_rle"]), o.mask)
        assert 0 <= d["confidence"] <= 1


def test_caption_endpoint(client):
    scene = Corpus(1, 3).scene(1)
    o = scene.objects[0]
    body = {"image_b64": image_to_b64(scene.pixels), "mask_rle": rle.encode(o.mask), "label": o.label}
    resp = client.post("/caption", json=body)
    assert resp.status_code == 200 and resp.json()["caption"] == o.caption


def test_caption_rejects_mismatched_mask(client):
    scene = Corpus(1, 1).scene(0)
    body = {"image_b64": image_to_b64(scene.pixels), "mask_rle": rle.encode(np.ones((4, 4))), "label": "square"}
    resp = client.post("/caption", json=body)
    assert resp.status_code == 422
    assert resp.json()["exit_code"] == 2 and resp.json()["error"] == "DataError"


def test_bad_image_payload(client):
    resp = client.post("/segment", json={"image_b64": "AAAA"})
    assert resp.status_code == 422 and resp.json()["exit_code"] == 2


def test_missing_field_is_validation_error(client):
    assert client.post("/caption", json={"image_b64": ""}).status_code == 422


def test_http_backends_drive_the_pipeline(client, tmp_path):
    """Annotation through the HTTP clients agrees with the ground truth on clean scenes."""
    corpus = Corpus(2, 8)
    out = tmp_path / "http.jsonl"
    seg, cap = HttpSegmenter("http://test", client=client), HttpCaptioner("http://test", client=client)
    stats = annotate_corpus(corpus, seg, cap, StubAesthetic(0, 6.0, 7.0), out)
    assert not stats.failures
    recs = read_records(out)
    assert len(recs) == sum(len(s.objects) for s in corpus)
    for r in recs:
        scene = corpus.by_id(r["image_id"])
        assert r["caption"] in {o.caption for o in scene.objects}


def test_http_backend_failure_is_data_error(client):
    with pytest.raises(DataError):
        HttpCaptioner("http://test", client=client).caption(np.zeros((8, 8)), np.zeros((4, 4), dtype=bool), "square")


def test_eval_endpoint_identity(client, tiny_run_cfg, tmp_path):
    cfg = tiny_run_cfg.with_overrides({"corpus.eval_size": 3})
    body = {"config": cfg.model_dump(), "model": "identity", "out": str(tmp_path / "r.json")}
    resp = client.post("/eval", json=body)
    assert resp.status_code == 200
    assert resp.json()["aggregate"]["psnr_unmasked"] == 99.0
    assert (tmp_path / "r.md").exists()


def test_eval_endpoint_usage_error(client, tmp_path):
    resp = client.post("/eval", json={"model": "checkpoint", "out": str(tmp_path / "r.json")})
    assert resp.status_code == 400 and resp.json()["exit_code"] == 1


def test_train_endpoint_missing_base(client, tmp_path):
    resp = client.post("/train", json={"base": str(tmp_path / "none.ckpt"), "workdir": str(tmp_path)})
    assert resp.status_code == 422
