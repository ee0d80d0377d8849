"""Request/response models and the operations behind every subcommand.

The HTTP service and the in-process CLI path both call these functions, so
the two transports produce identical artifacts.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from . import checkpoint as ckpt_io
from . import training
from .config import RunConfig
from .data import rle, vocab
from .data.backends import (
    HttpCaptioner,
    HttpSegmenter,
    MockCaptioner,
    MockSegmenter,
    PixelSegmenter,
    StubAesthetic,
    image_from_b64,
)
from .data.batch import brush_mask
from .data.pipeline import Thresholds, annotate_corpus
from .data.scenes import Corpus, generate_scene, sample_scene_spec
from .diffusion import blend, make_schedule, resize_mask, sample
from .errors import ConfigError, DataError, UsageError
from .eval import IdentityModel, dumps_report, evaluate, load_report, paired_table, save_png, summary_table
from .model import DualBranchModel
from .tensor import Rng

log = logging.getLogger(__name__)

SAMPLE_STREAM = 0x5A4D


def _cfg(d: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(d or {})
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


# -- backend endpoints ---------------------------------------------------------

class SegmentRequest(BaseModel):
    image_b64: str


class DetectionModel(BaseModel):
    mask_rle: dict
    label: str
    bbox: list[int]
    confidence: float = Field(ge=0.0, le=1.0)


class SegmentResponse(BaseModel):
    detections: list[DetectionModel]


class CaptionRequest(BaseModel):
    image_b64: str
    mask_rle: dict
    label: str


class CaptionResponse(BaseModel):
    caption: str


def segment(req: SegmentRequest) -> SegmentResponse:
    dets = PixelSegmenter().segment_image(image_from_b64(req.image_b64))
    return SegmentResponse(detections=[DetectionModel(**d.to_json()) for d in dets])


def caption(req: CaptionRequest) -> CaptionResponse:
    img = image_from_b64(req.image_b64)
    mask = rle.decode(req.mask_rle)
    if mask.shape != img.shape:
        raise DataError(f"mask {mask.shape} does not match image {img.shape}")
    return CaptionResponse(caption=MockCaptioner().caption(img, mask, req.label))


# -- annotate ------------------------------------------------------------------

class AnnotateRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    out: str
    backend_url: str | None = None  # segment/caption over HTTP instead of the in-process mocks
    stop_after: int | None = None


class AnnotateResponse(BaseModel):
    out: str
    records: int
    stats: dict
    partial: bool


def annotate(req: AnnotateRequest) -> AnnotateResponse:
    cfg = _cfg(req.config)
    a = cfg.annotate
    c = cfg.corpus
    corpus = Corpus(c.seed, c.size, c.min_objects, c.max_objects, c.image_size)
    if req.backend_url:
        seg, cap = HttpSegmenter(req.backend_url), HttpCaptioner(req.backend_url)
    else:
        seg, cap = MockSegmenter(c.seed, a.perturb), MockCaptioner()
    stats = annotate_corpus(
        corpus,
        seg,
        cap,
        StubAesthetic(c.seed),
        req.out,
        Thresholds(a.min_confidence, a.min_aesthetic, a.min_resolution),
        extra_meta={"corpus": {"seed": c.seed, "size": c.size}, "config": json.loads(cfg.to_json())},
        stop_after=req.stop_after,
    )
    partial = bool(stats.failures) or not stats.completed
    return AnnotateResponse(out=req.out, records=stats.records, stats=stats.to_json(), partial=partial)


# -- training ------------------------------------------------------------------

class PretrainRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    workdir: str
    steps: int | None = None
    resume: str | None = None


class TrainRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    base: str
    workdir: str
    steps: int | None = None
    annotations: str | None = None
    resume: str | None = None


class TrainResponse(BaseModel):
    checkpoint: str
    sha256: str
    steps: int
    first: dict | None
    last: dict | None
    seconds: float


def _train_response(res: training.RunResult) -> TrainResponse:
    return TrainResponse(
        checkpoint=str(res.checkpoint),
        sha256=ckpt_io.file_sha256(res.checkpoint),
        steps=len(res.history),
        first=res.history[0] if res.history else None,
        last=res.history[-1] if res.history else None,
        seconds=round(res.seconds, 3),
    )


def pretrain(req: PretrainRequest) -> TrainResponse:
    cfg = _cfg(req.config)
    res = training.pretrain(cfg, req.workdir, req.steps, req.resume)
    (Path(req.workdir) / "config.json").write_text(cfg.to_json() + "\n")
    return _train_response(res)


def train(req: TrainRequest) -> TrainResponse:
    cfg = _cfg(req.config)
    if not Path(req.base).exists():
        raise DataError(f"base checkpoint {req.base} not found")
    res = training.train(cfg, req.base, req.workdir, req.steps, req.annotations, req.resume)
    (Path(req.workdir) / "config.json").write_text(cfg.to_json() + "\n")
    return _train_response(res)


# -- sampling ------------------------------------------------------------------

class SampleRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    checkpoint: str
    scene_seed: int
    mask: Literal["object", "random", "empty"] = "object"
    object_index: int = 0
    prompt: str | None = None
    out_dir: str


class SampleResponse(BaseModel):
    files: list[str]
    prompt: str
    warnings: list[str]


def sample_one(req: SampleRequest) -> SampleResponse:
    cfg = _cfg(req.config)
    model, _ = training.load_model(cfg, req.checkpoint)
    scene = generate_scene(sample_scene_spec(req.scene_seed, cfg.corpus.min_objects, cfg.corpus.max_objects, cfg.corpus.image_size))
    size = scene.pixels.shape[-1]
    if req.mask == "object":
        if not 0 <= req.object_index < len(scene.objects):
            raise DataError(f"scene {req.scene_seed} has {len(scene.objects)} objects, no index {req.object_index}")
        obj = scene.objects[req.object_index]
        mask_px, default_prompt = obj.mask, obj.caption
    elif req.mask == "random":
        mask_px, default_prompt = brush_mask(Rng(req.scene_seed).spawn(SAMPLE_STREAM), size), scene.caption
    else:
        mask_px, default_prompt = np.zeros((size, size), dtype=bool), scene.caption
    prompt = default_prompt if req.prompt is None else req.prompt
    warnings = [f"word {w!r} is outside the vocabulary and maps to <unk>" for w in vocab.unknown_words(prompt)]
    for w in warnings:
        log.warning(w)
    x0 = model.vae.encode(scene.pixels)
    factor = size // x0.shape[-1]
    m_lat = resize_mask(mask_px[None, None].astype(np.float64), factor)
    masked = (1.0 - m_lat) * x0
    tokens = vocab.tokenize(prompt, cfg.model.seq_len)[None]
    sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    gen = sample(model, masked, m_lat, tokens, sched, [Rng(cfg.seed).spawn(SAMPLE_STREAM, req.scene_seed)])
    blended = blend(gen, x0, m_lat)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = {
        "original": scene.pixels,
        "masked": model.vae.decode(masked),
        "generated": model.vae.decode(gen),
        "blended": model.vae.decode(blended),
    }
    files = []
    for name, img in images.items():
        path = out / f"{name}.png"
        save_png(path, img[0, 0])
        files.append(str(path))
    lat = out / "latents.ckpt"
    ckpt_io.save(
        lat,
        ckpt_io.Checkpoint(
            "latents",
            {"original": x0, "masked": masked, "mask": m_lat, "generated": gen, "blended": blended},
            json.loads(cfg.to_json()),
            {"scene_seed": req.scene_seed, "prompt": prompt, "mask": req.mask},
        ),
    )
    files.append(str(lat))
    return SampleResponse(files=files, prompt=prompt, warnings=warnings)


# -- evaluation ----------------------------------------------------------------

class EvalRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    checkpoint: str | None = None
    model: Literal["checkpoint", "identity", "untrained"] = "checkpoint"
    label: str | None = None
    out: str
    compare: str | None = None  # another report to pair against
    png_dir: str | None = None


class EvalResponse(BaseModel):
    report: str
    table: str
    aggregate: dict
    paired_table: str | None = None


def run_eval(req: EvalRequest) -> EvalResponse:
    cfg = _cfg(req.config)
    ck_info = None
    if req.model == "identity":
        model = IdentityModel()
    elif req.model == "untrained":
        model = DualBranchModel(cfg.model, len(vocab.VOCAB), cfg.seed)
    else:
        if not req.checkpoint:
            raise UsageError("eval needs --checkpoint unless --identity or --untrained is given")
        model, ck = training.load_model(cfg, req.checkpoint)
        ck_info = {"path": Path(req.checkpoint).name, "sha256": ckpt_io.file_sha256(req.checkpoint), "kind": ck.kind, "step": ck.meta.get("step")}
    label = req.label or req.model
    report = evaluate(model, cfg, checkpoint=ck_info, label=label, png_dir=req.png_dir)
    out = Path(req.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_report(report))
    table = out.with_suffix(".md")
    table.write_text(summary_table(report))
    paired = None
    if req.compare:
        other = load_report(req.compare)
        paired_path = out.with_name(out.stem + "_paired.md")
        paired_path.write_text(paired_table(report, other))
        paired = str(paired_path)
    return EvalResponse(report=str(out), table=str(table), aggregate=report["aggregate"], paired_table=paired)
