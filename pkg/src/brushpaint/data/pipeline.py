"""Two-stage mask/caption annotation with quality filters.

Stage one segments each image into (mask, label, bbox, confidence); stage
two captions each surviving mask. Filters run in the order resolution,
aesthetic, confidence. Output is JSONL sorted by (image_id, bbox) with a
JSON schema and a metadata file alongside.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import jsonschema

from ..errors import SchemaError
from . import rle
from .backends import CAPTION_PROMPT, AestheticScorer, Captioner, Segmenter
from .scenes import Scene

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1

RECORD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "AnnotationRecord",
    "version": DATASET_SCHEMA_VERSION,
    "description": (
        "One mask per line. mask.counts is a row-major run-length encoding of the "
        "binary mask of shape mask.size = [H, W]: alternating runs of 0 and 1, "
        "starting with a (possibly empty) run of 0. bbox is [x0, y0, x1, y1] with "
        "exclusive upper corner."
    ),
    "type": "object",
    "additionalProperties": False,
    "required": ["image_id", "mask", "label", "bbox", "confidence", "caption"],
    "properties": {
        "image_id": {"type": "string", "minLength": 1},
        "mask": {
            "type": "object",
            "additionalProperties": False,
            "required": ["size", "counts"],
            "properties": {
                "size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2},
            },
        },
        "label": {"type": "string", "minLength": 1},
        "bbox": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 4, "maxItems": 4},
        "confidence": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "caption": {"type": "string", "minLength": 1},
    },
}


@dataclass(frozen=True)
class Thresholds:
    min_confidence: float = 0.6
    min_aesthetic: float = 5.8
    min_resolution: int = 64


@dataclass
class AnnotateStats:
    images: int = 0
    dropped_resolution: int = 0
    dropped_aesthetic: int = 0
    detections: int = 0
    dropped_confidence: int = 0
    records: int = 0
    failures: list[str] = field(default_factory=list)
    completed: bool = True

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["failures"] = list(self.failures)
        return d


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def validate_record(rec: dict) -> None:
    try:
        jsonschema.validate(rec, RECORD_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"record violates schema: {exc.message}") from exc


def sidecar_paths(out: Path) -> dict[str, Path]:
    out = Path(out)
    return {
        "meta": out.with_name(out.name + ".meta.json"),
        "schema": out.with_name(out.name + ".schema.json"),
        "progress": out.with_name(out.name + ".progress.json"),
        "partial": out.with_name(out.name + ".partial.jsonl"),
    }


def annotate_scene(
    scene: Scene,
    segmenter: Segmenter,
    captioner: Captioner,
    aesthetic: AestheticScorer,
    th: Thresholds,
    stats: AnnotateStats,
) -> list[dict]:
    stats.images += 1
    h, w = scene.pixels.shape[-2:]
    if min(h, w) < th.min_resolution:
        stats.dropped_resolution += 1
        return []
    if not aesthetic.score(scene.image_id, scene.pixels) > th.min_aesthetic:
        stats.dropped_aesthetic += 1
        return []
    records = []
    for det in segmenter.segment(scene):
        stats.detections += 1
        if not det.confidence > th.min_confidence:
            stats.dropped_confidence += 1
            continue
        caption = captioner.caption(scene.pixels, det.mask, det.label)
        rec = {
            "image_id": scene.image_id,
            "mask": rle.encode(det.mask),
            "label": det.label,
            "bbox": [int(v) for v in det.bbox],
            "confidence": float(det.confidence),
            "caption": caption,
        }
        validate_record(rec)
        records.append(rec)
    return records


def _sort_key(rec: dict):
    return rec["image_id"], rec["bbox"]


def annotate_corpus(
    scenes: Iterable[Scene],
    segmenter: Segmenter,
    captioner: Captioner,
    aesthetic: AestheticScorer,
    out: str | Path,
    thresholds: Thresholds = Thresholds(),
    extra_meta: dict | None = None,
    stop_after: int | None = None,
) -> AnnotateStats:
    """Annotate every scene and write ``out`` plus its sidecars.

    Progress is checkpointed after each image, so an interrupted run (or one
    cut short by ``stop_after``) resumes where it stopped and produces the
    same bytes as an uninterrupted run.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    side = sidecar_paths(out)
    done: set[str] = set()
    stats = AnnotateStats()
    if side["progress"].exists() and side["partial"].exists():
        prog = json.loads(side["progress"].read_text())
        done = set(prog["done"])
        stats = AnnotateStats(**{**prog["stats"], "failures": list(prog["stats"]["failures"])})
        log.info("resuming annotation with %d images already done", len(done))
    else:
        side["partial"].write_text("")
    processed = 0
    with side["partial"].open("a") as partial:
        for scene in scenes:
            if scene.image_id in done:
                continue
            if stop_after is not None and processed >= stop_after:
                stats.completed = False
                return stats
            try:
                recs = annotate_scene(scene, segmenter, captioner, aesthetic, thresholds, stats)
            except Exception as exc:  # one bad image must not sink the corpus
                log.warning("annotation failed for %s: %s", scene.image_id, exc)
                stats.failures.append(scene.image_id)
                recs = []
            for rec in recs:
                partial.write(dumps_record(rec) + "\n")
            partial.flush()
            done.add(scene.image_id)
            processed += 1
            side["progress"].write_text(json.dumps({"done": sorted(done), "stats": stats.to_json()}))
    records = [json.loads(line) for line in side["partial"].read_text().splitlines() if line]
    records.sort(key=_sort_key)
    stats.records = len(records)
    out.write_text("".join(dumps_record(r) + "\n" for r in records))
    side["schema"].write_text(json.dumps(RECORD_SCHEMA, indent=2, sort_keys=True) + "\n")
    meta = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "thresholds": {
            "min_confidence": thresholds.min_confidence,
            "min_aesthetic": thresholds.min_aesthetic,
            "min_resolution": thresholds.min_resolution,
        },
        "filter_order": ["resolution", "aesthetic", "confidence"],
        "caption_prompt": CAPTION_PROMPT,
        "stats": stats.to_json(),
        **(extra_meta or {}),
    }
    side["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    side["progress"].unlink()
    side["partial"].unlink()
    return stats


def read_records(path: str | Path, validate: bool = True) -> list[dict]:
    """Load a JSONL dataset, checking the schema version in its metadata when present."""
    path = Path(path)
    meta = sidecar_paths(path)["meta"]
    if meta.exists():
        version = json.loads(meta.read_text()).get("schema_version")
        if version != DATASET_SCHEMA_VERSION:
            raise SchemaError(f"dataset schema_version {version} unsupported (want {DATASET_SCHEMA_VERSION})")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{n}: not JSON ({exc})") from exc
        if validate:
            validate_record(rec)
        records.append(rec)
    return records
