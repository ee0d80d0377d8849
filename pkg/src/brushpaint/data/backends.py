"""Segmenter, captioner and aesthetic-scorer backends.

Each backend is a small request/response interface. In-process mocks are
the defaults; the HTTP clients speak the same JSON shapes as the service.
"""

from __future__ import annotations

import base64
import io
import zlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import DataError
from ..tensor import Rng
from . import rle, vocab
from .scenes import Scene, shape_mask

CAPTION_PROMPT = "Describe the {label} and its style in details"
LEVEL_TOL = 1e-4  # survives a 16-bit PNG round trip


@dataclass
class Detection:
    mask: np.ndarray
    label: str
    bbox: list[int]
    confidence: float

    def to_json(self) -> dict:
        return {"mask_rle": rle.encode(self.mask), "label": self.label, "bbox": self.bbox, "confidence": self.confidence}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(rle.decode(d["mask_rle"]), d["label"], list(d["bbox"]), float(d["confidence"]))


class Segmenter(Protocol):
    def segment(self, scene: Scene) -> list[Detection]: ...


class Captioner(Protocol):
    def caption(self, image: np.ndarray, mask: np.ndarray, label: str) -> str: ...


class AestheticScorer(Protocol):
    def score(self, image_id: str, image: np.ndarray) -> float: ...


# -- image transport -----------------------------------------------------------

def image_to_b64(image: np.ndarray) -> str:
    """(H, W) or (1, 1, H, W) pixels in [0, 1] as a base64 16-bit greyscale PNG."""
    img = np.asarray(image, dtype=np.float64).reshape(np.shape(image)[-2:])
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_from_b64(text: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(base64.b64decode(text))) as im:
            arr = np.asarray(im, dtype=np.float64)
    except Exception as exc:
        raise DataError(f"undecodable image payload: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"expected a greyscale image, got shape {arr.shape}")
    return arr / 65535.0


def _image_seed(image_id: str) -> int:
    return int(image_id) if image_id.isdigit() else zlib.crc32(image_id.encode())


# -- segmenters ----------------------------------------------------------------

_CROSS = ndimage.generate_binary_structure(2, 1)


class MockSegmenter:
    """Ground-truth detections with seeded boundary jitter and confidences.

    With ``perturb`` each mask is dilated, eroded or kept (one pixel, 4-connected)
    and confidence is uniform in [0.3, 1.0]. Without it detections are exact
    with confidence 1.0.
    """

    def __init__(self, seed: int = 0, perturb: bool = True):
        self.seed, self.perturb = seed, perturb

    def segment(self, scene: Scene) -> list[Detection]:
        out = []
        for k, obj in enumerate(scene.objects):
            mask = obj.mask.copy()
            conf = 1.0
            if self.perturb:
                rng = Rng(self.seed).spawn(_image_seed(scene.image_id), k)
                op = rng.integers(0, 3)
                if op == 1:
                    mask = ndimage.binary_dilation(mask, _CROSS)
                elif op == 2:
                    eroded = ndimage.binary_erosion(mask, _CROSS)
                    mask = eroded if eroded.any() else mask
                conf = float(rng.uniform((), 0.3, 1.0))
            out.append(Detection(mask, obj.label, rle.tight_bbox(mask), conf))
        return out


def _frame(img: np.ndarray, width: int = 2) -> np.ndarray:
    f = np.zeros(img.shape, dtype=bool)
    f[:width], f[-width:], f[:, :width], f[:, -width:] = True, True, True, True
    return f


def classify_background(img: np.ndarray) -> str:
    """Background style read from the outer two-pixel frame."""
    top = img[:2]
    if np.ptp(img[_frame(img)]) < LEVEL_TOL:
        return "plain"
    if np.all(np.abs(img[:2] - img[-2:]) < LEVEL_TOL) and np.all(np.abs(top[0] - top[1]) < LEVEL_TOL):
        return "gradient"
    return "checker"


def estimate_background(img: np.ndarray) -> np.ndarray:
    n = img.shape[0]
    kind = classify_background(img)
    if kind == "plain":
        return np.full(img.shape, img[0, 0])
    if kind == "gradient":
        return np.tile(img[0], (n, 1))
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    return np.where(((yy // 8) + (xx // 8)) % 2 == 0, img[0, 0], img[0, 8])


def classify_shape(mask: np.ndarray) -> tuple[str, float]:
    """Best-IoU shape template rendered at the mask's tight box."""
    x0, y0, x1, y1 = rle.tight_bbox(mask)
    s = max(x1 - x0, y1 - y0)
    best, best_iou = vocab.SHAPES[0], -1.0
    for shape in vocab.SHAPES:
        for ds in (0, 1):
            tmpl = shape_mask(shape, x0, y0, s + ds, mask.shape[0])
            iou = (tmpl & mask).sum() / max((tmpl | mask).sum(), 1)
            if iou > best_iou:
                best, best_iou = shape, float(iou)
    return best, best_iou


class PixelSegmenter:
    """Segment from pixels alone: subtract the background model, label components.

    Used behind the HTTP /segment endpoint, where no ground truth travels.
    Confidence is the template IoU of the chosen shape.
    """

    def __init__(self, min_area: int = 16):
        self.min_area = min_area

    def segment_image(self, img: np.ndarray) -> list[Detection]:
        img = np.asarray(img, dtype=np.float64).reshape(np.shape(img)[-2:])
        fg = np.abs(img - estimate_background(img)) > LEVEL_TOL
        fg = ndimage.binary_fill_holes(ndimage.binary_closing(fg, _CROSS, iterations=1) | fg)
        labels, n = ndimage.label(fg)
        out = []
        for i in range(1, n + 1):
            m = labels == i
            if m.sum() < self.min_area:
                continue
            shape, iou = classify_shape(m)
            out.append(Detection(m, shape, rle.tight_bbox(m), round(iou, 6)))
        return out

    def segment(self, scene: Scene) -> list[Detection]:
        return self.segment_image(scene.pixels)


# -- captioners ----------------------------------------------------------------

def _interior(mask: np.ndarray) -> np.ndarray:
    for it in (2, 1):
        inner = ndimage.binary_erosion(mask, _CROSS, iterations=it)
        if inner.sum() >= 4:
            return inner
    return mask


def classify_texture(img: np.ndarray, region: np.ndarray, level: float) -> str:
    d = level - img
    vals = d[region]
    if np.all(np.abs(vals) < LEVEL_TOL):
        return "flat"
    two_level = np.all((np.abs(vals) < LEVEL_TOL) | (np.abs(vals - 0.05) < LEVEL_TOL))
    if not two_level:
        return "noise"
    for r in np.unique(np.nonzero(region)[0]):
        row = d[r][region[r]]
        if np.ptp(row) > LEVEL_TOL:
            return "dots"
    return "stripes"


def describe(img: np.ndarray, mask: np.ndarray) -> dict[str, str]:
    """Colour, texture and background recovered from pixels under ``mask``."""
    img = np.asarray(img, dtype=np.float64).reshape(np.shape(img)[-2:])
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("cannot caption an empty mask")
    region = _interior(mask)
    # texture only darkens, so the brightest cluster marks the base level
    names = [vocab.nearest_color(v) for v in img[region]]
    color = max(set(names), key=lambda c: (names.count(c), c))
    level = vocab.PALETTE[color]
    near = region & (np.abs(img - level + 0.0) <= 0.05 + LEVEL_TOL)
    if near.sum() == 0:
        near = region
    return {"color": color, "texture": classify_texture(img, near, level), "background": classify_background(img)}


class MockCaptioner:
    """Pixel-reading captioner; the label supplies the noun."""

    def __init__(self):
        self.last_prompt: str | None = None

    def caption(self, image: np.ndarray, mask: np.ndarray, label: str) -> str:
        self.last_prompt = CAPTION_PROMPT.format(label=label)
        a = describe(image, mask)
        return vocab.object_caption(a["color"], a["texture"], label, a["background"])


class StubAesthetic:
    """Seeded uniform score in [4.5, 7.5] per image id."""

    def __init__(self, seed: int = 0, low: float = 4.5, high: float = 7.5):
        self.seed, self.low, self.high = seed, low, high

    def score(self, image_id: str, image: np.ndarray | None = None) -> float:
        return float(Rng(self.seed).spawn(_image_seed(image_id), 0xAE5).uniform((), self.low, self.high))


# -- HTTP clients --------------------------------------------------------------

class _Http:
    def __init__(self, base_url: str, timeout: float = 30.0, client=None):
        import httpx

        self.client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self.client.post(path, json=payload)
            resp.raise_for_status()
            return resp.json()
        except Exception as exc:
            raise DataError(f"backend {path} failed: {exc}") from exc


class HttpSegmenter(_Http):
    def segment(self, scene: Scene) -> list[Detection]:
        body = self._post("/segment", {"image_b64": image_to_b64(scene.pixels)})
        return [Detection.from_json(d) for d in body["detections"]]


class HttpCaptioner(_Http):
    def caption(self, image: np.ndarray, mask: np.ndarray, label: str) -> str:
        payload = {"image_b64": image_to_b64(image), "mask_rle": rle.encode(mask), "label": label}
        return self._post("/caption", payload)["caption"]
