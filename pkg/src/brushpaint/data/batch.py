"""Training batch assembly: latents, masks, edge targets, prompts, noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..diffusion import ToyVAE, resize_mask
from ..errors import DataError
from ..losses import edge_target
from ..tensor import Rng
from . import rle, vocab
from .scenes import Corpus

MASK_POLICIES = ("object", "random", "mixed")


@dataclass
class TrainBatch:
    image_ids: list[str]
    kinds: list[str]  # "object" or "random" per sample
    captions: list[str]
    pixels: np.ndarray  # (b, 1, H, W)
    mask_pixels: np.ndarray  # (b, 1, H, W)
    x0: np.ndarray  # (b, 4, h, w)
    mask: np.ndarray  # (b, 1, h, w)
    masked: np.ndarray  # (1 - mask) * x0
    edge: np.ndarray  # (b, 1, h, w)
    tokens: np.ndarray  # (b, seq_len)
    t: np.ndarray  # (b,)
    eps: np.ndarray  # (b, 4, h, w)

    def __len__(self) -> int:
        return len(self.image_ids)


def _segment_distance(px: np.ndarray, py: np.ndarray, a, b) -> np.ndarray:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def brush_mask(rng: Rng, size: int = 64) -> np.ndarray:
    """Union of 1-4 thick polylines (2-4 vertices, thickness 3-7 px)."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 5)):
        n = rng.integers(2, 5)
        pts = rng.uniform((n, 2), 4.0, size - 4.0)
        half = rng.integers(3, 8) / 2.0
        for a, b in zip(pts[:-1], pts[1:]):
            mask |= _segment_distance(xx, yy, a, b) <= half
    return mask


def build_batch(
    records: Sequence[dict],
    corpus: Corpus,
    batch_size: int,
    mask_policy: str,
    rng: Rng,
    T_steps: int,
    object_fraction: float = 0.5,
    seq_len: int = vocab.SEQ_LEN,
    vae: ToyVAE | None = None,
) -> TrainBatch:
    """Draw one batch. Object masks prompt with the mask caption, random masks with the scene caption."""
    if mask_policy not in MASK_POLICIES:
        raise DataError(f"mask_policy must be one of {MASK_POLICIES}, got {mask_policy!r}")
    if len(corpus) == 0:
        raise DataError("empty corpus")
    if mask_policy != "random" and not records:
        raise DataError(f"mask_policy {mask_policy!r} needs annotation records")
    vae = vae or ToyVAE()
    ids, kinds, captions, pix, masks = [], [], [], [], []
    for _ in range(batch_size):
        kind = mask_policy
        if kind == "mixed":
            kind = "object" if rng.random() < object_fraction else "random"
        if kind == "object":
            rec = records[rng.integers(0, len(records))]
            scene = corpus.by_id(rec["image_id"])
            m = rle.decode(rec["mask"])
            if m.shape != scene.pixels.shape[-2:]:
                raise DataError(f"record mask {m.shape} does not fit image {rec['image_id']}")
            caption = rec["caption"]
        else:
            scene = corpus.scene(rng.integers(0, len(corpus)))
            m = brush_mask(rng, scene.pixels.shape[-1])
            caption = scene.caption
        ids.append(scene.image_id)
        kinds.append(kind)
        captions.append(caption)
        pix.append(scene.pixels[0])
        masks.append(m[None].astype(np.float64))
    pixels = np.stack(pix)
    mask_pixels = np.stack(masks)
    x0 = vae.encode(pixels)
    h, w = x0.shape[2:]
    mask = resize_mask(mask_pixels, pixels.shape[-1] // w)
    t = rng.integers(0, T_steps, size=(batch_size,))
    eps = rng.normal(x0.shape)
    return TrainBatch(
        image_ids=ids,
        kinds=kinds,
        captions=captions,
        pixels=pixels,
        mask_pixels=mask_pixels,
        x0=x0,
        mask=mask,
        masked=(1.0 - mask) * x0,
        edge=edge_target(pixels, h, w),
        tokens=np.stack([vocab.tokenize(c, seq_len) for c in captions]),
        t=t,
        eps=eps,
    )
