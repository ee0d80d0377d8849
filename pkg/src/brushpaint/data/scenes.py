"""Synthetic grey-level scenes with exact per-object ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..errors import ConfigError, DataError
from ..tensor import Rng
from . import vocab
from .rle import tight_bbox

IMAGE_SIZE = 64
MARGIN = 3
GAP = 2
MIN_SIZE, MAX_SIZE = 12, 24
TEXTURE_AMPLITUDE = 0.05
NOISE_AMPLITUDE = 0.04
MAX_TRIES = 100


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    texture: str
    x: int
    y: int
    size: int

    def box(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.x + self.size, self.y + self.size


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    background: str
    bg_levels: tuple[float, float]
    objects: tuple[ObjectSpec, ...] = ()
    size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.background not in vocab.BACKGROUNDS:
            raise DataError(f"unknown background {self.background!r}")
        for o in self.objects:
            if o.shape not in vocab.SHAPES or o.color not in vocab.PALETTE or o.texture not in vocab.TEXTURES:
                raise DataError(f"object attributes outside the vocabulary: {o}")


@dataclass
class TruthObject:
    mask: np.ndarray
    label: str
    bbox: list[int]
    color: str
    texture: str
    shape: str
    background: str

    @property
    def caption(self) -> str:
        return vocab.object_caption(self.color, self.texture, self.shape, self.background)


@dataclass
class Scene:
    image_id: str
    spec: SceneSpec
    pixels: np.ndarray  # (1, 1, H, W)
    objects: list[TruthObject] = field(default_factory=list)

    @property
    def caption(self) -> str:
        return vocab.scene_caption(self.spec.objects, self.spec.background)


def _overlaps(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return not (a[2] + GAP <= b[0] or b[2] + GAP <= a[0] or a[3] + GAP <= b[1] or b[3] + GAP <= a[1])


def _try_sample(rng: Rng, n_objects: int, size: int) -> SceneSpec | None:
    background = vocab.BACKGROUNDS[rng.integers(0, len(vocab.BACKGROUNDS))]
    levels = vocab.BACKGROUND_LEVELS
    i = rng.integers(0, len(levels))
    j = (i + 1 + rng.integers(0, len(levels) - 1)) % len(levels)
    bg_levels = (levels[i], levels[j])
    colors = list(vocab.PALETTE)
    objects: list[ObjectSpec] = []
    for _ in range(n_objects):
        for _attempt in range(MAX_TRIES):
            s = rng.integers(MIN_SIZE, min(MAX_SIZE, size - 2 * MARGIN) + 1)
            x = rng.integers(MARGIN, size - MARGIN - s + 1)
            y = rng.integers(MARGIN, size - MARGIN - s + 1)
            box = (x, y, x + s, y + s)
            if not any(_overlaps(box, o.box()) for o in objects):
                break
        else:
            return None
        objects.append(
            ObjectSpec(
                shape=vocab.SHAPES[rng.integers(0, len(vocab.SHAPES))],
                color=colors[rng.integers(0, len(colors))],
                texture=vocab.TEXTURES[rng.integers(0, len(vocab.TEXTURES))],
                x=x,
                y=y,
                size=s,
            )
        )
    return SceneSpec(seed=rng.integers(0, 2**31), background=background, bg_levels=bg_levels, objects=tuple(objects), size=size)


def sample_scene_spec(seed: int, min_objects: int = 1, max_objects: int = 3, size: int = IMAGE_SIZE) -> SceneSpec:
    """Draw a scene; a failed placement retries from a derived seed with one object fewer (down to ``min_objects``)."""
    if size < MIN_SIZE + 2 * MARGIN:
        raise ConfigError(f"image size {size} cannot hold a {MIN_SIZE}px object")
    rng = Rng(seed)
    n = rng.integers(min_objects, max_objects + 1)
    while True:
        spec = _try_sample(rng, n, size)
        if spec is not None:
            return spec
        rng = rng.spawn(0x5EED)
        n = max(n - 1, min_objects)


def shape_mask(shape: str, x: int, y: int, s: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterise by pixel-centre inclusion inside the s x s box at (x, y)."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        m = (xx >= x) & (xx < x + s) & (yy >= y) & (yy < y + s)
    elif shape == "circle":
        r = s / 2.0
        m = (xx - (x + r)) ** 2 + (yy - (y + r)) ** 2 <= r * r
    elif shape == "triangle":
        depth = yy - y
        m = (depth >= 0) & (depth <= s) & (np.abs(xx - (x + s / 2.0)) <= depth / 2.0)
    else:
        raise DataError(f"unknown shape {shape!r}")
    return m


def analytic_area(shape: str, s: int) -> float:
    return {"square": float(s * s), "circle": math.pi * (s / 2.0) ** 2, "triangle": s * s / 2.0}[shape]


def analytic_perimeter(shape: str, s: int) -> float:
    return {"square": 4.0 * s, "circle": math.pi * s, "triangle": s * (1.0 + math.sqrt(5.0))}[shape]


def _background(spec: SceneSpec) -> np.ndarray:
    n = spec.size
    a, b = spec.bg_levels
    if spec.background == "plain":
        return np.full((n, n), a)
    if spec.background == "gradient":
        ramp = a + (b - a) * (np.arange(n) / (n - 1))
        return np.tile(ramp, (n, 1))
    yy, xx = np.mgrid[0:n, 0:n]
    return np.where(((yy // 8) + (xx // 8)) % 2 == 0, a, b)


def _texture(texture: str, level: float, size: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if texture == "flat":
        return np.full((size, size), level)
    if texture == "stripes":
        return np.where((yy // 2) % 2 == 1, level - TEXTURE_AMPLITUDE, level)
    if texture == "dots":
        dot = np.isin(yy % 4, (1, 2)) & np.isin(xx % 4, (1, 2))
        return np.where(dot, level - TEXTURE_AMPLITUDE, level)
    return level + rng.uniform((size, size), -NOISE_AMPLITUDE, NOISE_AMPLITUDE)


def generate_scene(spec: SceneSpec, image_id: str = "") -> Scene:
    """Render pixels in [0, 1] with shape (1, 1, H, W) and the exact object records."""
    img = _background(spec)
    rng = Rng(spec.seed)
    objects = []
    for k, o in enumerate(spec.objects):
        m = shape_mask(o.shape, o.x, o.y, o.size, spec.size)
        tex = _texture(o.texture, vocab.PALETTE[o.color], spec.size, rng.spawn(k))
        img = np.where(m, tex, img)
        objects.append(
            TruthObject(
                mask=m,
                label=o.shape,
                bbox=tight_bbox(m),
                color=o.color,
                texture=o.texture,
                shape=o.shape,
                background=spec.background,
            )
        )
    pixels = np.clip(img, 0.0, 1.0)[None, None]
    return Scene(image_id=image_id, spec=spec, pixels=pixels, objects=objects)


class Corpus:
    """Indexed, deterministic scene collection; scene i derives from (seed, i)."""

    def __init__(self, seed: int, size: int, min_objects: int = 1, max_objects: int = 3, image_size: int = IMAGE_SIZE):
        self.seed, self.size = seed, size
        self.min_objects, self.max_objects, self.image_size = min_objects, max_objects, image_size
        self._scene = lru_cache(maxsize=4096)(self._build)

    def image_id(self, i: int) -> str:
        return f"{i:06d}"

    def index_of(self, image_id: str) -> int:
        try:
            i = int(image_id)
        except ValueError:
            raise DataError(f"malformed image id {image_id!r}") from None
        if not 0 <= i < self.size:
            raise DataError(f"image id {image_id!r} not in corpus of {self.size}")
        return i

    def _build(self, i: int) -> Scene:
        seed = Rng(self.seed).spawn(i).state
        spec = sample_scene_spec(seed, self.min_objects, self.max_objects, self.image_size)
        return generate_scene(spec, self.image_id(i))

    def scene(self, i: int) -> Scene:
        if not 0 <= i < self.size:
            raise DataError(f"scene index {i} outside corpus of {self.size}")
        return self._scene(i)

    def by_id(self, image_id: str) -> Scene:
        return self.scene(self.index_of(image_id))

    def __len__(self) -> int:
        return self.size

    def __iter__(self):
        return (self.scene(i) for i in range(self.size))
