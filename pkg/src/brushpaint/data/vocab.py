"""Closed vocabularies for scenes and captions, and the toy tokenizer."""

from __future__ import annotations

import re

import numpy as np

# grey levels spaced 0.12 apart so texture modulation (<= 0.05) never
# crosses into a neighbouring colour
PALETTE: dict[str, float] = {
    "black": 0.05,
    "navy": 0.17,
    "red": 0.29,
    "green": 0.41,
    "orange": 0.53,
    "pink": 0.65,
    "yellow": 0.77,
    "white": 0.89,
}
# display colours for PNG dumps only
PALETTE_RGB: dict[str, tuple[int, int, int]] = {
    "black": (20, 20, 20),
    "navy": (20, 30, 120),
    "red": (200, 30, 30),
    "green": (30, 150, 50),
    "orange": (240, 140, 20),
    "pink": (240, 150, 190),
    "yellow": (240, 220, 40),
    "white": (235, 235, 235),
}
SHAPES = ("square", "circle", "triangle")
TEXTURES = ("flat", "stripes", "dots", "noise")
TEXTURE_WORDS = {"flat": "flat", "stripes": "striped", "dots": "dotted", "noise": "noisy"}
BACKGROUNDS = ("plain", "gradient", "checker")
# background levels sit between palette levels
BACKGROUND_LEVELS = tuple(round(v + 0.06, 2) for v in list(PALETTE.values())[:-1])

PAD, UNK = "<pad>", "<unk>"
VOCAB: tuple[str, ...] = (
    PAD,
    UNK,
    "a",
    "on",
    "and",
    "background",
    *PALETTE,
    *SHAPES,
    *TEXTURE_WORDS.values(),
    *BACKGROUNDS,
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
SEQ_LEN = 8


def words(caption: str) -> list[str]:
    return re.sub(r"[,.;:!?]", " ", caption.lower()).split()


def tokenize(caption: str, seq_len: int = SEQ_LEN) -> np.ndarray:
    """Fixed-length id sequence; unknown words map to <unk>, short captions pad with <pad>."""
    ids = [TOKEN_ID.get(w, TOKEN_ID[UNK]) for w in words(caption)][:seq_len]
    ids += [TOKEN_ID[PAD]] * (seq_len - len(ids))
    return np.array(ids, dtype=np.int64)


def detokenize(ids) -> str:
    return " ".join(VOCAB[int(i)] for i in ids if int(i) != TOKEN_ID[PAD])


def unknown_words(caption: str) -> list[str]:
    return [w for w in words(caption) if w not in TOKEN_ID]


def nearest_color(level: float) -> str:
    return min(PALETTE, key=lambda name: abs(PALETTE[name] - level))


def object_caption(color: str, texture: str, shape: str, background: str) -> str:
    return f"a {color} {TEXTURE_WORDS[texture]} {shape} on {background} background"


def scene_caption(objects, background: str) -> str:
    parts = [f"{o.color} {o.shape}" for o in objects]
    if not parts:
        return f"{background} background"
    return " ".join(parts) + f" on {background} background"


def caption_attributes(caption: str) -> dict[str, str]:
    """Colour, texture, shape and background words found in a caption (first occurrence)."""
    out: dict[str, str] = {}
    inv_tex = {v: k for k, v in TEXTURE_WORDS.items()}
    for w in words(caption):
        if w in PALETTE and "color" not in out:
            out["color"] = w
        elif w in SHAPES and "shape" not in out:
            out["shape"] = w
        elif w in inv_tex and "texture" not in out:
            out["texture"] = inv_tex[w]
        elif w in BACKGROUNDS and "background" not in out:
            out["background"] = w
    return out
