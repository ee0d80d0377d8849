"""DDPM noising/denoising in a fixed 4-channel latent space, plus blending."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ValidationError
from .tensor import Rng, Tensor

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        beta.setflags(write=False)
        alpha = 1.0 - beta
        alpha.setflags(write=False)
        alpha_bar = np.cumprod(alpha)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_prev(self, t):
        """alpha_bar[t-1], with 1.0 at t = 0."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.maximum(t - 1, 0)], 1.0)

    def check_t(self, t) -> None:
        arr = np.asarray(t)
        if np.any(arr < 0) or np.any(arr >= self.T):
            raise IndexError(f"timestep {t} outside [0, {self.T})")


def make_schedule(T_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule, endpoints included."""
    if T_steps < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"invalid schedule T={T_steps}, beta=[{beta_start}, {beta_end}]")
    if T_steps == 1:
        beta = np.array([beta_start])
    else:
        beta = np.linspace(beta_start, beta_end, T_steps)
    return NoiseSchedule(beta)


def _coef(values: np.ndarray, ndim: int):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    return values.reshape((-1,) + (1,) * (ndim - 1))


def add_noise(x0, eps, t, sched: NoiseSchedule):
    """sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps.

    ``t`` may be an int or one timestep per batch sample. Tensors in give a
    Tensor out; arrays in give an array out.
    """
    sched.check_t(t)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != latent shape {x0.shape}")
    ab = sched.alpha_bar[np.asarray(t)]
    a = _coef(np.sqrt(ab), len(x0.shape))
    b = _coef(np.sqrt(1.0 - ab), len(x0.shape))
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return T.as_tensor(x0) * a + T.as_tensor(eps) * b
    return a * x0 + b * eps


def posterior_mean(x_t, z_pred, t, sched: NoiseSchedule):
    """(x_t - beta[t] / sqrt(1 - alpha_bar[t]) z_pred) / sqrt(alpha[t]); differentiable in both inputs."""
    sched.check_t(t)
    if x_t.shape != z_pred.shape:
        raise DimensionError(f"predicted noise shape {z_pred.shape} != latent shape {x_t.shape}")
    t = np.asarray(t)
    nd = len(x_t.shape)
    k = _coef(sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]), nd)
    inv = _coef(1.0 / np.sqrt(sched.alpha[t]), nd)
    if isinstance(x_t, Tensor) or isinstance(z_pred, Tensor):
        return (T.as_tensor(x_t) - T.as_tensor(z_pred) * k) * inv
    return (x_t - k * z_pred) * inv


def posterior_std(t: int, sched: NoiseSchedule) -> float:
    if t == 0:
        return 0.0
    var = sched.beta[t] * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t])
    return float(np.sqrt(var))


def denoise_step(x_t, z_pred, t: int, sched: NoiseSchedule, rng, deterministic: bool = False):
    """One reverse step; no noise is injected at t = 0 or when ``deterministic``.

    ``rng`` is one Rng for the whole batch or a sequence with one per sample.
    """
    mean = posterior_mean(x_t, z_pred, t, sched)
    if deterministic or t == 0:
        return mean
    sigma = posterior_std(t, sched)
    shape = tuple(x_t.shape)
    if isinstance(rng, Rng):
        noise = rng.normal(shape)
    else:
        if len(rng) != shape[0]:
            raise DimensionError(f"{len(rng)} rng streams for batch of {shape[0]}")
        noise = np.stack([r.normal(shape[1:]) for r in rng])
    if isinstance(mean, Tensor):
        return mean + Tensor(sigma * noise)
    return mean + sigma * noise


# -- toy VAE -----------------------------------------------------------------

_HADAMARD = 0.5 * np.array(
    [[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]]
)


class ToyVAE:
    """Fixed invertible map between 1-channel pixels and 4-channel latents.

    encode: p -> 2p - 1, 2x space-to-depth, then a fixed orthogonal 4x4 mix.
    decode is the exact algebraic inverse.
    """

    def __init__(self):
        self.mixing = _HADAMARD.copy()
        self.mixing.setflags(write=False)

    def constants(self) -> dict[str, np.ndarray]:
        return {"vae.mixing": self.mixing}

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 4 or pixels.shape[1] != 1:
            raise DimensionError(f"encode wants (b,1,H,W) pixels, got {pixels.shape}")
        b, _, H, W = pixels.shape
        if H % 2 or W % 2:
            raise DimensionError(f"pixel size {H}x{W} must be even")
        x = 2.0 * pixels[:, 0] - 1.0
        s2d = x.reshape(b, H // 2, 2, W // 2, 2).transpose(0, 2, 4, 1, 3).reshape(b, 4, H // 2, W // 2)
        return np.einsum("ij,bjhw->bihw", self.mixing, s2d)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 4 or latent.shape[1] != LATENT_CHANNELS:
            raise DimensionError(f"decode wants (b,4,h,w) latents, got {latent.shape}")
        b, _, h, w = latent.shape
        s2d = np.einsum("ji,bjhw->bihw", self.mixing, latent)
        x = s2d.reshape(b, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(b, 1, 2 * h, 2 * w)
        return (x + 1.0) / 2.0


def resize_mask(mask_pixels: np.ndarray, factor: int = 2) -> np.ndarray:
    """Binary max-pool: a latent cell is masked if any of its pixels is."""
    m = np.asarray(mask_pixels, dtype=np.float64)
    b, c, H, W = m.shape
    return m.reshape(b, c, H // factor, factor, W // factor, factor).max(axis=(3, 5))


# -- blending ----------------------------------------------------------------

def _box3(m: np.ndarray) -> np.ndarray:
    pad = np.pad(m, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = m.shape[2:]
    acc = np.zeros_like(m)
    for di in range(3):
        for dj in range(3):
            acc += pad[:, :, di:di + h, dj:dj + w]
    return acc / 9.0


def blend_weight(mask: np.ndarray) -> np.ndarray:
    """mask times its 3x3 box blur: 1 deep inside, fractional on the inner boundary ring, 0 outside."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 4 or m.shape[1] != 1:
        raise DimensionError(f"mask must be (b,1,h,w), got {m.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("blend mask must be binary")
    return m * _box3(m)


def blend(generated: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Composite generated content into the original through a softened mask.

    Pixels outside the mask keep the original bit for bit.
    """
    generated = np.asarray(generated, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if generated.shape != original.shape:
        raise DimensionError(f"blend shapes differ: {generated.shape} vs {original.shape}")
    wgt = blend_weight(mask)
    if wgt.shape[0] != generated.shape[0] or wgt.shape[2:] != generated.shape[2:]:
        raise DimensionError(f"mask {wgt.shape} does not match latent {generated.shape}")
    return wgt * generated + (1.0 - wgt) * original


# -- sampling ----------------------------------------------------------------

class NoisePredictor(Protocol):
    def predict_noise(self, z_t: np.ndarray, z0_masked: np.ndarray, mask: np.ndarray, t: int, tokens: np.ndarray) -> np.ndarray:
        ...


def _streams(rng, batch: int) -> list[Rng]:
    if isinstance(rng, Rng):
        return [rng.spawn(i) for i in range(batch)]
    rng = list(rng)
    if len(rng) != batch:
        raise DimensionError(f"{len(rng)} rng streams for batch of {batch}")
    return rng


def sample(
    model: NoisePredictor,
    masked_latent: np.ndarray,
    mask: np.ndarray,
    prompt_tokens: np.ndarray,
    sched: NoiseSchedule,
    rng: Rng | Sequence[Rng],
) -> np.ndarray:
    """Ancestral DDPM sampling from t = T-1 down to 0.

    ``rng`` may be one stream (split per sample) or one stream per sample, so a
    sample's trajectory does not depend on what else is in the batch.
    """
    masked_latent = np.asarray(masked_latent, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if masked_latent.ndim != 4 or masked_latent.shape[1] != LATENT_CHANNELS:
        raise DimensionError(f"masked latent must be (b,4,h,w), got {masked_latent.shape}")
    b = masked_latent.shape[0]
    if mask.shape != (b, 1) + masked_latent.shape[2:]:
        raise DimensionError(f"mask shape {mask.shape} does not match latent {masked_latent.shape}")
    streams = _streams(rng, b)
    x = np.stack([s.normal(masked_latent.shape[1:]) for s in streams])
    with T.no_grad():
        for t in range(sched.T - 1, -1, -1):
            z = model.predict_noise(x, masked_latent, mask, t, prompt_tokens)
            x = denoise_step(x, z, t, sched, streams)
    return x
