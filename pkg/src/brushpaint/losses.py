"""Training objectives: edge targets, structure/noise/style losses, composite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, add_noise, posterior_mean
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor, pool_sum

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
# largest gradient magnitude reachable for pixel values in [0, 1]
SOBEL_MAX = 4.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    delta: float = 100.0
    eta: float = 0.1

    def __post_init__(self):
        if min(self.gamma, self.delta, self.eta) < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


def sobel(image) -> np.ndarray:
    """Normalised Sobel gradient magnitude of a (b,1,H,W) luminance image.

    Reflect padding keeps the output size; dividing by 4*sqrt(2) maps
    inputs in [0, 1] to [0, 1]. Each kernel is applied as weighted
    differences of opposite taps, so a constant image gives exactly zero.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 4 or img.shape[1] != 1:
        raise DimensionError(f"sobel wants (b,1,H,W) luminance, got {img.shape}; convert to luminance first")
    h, w = img.shape[2:]
    if h < 2 or w < 2:
        raise DimensionError(f"sobel needs at least 2x2 pixels for reflect padding, got {h}x{w}")
    p = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")

    def tap(i, j):
        return p[..., i:i + h, j:j + w]

    gx = (tap(0, 2) - tap(0, 0)) + 2.0 * (tap(1, 2) - tap(1, 0)) + (tap(2, 2) - tap(2, 0))
    gy = (tap(2, 0) - tap(0, 0)) + 2.0 * (tap(2, 1) - tap(0, 1)) + (tap(2, 2) - tap(0, 2))
    return np.sqrt(gx * gx + gy * gy) / SOBEL_MAX


def edge_target(image_pixels, latent_h: int, latent_w: int) -> np.ndarray:
    """Sobel edges average-pooled down to latent resolution."""
    edges = sobel(image_pixels)
    H, W = edges.shape[2:]
    if latent_h <= 0 or latent_w <= 0 or H % latent_h or W % latent_w:
        raise ConfigError(f"pixel size {H}x{W} is not an integer multiple of {latent_h}x{latent_w}")
    kh, kw = H // latent_h, W // latent_w
    if kh == 1 and kw == 1:
        return edges
    return pool_sum(edges, kh, kw) / (kh * kw)


def _batch_frobenius(a, b, reduction: str) -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"loss inputs differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    if reduction == "mean":
        return T.mean(d * d)
    sq = d * d
    per_sample = T.tsum(T.reshape(sq, (sq.shape[0], -1)), axis=1)
    return T.mean(per_sample)


def structure_loss(s_pred, s_target, reduction: str = "frobenius") -> Tensor:
    """Batch mean of squared Frobenius norms between predicted and target edge maps."""
    return _batch_frobenius(s_pred, s_target, reduction)


def noise_loss(z_pred, z_true, reduction: str = "frobenius") -> Tensor:
    return _batch_frobenius(z_pred, z_true, reduction)


def gram(feature) -> Tensor:
    """Per-sample F F^T / (c h w) for the c x (h w) unfolding F."""
    feature = T.as_tensor(feature)
    b, c, h, w = feature.shape
    f = T.reshape(feature, (b, c, h * w))
    return T.matmul(f, T.transpose(f, (0, 2, 1))) * (1.0 / (c * h * w))


def style_loss(alphas: Sequence, betas: Sequence, reduction: str = "frobenius") -> Tensor:
    """Mean over batch and taps of ||G(alpha) - G(beta)||_F^2."""
    if len(alphas) != len(betas):
        raise ConfigError(f"style tap count mismatch: {len(alphas)} vs {len(betas)}")
    if not alphas:
        raise ConfigError("style_loss needs at least one tap")
    total = None
    for a, b in zip(alphas, betas):
        a, b = T.as_tensor(a), T.as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"style tap shapes differ: {a.shape} vs {b.shape}")
        term = _batch_frobenius(gram(a), gram(b), reduction)
        total = term if total is None else total + term
    return total * (1.0 / len(alphas))


def style_pair(x_t, z_pred, x0, eps, t, sched: NoiseSchedule):
    """(X_{t-1}, target X~_{t-1}).

    X_{t-1} is the noise-free posterior mean from the predicted noise, so it
    stays differentiable in ``z_pred``; the target re-noises ``x0`` to t-1 with
    the same ``eps`` that produced ``x_t``.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1):
        raise ValueError("style_pair needs t >= 1; drop t = 0 samples from the style loss")
    x_prev = posterior_mean(x_t, z_pred, t_arr, sched)
    x0_d = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    eps_d = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    target = add_noise(x0_d, eps_d, t_arr - 1, sched)
    return T.as_tensor(x_prev), Tensor(target)


def total_loss(l_noise, l_style, l_structure, w: LossWeights, step: int | None = None) -> Tensor:
    """gamma * noise + delta * style + eta * structure."""
    parts = {"noise": l_noise, "style": l_style, "structure": l_structure}
    vals = {k: (v.item() if isinstance(v, Tensor) else float(v)) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise NumericError(f"non-finite loss component at step {step}", {"step": step, **vals})
    out = T.as_tensor(l_noise) * w.gamma
    if w.delta != 0.0:
        out = out + T.as_tensor(l_style) * w.delta
    if w.eta != 0.0:
        out = out + T.as_tensor(l_structure) * w.eta
    return out
