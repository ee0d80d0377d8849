"""Parameter containers and the building blocks shared by all networks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


class Module:
    """Holds parameters and submodules; names follow attribute paths."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = [k for k in params if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name in arrays:
                src = np.asarray(arrays[name], dtype=np.float64)
                if src.shape != p.shape:
                    raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
                p.data = src.copy()


def _normal(rng: Rng, shape, std: float, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(tuple(shape), std), requires_grad=requires_grad)


class Conv2d(Module):
    def __init__(self, rng: Rng, cin: int, cout: int, k: int = 3, stride: int = 1, zero: bool = False, std: float | None = None):
        super().__init__()
        self.stride, self.padding = stride, k // 2
        if zero:
            self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
        else:
            self.weight = _normal(rng, (cout, cin, k, k), std if std is not None else 1.0 / math.sqrt(cin * k * k))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng: Rng, cin: int, cout: int):
        super().__init__()
        self.weight = _normal(rng, (cin, cout), 1.0 / math.sqrt(cin))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 2):
        super().__init__()
        self.groups = groups
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding, (b,) -> (b, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class TimeEmbedding(Module):
    def __init__(self, rng: Rng, sin_dim: int, dim: int):
        super().__init__()
        self.sin_dim = sin_dim
        self.fc1 = Linear(rng, sin_dim, dim)
        self.fc2 = Linear(rng, dim, dim)

    def __call__(self, t: np.ndarray) -> Tensor:
        e = Tensor(timestep_embedding(t, self.sin_dim))
        return self.fc2(T.silu(self.fc1(e)))


class ResBlock(Module):
    def __init__(self, rng: Rng, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(rng, cin, cout)
        self.temb = Linear(rng, temb_dim, cout)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout)
        self.skip = Conv2d(rng, cin, cout, k=1) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        b, c = h.shape[:2]
        h = h + T.reshape(self.temb(T.silu(temb)), (b, c, 1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return (x if self.skip is None else self.skip(x)) + h


class Attention(Module):
    """Projections for self- or cross-attention; ``cout`` may exceed ``c``."""

    def __init__(
        self,
        rng: Rng,
        c: int,
        heads: int,
        ctx_dim: int | None = None,
        cout: int | None = None,
        max_kv_tokens: int | None = None,
    ):
        super().__init__()
        self.max_kv_tokens = max_kv_tokens
        kv_in = c if ctx_dim is None else ctx_dim
        cout = c if cout is None else cout
        self.heads = heads
        self.norm_gamma = Tensor(np.ones(c), requires_grad=True)
        self.norm_beta = Tensor(np.zeros(c), requires_grad=True)
        self.wq = _normal(rng, (c, c), 1.0 / math.sqrt(c))
        self.bq = Tensor(np.zeros(c), requires_grad=True)
        self.wk = _normal(rng, (kv_in, c), 1.0 / math.sqrt(kv_in))
        self.bk = Tensor(np.zeros(c), requires_grad=True)
        self.wv = _normal(rng, (kv_in, c), 1.0 / math.sqrt(kv_in))
        self.bv = Tensor(np.zeros(c), requires_grad=True)
        self.wo = _normal(rng, (c, cout), 1.0 / math.sqrt(c))
        self.bo = Tensor(np.zeros(cout), requires_grad=True)

    def weights(self) -> dict:
        return dict(self._params)

    def self_attend(self, x: Tensor) -> Tensor:
        pool = 1
        h, w = x.shape[2:]
        if self.max_kv_tokens:
            while (h // pool) * (w // pool) > self.max_kv_tokens and h % (2 * pool) == 0 and w % (2 * pool) == 0:
                pool *= 2
        return T.self_attention(x, self.heads, self._params, kv_pool=pool)

    def cross_attend(self, x: Tensor, context: Tensor) -> Tensor:
        return T.cross_attention(x, context, self.heads, self._params)


class Downsample(Module):
    def __init__(self, rng: Rng, cin: int, cout: int):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, rng: Rng, cin: int, cout: int):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest2d(x, 2))
