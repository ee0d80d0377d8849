"""Dual-branch inpainting network.

A text-conditioned MiniUNet (frozen after pretraining), a trainable brush
branch of self-attention blocks whose features enter every UNet block
through zero-initialised 1x1 convolutions, and a small VGG-style latent
style extractor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .diffusion import LATENT_CHANNELS, ToyVAE
from .errors import DimensionError
from .layers import Attention, Conv2d, Downsample, GroupNorm, Module, ResBlock, TimeEmbedding, Upsample
from .tensor import Rng, Tensor

BRANCH_IN_CHANNELS = 2 * LATENT_CHANNELS + 1


class Level(Module):
    """Residual block followed by an attention block."""

    def __init__(self, res: ResBlock, attn: Attention):
        super().__init__()
        self.res = res
        self.attn = attn


def _t_array(t, batch: int) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim == 0:
        return np.full(batch, int(t))
    if t.shape != (batch,):
        raise DimensionError(f"timesteps shape {t.shape} does not match batch {batch}")
    return t


class MiniUNet(Module):
    """Encoder (3 levels), bottleneck, decoder (3 levels); cross-attention in every block.

    The seven block outputs (3 encoder, bottleneck, 3 decoder) are the layers
    that receive brush-branch features.
    """

    def __init__(self, cfg: ModelConfig, vocab_size: int, rng: Rng):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.cfg = cfg
        self.token_embedding = Tensor(rng.normal((vocab_size, cfg.text_dim), 0.5), requires_grad=True)
        self.pos_embedding = Tensor(rng.normal((cfg.seq_len, cfg.text_dim), 0.1), requires_grad=True)
        self.time = TimeEmbedding(rng, cfg.sin_dim, cfg.temb_dim)
        self.conv_in = Conv2d(rng, LATENT_CHANNELS, w1)
        temb, ctx, heads = cfg.temb_dim, cfg.text_dim, cfg.heads
        self.enc = [Level(ResBlock(rng, c, c, temb), Attention(rng, c, heads, ctx_dim=ctx)) for c in (w1, w2, w3)]
        self.down = [Downsample(rng, w1, w2), Downsample(rng, w2, w3)]
        self.mid = Level(ResBlock(rng, w3, w3, temb), Attention(rng, w3, heads, ctx_dim=ctx))
        self.dec = [Level(ResBlock(rng, 2 * c, c, temb), Attention(rng, c, heads, ctx_dim=ctx)) for c in (w3, w2, w1)]
        self.up = [Upsample(rng, w3, w2), Upsample(rng, w2, w1)]
        self.norm_out = GroupNorm(w1)
        # small output init keeps the initial prediction near zero
        self.conv_out = Conv2d(rng, w1, LATENT_CHANNELS, std=0.01)

    def layer_channels(self) -> list[int]:
        w1, w2, w3 = self.cfg.widths
        return [w1, w2, w3, w3, w3, w2, w1]

    def embed_text(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        return T.embedding(self.token_embedding, tokens) + self.pos_embedding

    def __call__(self, z_t, t, tokens, injections=None, w: float = 1.0) -> Tensor:
        z_t = T.as_tensor(z_t)
        if z_t.ndim != 4 or z_t.shape[1] != LATENT_CHANNELS:
            raise DimensionError(f"UNet input must be (b,4,h,w), got {z_t.shape}")
        b = z_t.shape[0]
        ctx = self.embed_text(tokens)
        if ctx.shape[0] != b:
            raise DimensionError(f"{ctx.shape[0]} prompts for batch of {b}")
        temb = self.time(_t_array(t, b))
        j = 0

        def inject(h):
            nonlocal j
            if injections is not None:
                h = h + injections[j] * w
            j += 1
            return h

        h = self.conv_in(z_t)
        skips = []
        for i, lvl in enumerate(self.enc):
            h = lvl.res(h, temb)
            h = inject(h + lvl.attn.cross_attend(h, ctx))
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        h = self.mid.res(h, temb)
        h = inject(h + self.mid.attn.cross_attend(h, ctx))
        for i, lvl in enumerate(self.dec):
            h = lvl.res(T.concat([h, skips[-1 - i]], axis=1), temb)
            h = inject(h + lvl.attn.cross_attend(h, ctx))
            if i < len(self.up):
                h = self.up[i](h)
        return self.conv_out(T.silu(self.norm_out(h)))


class BrushBranch(Module):
    """Self-attention mirror of the UNet fed with [z_t, z0_masked, mask]."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.cfg = cfg
        temb, heads, kv = cfg.temb_dim, cfg.heads, cfg.max_kv_tokens
        self.time = TimeEmbedding(rng, cfg.sin_dim, cfg.temb_dim)
        self.conv_in = Conv2d(rng, BRANCH_IN_CHANNELS, w1)
        self.enc = [Level(ResBlock(rng, c, c, temb), Attention(rng, c, heads, max_kv_tokens=kv)) for c in (w1, w2, w3)]
        self.down = [Downsample(rng, w1, w2), Downsample(rng, w2, w3)]
        self.mid = Level(ResBlock(rng, w3, w3, temb), Attention(rng, w3, heads, max_kv_tokens=kv))
        self.dec = [
            Level(ResBlock(rng, 2 * w3, w3, temb), Attention(rng, w3, heads, max_kv_tokens=kv)),
            Level(ResBlock(rng, 2 * w2, w2, temb), Attention(rng, w2, heads, max_kv_tokens=kv)),
            # one extra output channel carries the edge map
            Level(ResBlock(rng, 2 * w1, w1, temb), Attention(rng, w1, heads, cout=w1 + 1, max_kv_tokens=kv)),
        ]
        self.up = [Upsample(rng, w3, w2), Upsample(rng, w2, w1)]
        self.zero_convs = [Conv2d(rng, c, c, k=1, zero=True) for c in (w1, w2, w3, w3, w3, w2, w1)]
        self.injection_weight = cfg.injection_weight

    def zero_conv_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("zero_convs.")}


def brush_forward(branch: BrushBranch, z_t, z0_masked, m_resized, t):
    """Injection features (after zero convs, before scaling) and the sigmoid edge map."""
    z_t, z0_masked, m_resized = (T.as_tensor(a) for a in (z_t, z0_masked, m_resized))
    x = T.concat([z_t, z0_masked, m_resized], axis=1)
    if x.shape[1] != BRANCH_IN_CHANNELS:
        raise DimensionError(f"brush input has {x.shape[1]} channels, expected {BRANCH_IN_CHANNELS}")
    b = x.shape[0]
    temb = branch.time(_t_array(t, b))
    raw = []
    h = branch.conv_in(x)
    skips = []
    for i, lvl in enumerate(branch.enc):
        h = lvl.res(h, temb)
        h = h + lvl.attn.self_attend(h)
        raw.append(h)
        skips.append(h)
        if i < len(branch.down):
            h = branch.down[i](h)
    h = branch.mid.res(h, temb)
    h = h + branch.mid.attn.self_attend(h)
    raw.append(h)
    edge_logits = None
    for i, lvl in enumerate(branch.dec):
        h = lvl.res(T.concat([h, skips[-1 - i]], axis=1), temb)
        a = lvl.attn.self_attend(h)
        c = h.shape[1]
        if a.shape[1] > c:
            edge_logits = a[:, c:c + 1]
            a = a[:, :c]
        h = h + a
        raw.append(h)
        if i < len(branch.up):
            h = branch.up[i](h)
    feats = [zc(f) for zc, f in zip(branch.zero_convs, raw)]
    return feats, T.sigmoid(edge_logits)


def dual_forward(unet: MiniUNet, branch: BrushBranch, z_t, z0_masked, m_resized, t, prompt_tokens, w: float | None = None):
    """Predicted noise from the UNet with brush features added to each block output, and the edge map."""
    feats, s_pred = brush_forward(branch, z_t, z0_masked, m_resized, t)
    w = branch.injection_weight if w is None else w
    z_pred = unet(z_t, t, prompt_tokens, injections=feats, w=w)
    return z_pred, s_pred


def init_from_unet(unet: MiniUNet, rng: Rng, cfg: ModelConfig | None = None) -> BrushBranch:
    """Build a brush branch, copying every UNet weight whose name and shape match.

    UNet attention weights are cross-attention and never copied; zero convs
    stay zero; the edge channel of the last output projection is redrawn with
    std ``cfg.edge_head_std``.
    """
    cfg = cfg or unet.cfg
    branch = BrushBranch(cfg, rng)
    source = unet.named_parameters()
    for name, p in branch.named_parameters().items():
        if ".attn." in name or name.startswith("zero_convs."):
            continue
        src = source.get(name)
        if src is not None and src.shape == p.shape:
            p.data = src.data.copy()
    last = branch.dec[-1].attn
    c = last.wo.shape[0]
    last.wo.data[:, c] = rng.normal((c,), cfg.edge_head_std)
    last.bo.data[c] = 0.0
    return branch


class StyleExtractor(Module):
    """Five VGG-like stages; the first conv of each stage is tapped."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        super().__init__()
        stages = []
        cin = LATENT_CHANNELS
        for c in cfg.style_widths:
            stage = Module()
            stage.conv1 = Conv2d(rng, cin, c)
            stage.conv2 = Conv2d(rng, c, c)
            stages.append(stage)
            cin = c
        self.stages = stages

    def __call__(self, latent) -> list[Tensor]:
        return style_features(self, latent)


def style_features(ex: StyleExtractor, latent) -> list[Tensor]:
    """Feature maps at strides 1, 2, 4, 8, 16 relative to the input."""
    x = T.as_tensor(latent)
    if x.ndim != 4 or x.shape[1] != LATENT_CHANNELS:
        raise DimensionError(f"style extractor wants (b,4,h,w), got {x.shape}")
    taps = []
    for i, stage in enumerate(ex.stages):
        if i > 0:
            x = T.avg_pool2d(x, 2)
        tap = stage.conv1(x)
        taps.append(tap)
        x = T.silu(stage.conv2(T.silu(tap)))
    return taps


class DualBranchModel:
    """Frozen UNet + brush branch + style extractor + toy VAE."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int, unet: MiniUNet | None = None):
        rng = Rng(seed)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.vae = ToyVAE()
        self.unet = unet if unet is not None else MiniUNet(cfg, vocab_size, rng.spawn(1))
        self.branch = init_from_unet(self.unet, rng.spawn(2), cfg)
        self.extractor = StyleExtractor(cfg, rng.spawn(3))

    def freeze_unet(self) -> None:
        self.unet.requires_grad_(False)

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {"branch." + k: v for k, v in self.branch.named_parameters().items()}
        out.update({"extractor." + k: v for k, v in self.extractor.named_parameters().items()})
        return out

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        out = {"unet." + k: v.data for k, v in self.unet.named_parameters().items()}
        out.update(self.vae.constants())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"unet." + k: v.data for k, v in self.unet.named_parameters().items()}
        out.update({k: v.data for k, v in self.trainable_parameters().items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, mod in (("unet.", self.unet), ("branch.", self.branch), ("extractor.", self.extractor)):
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            mod.load_arrays(sub)

    def forward(self, z_t, z0_masked, m_resized, t, tokens):
        return dual_forward(self.unet, self.branch, z_t, z0_masked, m_resized, t, tokens)

    def predict_noise(self, z_t, z0_masked, mask, t, tokens) -> np.ndarray:
        with T.no_grad():
            z, _ = self.forward(z_t, z0_masked, mask, t, tokens)
        return z.data


class UNetOnly:
    """Sampling adapter that ignores the brush branch."""

    def __init__(self, unet: MiniUNet):
        self.unet = unet

    def predict_noise(self, z_t, z0_masked, mask, t, tokens) -> np.ndarray:
        with T.no_grad():
            return self.unet(z_t, t, tokens).data
