"""Stage-0 UNet pretraining and stage-1 dual-branch training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import vocab
from .data.backends import MockCaptioner, MockSegmenter, StubAesthetic
from .data.batch import build_batch
from .data.pipeline import Thresholds, annotate_corpus, read_records
from .data.scenes import Corpus
from .diffusion import NoiseSchedule, ToyVAE, add_noise, make_schedule
from .errors import FreezeViolation, NumericError, UsageError
from .losses import LossWeights, noise_loss, structure_loss, style_loss, style_pair, total_loss
from .model import DualBranchModel, MiniUNet, style_features
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

# stream keys for per-step randomness; step s draws from Rng(seed).spawn(key, s)
PRETRAIN_STREAM = 0xBA5E
TRAIN_STREAM = 0x7EA1


class Adam:
    """Adam with per-group learning rates and bias correction."""

    def __init__(self, groups: dict[str, tuple[dict[str, Tensor], float]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for params, _ in groups.values():
            for name, p in params.items():
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for params, _ in self.groups.values():
            out.update(params)
        return out

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for params, lr in self.groups.values():
            for name, p in params.items():
                if p.grad is None:
                    continue
                g = p.grad
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)
        self.t = int(t)


@dataclass
class RunResult:
    checkpoint: Path
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _corpus(cfg: RunConfig) -> Corpus:
    c = cfg.corpus
    return Corpus(c.seed, c.size, c.min_objects, c.max_objects, c.image_size)


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def _append_log(path: Path, row: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _truncate_log(path: Path, start: int) -> None:
    """Keep only rows logged before ``start`` so a resumed run does not duplicate steps."""
    if not path.exists():
        path.write_text("")
        return
    rows = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < start]
    path.write_text("".join(r + "\n" for r in rows))


def _check_loss(loss: Tensor, step: int, parts: dict) -> None:
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss at step {step}", {"step": step, **parts})


def _check_grads(params: dict[str, Tensor], step: int) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name} at step {step}", {"step": step, "param": name})


# -- stage 0 -------------------------------------------------------------------

def pretrain_batch(corpus: Corpus, rng: Rng, batch_size: int, T_steps: int, vae: ToyVAE, seq_len: int):
    idx = [rng.integers(0, len(corpus)) for _ in range(batch_size)]
    scenes = [corpus.scene(i) for i in idx]
    x0 = vae.encode(np.concatenate([s.pixels for s in scenes]))
    tokens = np.stack([vocab.tokenize(s.caption, seq_len) for s in scenes])
    t = rng.integers(0, T_steps, size=(batch_size,))
    eps = rng.normal(x0.shape)
    return x0, tokens, t, eps


def new_unet(cfg: RunConfig) -> MiniUNet:
    # same stream DualBranchModel uses, so either path builds the same UNet
    return MiniUNet(cfg.model, len(vocab.VOCAB), Rng(cfg.seed).spawn(1))


def pretrain(
    cfg: RunConfig,
    workdir: str | Path,
    steps: int | None = None,
    resume: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> RunResult:
    """Train the MiniUNet alone on the noise loss with whole-scene captions."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    steps = cfg.optim.pretrain_steps if steps is None else steps
    corpus, sched, vae = _corpus(cfg), _schedule(cfg), ToyVAE()
    unet = new_unet(cfg)
    params = unet.named_parameters()
    opt = Adam({"unet": (params, cfg.optim.lr_pretrain)}, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.adam_eps)
    start = 0
    log_path = workdir / "pretrain_log.jsonl"
    if resume is not None:
        ck = ckpt_io.load(resume)
        unet.load_arrays({k[5:]: v for k, v in ck.arrays.items() if k.startswith("unet.")})
        start = int(ck.meta["step"])
        opt.load_state_arrays(ck.arrays, start)
    _truncate_log(log_path, start)
    history = []
    t0 = time.perf_counter()
    for step in range(start, steps):
        rng = Rng(cfg.seed).spawn(PRETRAIN_STREAM, step)
        x0, tokens, t, eps = pretrain_batch(corpus, rng, cfg.optim.batch_size, sched.T, vae, cfg.model.seq_len)
        x_t = add_noise(x0, eps, t, sched)
        loss = noise_loss(unet(x_t, t, tokens), eps, cfg.losses.reduction)
        _check_loss(loss, step, {"noise": loss.item()})
        loss.backward()
        _check_grads(params, step)
        opt.step()
        opt.zero_grad()
        row = {"step": step, "noise": loss.item(), "seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        _append_log(log_path, row)
        if on_step:
            on_step(row)
        if step % cfg.optim.log_every == 0:
            log.info("pretrain step %d noise %.3f", step, row["noise"])
        if cfg.optim.checkpoint_every and (step + 1) % cfg.optim.checkpoint_every == 0 and step + 1 < steps:
            _save_base(workdir / f"base_step{step + 1}.ckpt", cfg, unet, opt, step + 1)
    path = workdir / "base.ckpt"
    _save_base(path, cfg, unet, opt, steps)
    return RunResult(path, history, time.perf_counter() - t0)


def _save_base(path: Path, cfg: RunConfig, unet: MiniUNet, opt: Adam, step: int) -> str:
    arrays = {"unet." + k: v.data for k, v in unet.named_parameters().items()}
    arrays.update(opt.state_arrays())
    meta = {"step": step, "stage": "pretrain", "vocab": list(vocab.VOCAB)}
    return ckpt_io.save(path, ckpt_io.Checkpoint("base", arrays, json.loads(cfg.to_json()), meta))


def load_unet(cfg: RunConfig, path: str | Path) -> MiniUNet:
    ck = ckpt_io.load(path)
    unet = new_unet(cfg)
    unet.load_arrays({k[5:]: v for k, v in ck.arrays.items() if k.startswith("unet.")})
    return unet


# -- stage 1 -------------------------------------------------------------------

def digests(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: ckpt_io.array_digest(v) for k, v in arrays.items()}


def freeze_audit(model: DualBranchModel, reference: dict[str, str], step: int) -> None:
    """Frozen weights must hash to their initial digests and carry no gradient."""
    now = digests(model.frozen_arrays())
    changed = sorted(k for k in reference if now.get(k) != reference[k])
    if changed or set(now) != set(reference):
        raise FreezeViolation(f"frozen weights changed at step {step}: {changed[:5]}")
    stray = [k for k, p in model.unet.named_parameters().items() if p.grad is not None or p.requires_grad]
    if stray:
        raise FreezeViolation(f"frozen UNet weights are collecting gradients at step {step}: {stray[:5]}")


def ensure_annotations(cfg: RunConfig, workdir: Path) -> Path:
    """Annotate the training corpus with the mock backends unless already done."""
    path = workdir / "annotations.jsonl"
    if not path.exists():
        a = cfg.annotate
        annotate_corpus(
            _corpus(cfg),
            MockSegmenter(cfg.corpus.seed, a.perturb),
            MockCaptioner(),
            StubAesthetic(cfg.corpus.seed),
            path,
            Thresholds(a.min_confidence, a.min_aesthetic, a.min_resolution),
            extra_meta={"corpus": {"seed": cfg.corpus.seed, "size": cfg.corpus.size}},
        )
    return path


def compute_losses(model: DualBranchModel, batch, sched: NoiseSchedule, cfg: RunConfig, step: int | None = None):
    """Forward one batch; returns (total, parts) with parts as floats."""
    red = cfg.losses.reduction
    w = LossWeights(cfg.losses.gamma, cfg.losses.delta, cfg.losses.eta)
    x_t = add_noise(batch.x0, batch.eps, batch.t, sched)
    z_pred, s_pred = model.forward(x_t, batch.masked, batch.mask, batch.t, batch.tokens)
    l_noise = noise_loss(z_pred, batch.eps, red)
    l_struct = structure_loss(s_pred, batch.edge, red)
    sel = np.nonzero(batch.t >= 1)[0]
    if w.delta != 0.0 and len(sel):
        x_prev, target = style_pair(x_t[sel], z_pred[sel], batch.x0[sel], batch.eps[sel], batch.t[sel], sched)
        l_style = style_loss(style_features(model.extractor, x_prev), style_features(model.extractor, target), red)
    else:
        l_style = Tensor(np.array(0.0))
    total = total_loss(l_noise, l_style, l_struct, w, step)
    parts = {"noise": l_noise.item(), "style": l_style.item(), "structure": l_struct.item(), "total": total.item()}
    return total, parts


def build_model(cfg: RunConfig, base: str | Path | None) -> DualBranchModel:
    unet = load_unet(cfg, base) if base is not None else None
    model = DualBranchModel(cfg.model, len(vocab.VOCAB), cfg.seed, unet=unet)
    model.freeze_unet()
    return model


def make_optimizer(model: DualBranchModel, cfg: RunConfig) -> Adam:
    tp = model.trainable_parameters()
    groups = {
        "branch": ({k: v for k, v in tp.items() if k.startswith("branch.")}, cfg.optim.lr_branch),
        "extractor": ({k: v for k, v in tp.items() if k.startswith("extractor.")}, cfg.optim.lr_style),
    }
    return Adam(groups, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.adam_eps)


def save_full(path: Path, cfg: RunConfig, model: DualBranchModel, opt: Adam | None, step: int, extra: dict | None = None) -> str:
    arrays = dict(model.state_arrays())
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = {"step": step, "stage": "train", "vocab": list(vocab.VOCAB), **(extra or {})}
    return ckpt_io.save(path, ckpt_io.Checkpoint("full", arrays, json.loads(cfg.to_json()), meta))


def load_model(cfg: RunConfig, path: str | Path) -> tuple[DualBranchModel, ckpt_io.Checkpoint]:
    """Rebuild a DualBranchModel from a base or full checkpoint."""
    ck = ckpt_io.load(path)
    if ck.kind == "base":
        model = build_model(cfg, path)
    elif ck.kind == "full":
        model = DualBranchModel(cfg.model, len(vocab.VOCAB), cfg.seed)
        model.load_state_arrays({k: v for k, v in ck.arrays.items() if not k.startswith("adam.")})
        model.freeze_unet()
    else:
        raise UsageError(f"checkpoint kind {ck.kind!r} cannot be loaded as a model")
    return model, ck


def train(
    cfg: RunConfig,
    base: str | Path,
    workdir: str | Path,
    steps: int | None = None,
    annotations: str | Path | None = None,
    resume: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> RunResult:
    """Freeze the UNet and fit brush branch + style extractor on the composite loss."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    steps = cfg.optim.train_steps if steps is None else steps
    corpus, sched = _corpus(cfg), _schedule(cfg)
    records = read_records(annotations or ensure_annotations(cfg, workdir))
    model = build_model(cfg, base)
    opt = make_optimizer(model, cfg)
    trainable = opt.parameters()
    if set(trainable) != set(model.trainable_parameters()):
        raise UsageError("optimizer parameter set differs from the trainable set")
    start = 0
    log_path = workdir / "train_log.jsonl"
    if resume is not None:
        ck = ckpt_io.load(resume)
        model.load_state_arrays({k: v for k, v in ck.arrays.items() if not k.startswith("adam.")})
        start = int(ck.meta["step"])
        opt.load_state_arrays(ck.arrays, start)
    _truncate_log(log_path, start)
    reference = digests(model.frozen_arrays())
    base_hash = ckpt_io.file_sha256(base)
    history = []
    t0 = time.perf_counter()
    for step in range(start, steps):
        rng = Rng(cfg.seed).spawn(TRAIN_STREAM, step)
        batch = build_batch(
            records, corpus, cfg.optim.batch_size, "mixed", rng, sched.T, cfg.optim.object_fraction, cfg.model.seq_len, model.vae
        )
        total, parts = compute_losses(model, batch, sched, cfg, step)
        _check_loss(total, step, parts)
        total.backward()
        _check_grads(trainable, step)
        opt.step()
        opt.zero_grad()
        row = {"step": step, **parts, "seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        _append_log(log_path, row)
        if on_step:
            on_step(row)
        if step % cfg.optim.log_every == 0:
            log.info("train step %d total %.3f noise %.3f style %.5f structure %.3f", step, parts["total"], parts["noise"], parts["style"], parts["structure"])
        if cfg.optim.audit_every and (step + 1) % cfg.optim.audit_every == 0:
            freeze_audit(model, reference, step + 1)
        if cfg.optim.checkpoint_every and (step + 1) % cfg.optim.checkpoint_every == 0 and step + 1 < steps:
            save_full(workdir / f"full_step{step + 1}.ckpt", cfg, model, opt, step + 1, {"base_sha256": base_hash})
    freeze_audit(model, reference, steps)
    path = workdir / "full.ckpt"
    save_full(path, cfg, model, opt, steps, {"base_sha256": base_hash, "frozen_digests": reference})
    return RunResult(path, history, time.perf_counter() - t0)


def moving_average(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
