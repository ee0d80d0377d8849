import json

import numpy as np
import pytest

from brushpaint import checkpoint as ck
from brushpaint import training
from brushpaint.data.batch import build_batch
from brushpaint.data.pipeline import read_records
from brushpaint.errors import FreezeViolation, NumericError
from brushpaint.tensor import Rng, Tensor, grad_check


def adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Scalar Adam written out step by step."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return x


def test_adam_matches_oracle():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = training.Adam({"g": ({"p": p}, 0.01)})
    grads = [0.5, -1.0, 2.0, 0.1]
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    assert abs(p.data[0] - adam_oracle(grads, 0.01)) < 1e-15


def test_adam_first_step_is_lr_sign():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = training.Adam({"g": ({"p": p}, 0.1)})
    p.grad = np.array([3.0, -0.002])
    opt.step()
    assert np.allclose(p.data, [0.9, 1.1], atol=1e-6)


def test_adam_group_learning_rates_and_skip():
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    c = Tensor(np.zeros(1), requires_grad=True)
    opt = training.Adam({"x": ({"a": a, "c": c}, 1e-3), "y": ({"b": b}, 1e-1)})
    a.grad, b.grad = np.ones(1), np.ones(1)
    opt.step()
    assert np.isclose(a.data[0], -1e-3) and np.isclose(b.data[0], -1e-1) and c.data[0] == 0.0


def test_adam_state_roundtrip():
    p = Tensor(np.array([0.3]), requires_grad=True)
    opt = training.Adam({"g": ({"p": p}, 0.05)})
    for g in (1.0, -2.0):
        p.grad = np.array([g])
        opt.step()
    q = Tensor(p.data.copy(), requires_grad=True)
    opt2 = training.Adam({"g": ({"p": q}, 0.05)})
    opt2.load_state_arrays(opt.state_arrays(), opt.t)
    p.grad = q.grad = np.array([0.7])
    opt.step()
    opt2.step()
    assert p.data[0] == q.data[0]


def test_moving_average():
    assert np.allclose(training.moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    assert training.moving_average([1.0, 3.0], 50).tolist() == [2.0]


# -- stage 0 ----------------------------------------------------------------------


@pytest.fixture
def base(tiny_run_cfg, tmp_path):
    return training.pretrain(tiny_run_cfg, tmp_path / "s0")


def test_pretrain_initial_loss_scale(tiny_run_cfg, tmp_path):
    res = training.pretrain(tiny_run_cfg, tmp_path / "p", steps=1)
    # the near-zero output init predicts no noise, so the per-sample loss is ||eps||^2 over 4*32*32 entries
    assert abs(res.history[0]["noise"] - 4096) < 0.5 * 4096


def test_pretrain_writes_checkpoints_and_log(base, tmp_path):
    c = ck.load(base.checkpoint)
    assert c.kind == "base" and c.meta["step"] == 3
    assert any(k.startswith("adam.m.") for k in c.arrays)
    assert (tmp_path / "s0" / "base_step2.ckpt").exists()
    rows = [json.loads(line) for line in (tmp_path / "s0" / "pretrain_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2]


def test_pretrain_resume_is_exact(tiny_run_cfg, base, tmp_path):
    res = training.pretrain(tiny_run_cfg, tmp_path / "s0", resume=tmp_path / "s0" / "base_step2.ckpt")
    assert ck.file_sha256(res.checkpoint) == ck.file_sha256(base.checkpoint)
    rows = (tmp_path / "s0" / "pretrain_log.jsonl").read_text().splitlines()
    assert [json.loads(r)["step"] for r in rows] == [0, 1, 2]


# -- stage 1 ----------------------------------------------------------------------


def test_train_resume_is_exact(tiny_run_cfg, base, tmp_path):
    full = training.train(tiny_run_cfg, base.checkpoint, tmp_path / "a")
    again = training.train(tiny_run_cfg, base.checkpoint, tmp_path / "a", resume=tmp_path / "a" / "full_step2.ckpt")
    assert ck.file_sha256(full.checkpoint) == ck.file_sha256(again.checkpoint)
    assert [h["total"] for h in again.history] == [full.history[-1]["total"]]


def test_train_is_deterministic(tiny_run_cfg, base, tmp_path):
    a = training.train(tiny_run_cfg, base.checkpoint, tmp_path / "a")
    b = training.train(tiny_run_cfg, base.checkpoint, tmp_path / "b", annotations=tmp_path / "a" / "annotations.jsonl")
    assert ck.file_sha256(a.checkpoint) == ck.file_sha256(b.checkpoint)


def test_train_keeps_unet_frozen(tiny_run_cfg, base, tmp_path):
    res = training.train(tiny_run_cfg, base.checkpoint, tmp_path / "a")
    full = ck.load(res.checkpoint)
    before = ck.load(base.checkpoint)
    for k, v in before.arrays.items():
        if k.startswith("unet."):
            assert ck.array_digest(full.arrays[k]) == ck.array_digest(v)
    assert full.meta["base_sha256"] == ck.file_sha256(base.checkpoint)
    assert set(full.meta["frozen_digests"]) >= {"vae.mixing"}
    # the branch did move
    m0 = training.build_model(tiny_run_cfg, base.checkpoint)
    assert any(not np.array_equal(full.arrays[k], v.data) for k, v in m0.trainable_parameters().items())


def test_freeze_audit_catches_edit(tiny_run_cfg, base):
    model = training.build_model(tiny_run_cfg, base.checkpoint)
    ref = training.digests(model.frozen_arrays())
    training.freeze_audit(model, ref, 0)
    model.unet.conv_out.bias.data = model.unet.conv_out.bias.data + 1e-12
    with pytest.raises(FreezeViolation):
        training.freeze_audit(model, ref, 1)


def test_freeze_audit_catches_requires_grad(tiny_run_cfg, base):
    model = training.build_model(tiny_run_cfg, base.checkpoint)
    ref = training.digests(model.frozen_arrays())
    model.unet.conv_in.weight.requires_grad = True
    with pytest.raises(FreezeViolation):
        training.freeze_audit(model, ref, 0)


def test_nan_aborts_with_diagnostics(tiny_run_cfg, base, tmp_path):
    model = training.build_model(tiny_run_cfg, base.checkpoint)
    model.branch.zero_convs[0].bias.data[:] = np.nan
    arrays = model.state_arrays()
    bad = tmp_path / "bad.ckpt"
    training.save_full(bad, tiny_run_cfg, model, training.make_optimizer(model, tiny_run_cfg), 0)
    with pytest.raises(NumericError) as err:
        training.train(tiny_run_cfg, base.checkpoint, tmp_path / "n", resume=bad)
    assert err.value.exit_code == 3 and err.value.diagnostics["step"] == 0
    assert np.isnan(arrays["branch.zero_convs.0.bias"]).all()


def test_load_model_kinds(tiny_run_cfg, base, tmp_path):
    m, c = training.load_model(tiny_run_cfg, base.checkpoint)
    assert c.kind == "base" and all(not p.requires_grad for p in m.unet.parameters())
    res = training.train(tiny_run_cfg, base.checkpoint, tmp_path / "a", steps=1)
    m2, c2 = training.load_model(tiny_run_cfg, res.checkpoint)
    assert c2.kind == "full"
    full = ck.load(res.checkpoint).arrays
    assert all(np.array_equal(v, full[k]) for k, v in m2.state_arrays().items())


def test_full_objective_gradient(tiny_run_cfg, base, tmp_path):
    """Composite loss backward through dual_forward and style_pair against finite differences."""
    cfg = tiny_run_cfg.with_overrides({"model.widths": [2, 2, 2], "model.heads": 1, "optim.batch_size": 2})
    model = training.build_model(cfg, None)
    for zc in model.branch.zero_convs:
        zc.weight.data[:] = Rng(0).normal(zc.weight.shape, 0.1)
    annotations = training.ensure_annotations(cfg, tmp_path)
    corpus = training._corpus(cfg)
    batch = build_batch(read_records(annotations), corpus, 2, "mixed", Rng(5), cfg.schedule.T)
    batch.t[:] = [3, 7]
    # shrink to 16x16 latents (the deepest style tap needs stride 16) so finite differences stay cheap
    for name in ("x0", "mask", "masked", "edge", "eps"):
        setattr(batch, name, getattr(batch, name)[..., :16, :16].copy())
    sched = training._schedule(cfg)
    params = [model.branch.zero_convs[1].weight, model.branch.dec[-1].attn.wo, model.extractor.stages[0].conv1.weight]
    err = grad_check(lambda *_: training.compute_losses(model, batch, sched, cfg)[0], params, max_elements=40)
    assert err < 1e-4
