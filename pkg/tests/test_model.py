import numpy as np
import pytest

from brushpaint import tensor as T
from brushpaint.errors import DimensionError
from brushpaint.model import (
    BrushBranch,
    DualBranchModel,
    MiniUNet,
    StyleExtractor,
    brush_forward,
    dual_forward,
    init_from_unet,
)
from brushpaint.tensor import Rng, Tensor, grad_check

VOCAB = 30


@pytest.fixture
def model(tiny_model_cfg):
    return DualBranchModel(tiny_model_cfg, VOCAB, seed=0)


def inputs(r, b=2, hw=8, T_steps=100):
    z_t = r.normal((b, 4, hw, hw))
    z0 = r.normal((b, 4, hw, hw))
    m = (r.uniform((b, 1, hw, hw)) < 0.3).astype(float)
    t = r.integers(0, T_steps, size=b)
    tok = r.integers(0, VOCAB, size=(b, 8))
    return z_t, (1 - m) * z0, m, t, tok


def test_unet_output_shape(model, rng):
    z_t, _, _, t, tok = inputs(rng)
    assert model.unet(z_t, t, tok).shape == (2, 4, 8, 8)


def test_unet_rejects_bad_input(model, rng):
    with pytest.raises(DimensionError):
        model.unet(rng.normal((1, 3, 8, 8)), 0, np.zeros((1, 8), dtype=int))
    with pytest.raises(DimensionError):
        model.unet(rng.normal((2, 4, 8, 8)), 0, np.zeros((1, 8), dtype=int))
    with pytest.raises(DimensionError):
        model.unet(rng.normal((2, 4, 8, 8)), np.array([1, 2, 3]), np.zeros((2, 8), dtype=int))


def test_brush_produces_seven_injections_matching_unet(model, rng):
    z_t, z0m, m, t, _ = inputs(rng)
    feats, edge = brush_forward(model.branch, z_t, z0m, m, t)
    assert len(feats) == 7
    assert [f.shape[1] for f in feats] == model.unet.layer_channels()
    assert [f.shape[2] for f in feats] == [8, 4, 2, 2, 2, 4, 8]
    assert edge.shape == (2, 1, 8, 8)


def test_zero_convs_start_at_zero(model, rng):
    assert all(not p.data.any() for p in model.branch.zero_conv_parameters().values())
    feats, _ = brush_forward(model.branch, *inputs(rng)[:4])
    assert all(not f.data.any() for f in feats)


def test_edge_map_in_unit_interval_and_not_constant(model, rng):
    _, edge = brush_forward(model.branch, *inputs(rng)[:4])
    assert edge.data.min() > 0 and edge.data.max() < 1
    assert edge.data.std() > 0


def test_init_transparency_bitwise(model):
    """At init the dual model predicts exactly what the frozen UNet predicts."""
    model.freeze_unet()
    with T.no_grad():
        for i in range(100):
            z_t, z0m, m, t, tok = inputs(Rng(1000 + i), b=1)
            z_pred, _ = dual_forward(model.unet, model.branch, z_t, z0m, m, t, tok)
            assert np.array_equal(z_pred.data, model.unet(z_t, t, tok).data)


def test_nonzero_zero_conv_changes_output(model, rng):
    z_t, z0m, m, t, tok = inputs(rng)
    model.branch.zero_convs[3].bias.data[:] = 0.5
    z_pred, _ = model.forward(z_t, z0m, m, t, tok)
    assert not np.array_equal(z_pred.data, model.unet(z_t, t, tok).data)


def test_injection_weight_zero_is_transparent(model, rng):
    z_t, z0m, m, t, tok = inputs(rng)
    for zc in model.branch.zero_convs:
        zc.bias.data[:] = 1.0
    z_pred, _ = dual_forward(model.unet, model.branch, z_t, z0m, m, t, tok, w=0.0)
    assert np.array_equal(z_pred.data, model.unet(z_t, t, tok).data)


def test_init_from_unet_copies_matching_weights(tiny_model_cfg):
    unet = MiniUNet(tiny_model_cfg, VOCAB, Rng(5))
    branch = init_from_unet(unet, Rng(6))
    src = unet.named_parameters()
    copied = 0
    for name, p in branch.named_parameters().items():
        if ".attn." in name or name.startswith("zero_convs."):
            continue
        if name in src and src[name].shape == p.shape:
            assert np.array_equal(p.data, src[name].data) and p.data is not src[name].data
            copied += 1
    assert copied > 10
    # the edge column of the final projection is fresh
    c = branch.dec[-1].attn.wo.shape[0]
    assert branch.dec[-1].attn.wo.data[:, c].any()


def test_branch_input_channel_check(model, rng):
    z = rng.normal((1, 4, 8, 8))
    with pytest.raises(DimensionError):
        brush_forward(model.branch, z, z, np.zeros((1, 2, 8, 8)), 0)


def test_brush_branch_is_self_attention_only(tiny_model_cfg):
    branch = BrushBranch(tiny_model_cfg, Rng(0))
    names = branch.named_parameters()
    # self-attention keys/values are projected from the feature map, not text
    assert all(names[k].shape[0] == names[k.replace(".wk", ".wq")].shape[0] for k in names if k.endswith(".wk"))


def test_style_extractor_taps(tiny_model_cfg, rng):
    ex = StyleExtractor(tiny_model_cfg, Rng(0))
    taps = ex(rng.normal((2, 4, 32, 32)))
    assert [tp.shape[-1] for tp in taps] == [32, 16, 8, 4, 2]
    assert [tp.shape[1] for tp in taps] == list(tiny_model_cfg.style_widths)
    with pytest.raises(DimensionError):
        ex(rng.normal((1, 3, 32, 32)))


def test_freeze_and_trainable_split(model):
    model.freeze_unet()
    assert all(not p.requires_grad for p in model.unet.parameters())
    trainable = model.trainable_parameters()
    assert all(k.startswith(("branch.", "extractor.")) for k in trainable)
    assert all(p.requires_grad for p in trainable.values())
    assert "vae.mixing" in model.frozen_arrays()


def test_frozen_unet_gets_no_gradient(model, rng):
    model.freeze_unet()
    z_t, z0m, m, t, tok = inputs(rng)
    z_pred, s_pred = model.forward(z_t, z0m, m, t, tok)
    (T.tsum(z_pred * z_pred) + T.tsum(s_pred)).backward()
    assert all(p.grad is None for p in model.unet.parameters())
    assert model.branch.zero_convs[0].weight.grad is not None


def test_state_roundtrip(tiny_model_cfg, model, rng):
    other = DualBranchModel(tiny_model_cfg, VOCAB, seed=9)
    other.load_state_arrays(model.state_arrays())
    z_t, z0m, m, t, tok = inputs(rng)
    a, _ = model.forward(z_t, z0m, m, t, tok)
    b, _ = other.forward(z_t, z0m, m, t, tok)
    assert np.array_equal(a.data, b.data)


def test_same_seed_same_model(tiny_model_cfg):
    a = DualBranchModel(tiny_model_cfg, VOCAB, seed=3).state_arrays()
    b = DualBranchModel(tiny_model_cfg, VOCAB, seed=3).state_arrays()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_branch_gradients_numeric(tiny_model_cfg, rng):
    cfg = tiny_model_cfg.model_copy(update={"widths": [2, 2, 2], "heads": 1})
    m = DualBranchModel(cfg, VOCAB, seed=1)
    for zc in m.branch.zero_convs:
        zc.weight.data[:] = 0.1
    m.freeze_unet()
    z_t, z0m, mk, t, tok = inputs(rng, b=1, hw=4)
    params = [m.branch.zero_convs[2].weight, m.branch.dec[-1].attn.wo]

    def loss(*_):
        z, s = m.forward(z_t, z0m, mk, t, tok)
        return T.tsum(z * z) + T.tsum(s * s)

    assert grad_check(loss, params) < 1e-4
