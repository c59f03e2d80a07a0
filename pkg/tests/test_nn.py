import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkflow.autograd import Adam, Tensor
from talkflow.autograd.gradcheck import END_TO_END_TOL, _end_to_end_case
from talkflow.errors import ConfigError, ShapeError
from talkflow.nn import (
    Linear, LoRALinear, Transformer, TransformerConfig, VelocityModel, frame_window, inject_lora, lora_forward,
    merge_all_lora, merge_lora, sinusoidal_positions, time_embed, transformer_forward,
)


def test_lora_zero_init_is_identity(rng):
    base = Linear(6, 5, rng)
    ad = LoRALinear(base, 3, rng)
    x = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(ad.B.data, 0.0)
    assert np.array_equal(lora_forward(x, ad).data, base(x).data)


def test_lora_matches_dense_merge_at_full_rank(rng):
    base = Linear(5, 4, rng)
    ad = LoRALinear(base, 4, rng, alpha=2.0)
    ad.A.data = rng.standard_normal(ad.A.shape)
    ad.B.data = rng.standard_normal(ad.B.shape)
    x = rng.standard_normal((7, 5))
    dense = x @ (base.weight.data + 0.5 * ad.B.data @ ad.A.data).T + base.bias.data
    y = lora_forward(x, ad).data
    assert np.abs(y - dense).max() / np.abs(dense).max() < 1e-12


def test_merge_equivalence_on_random_inputs(rng):
    ad = LoRALinear(Linear(8, 6, rng), 2, rng)
    ad.B.data = rng.standard_normal(ad.B.shape)
    merged = merge_lora(ad)
    x = rng.standard_normal((100, 8))
    assert np.abs(merged(x).data - ad(x).data).max() < 1e-12


def test_merge_of_zero_adapter_is_base(rng):
    base = Linear(4, 3, rng)
    merged = merge_lora(LoRALinear(base, 2, rng))
    np.testing.assert_array_equal(merged.weight.data, base.weight.data)
    np.testing.assert_array_equal(merged.bias.data, base.bias.data)


def test_merge_then_reinject_keeps_forward(rng):
    cfg = TransformerConfig(hidden=8, layers=1, heads=2, head_size=4)
    model = VelocityModel(3, 2, cfg, rng)
    inject_lora(model, 2, rng)
    for p in model.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    x, t = rng.standard_normal((5, 3)), 0.3
    before = model(x, t).data
    merge_all_lora(model)
    inject_lora(model, 2, rng)
    np.testing.assert_allclose(model(x, t).data, before, rtol=0, atol=1e-12)


def test_base_frozen_through_adam_step(rng):
    ad = LoRALinear(Linear(4, 4, rng), 2, rng)
    w0, b0 = ad.base.weight.data.copy(), ad.base.bias.data.copy()
    opt = Adam(ad.parameters())
    assert len(opt.params) == 2
    for _ in range(3):
        opt.zero_grad()
        (ad(rng.standard_normal((3, 4))) ** 2).mean().backward()
        opt.step()
    assert np.array_equal(ad.base.weight.data, w0) and np.array_equal(ad.base.bias.data, b0)
    assert not np.array_equal(ad.B.data, 0.0)


@pytest.mark.parametrize("rank", [0, 5, 9])
def test_lora_rank_bounds(rng, rank):
    with pytest.raises(ConfigError):
        LoRALinear(Linear(5, 4, rng), rank, rng)


def test_transformer_config_invariant():
    with pytest.raises(ConfigError):
        TransformerConfig(hidden=64, heads=4, head_size=8)


def test_transformer_forward_shape_and_width(rng):
    cfg = TransformerConfig(hidden=16, layers=2, heads=2, head_size=8)
    tr = Transformer(cfg, rng)
    seq = rng.standard_normal((11, 16))
    assert transformer_forward(seq, tr).shape == (11, 16)
    with pytest.raises(ShapeError):
        transformer_forward(rng.standard_normal((11, 15)), tr)


def test_zero_weights_give_identical_frames(rng):
    cfg = TransformerConfig(hidden=8, layers=2, heads=2, head_size=4)
    model = VelocityModel(5, 8, cfg, rng)
    for name, p in model.named_tensors():
        if name.endswith("bias"):
            p.data[:] = rng.standard_normal(p.shape)
        else:
            p.data[:] = 0.0
    out = model(rng.standard_normal((6, 5)), 0.3).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6))
def test_frame_swap_commutes_without_positions(i, j):
    rng = np.random.default_rng(3)
    model = VelocityModel(4, 3, TransformerConfig(hidden=8, layers=2, heads=2, head_size=4), rng, use_pos=False)
    x = rng.standard_normal((7, 4))
    perm = np.arange(7)
    perm[[i, j]] = perm[[j, i]]
    np.testing.assert_allclose(model(x[perm], 0.4).data, model(x, 0.4).data[perm], atol=1e-12)


def test_end_to_end_velocity_gradient():
    assert _end_to_end_case(np.random.default_rng(0)) < END_TO_END_TOL


def test_time_embed_contract():
    e0 = time_embed(0.0, 16)
    np.testing.assert_array_equal(e0[:8], 0.0)
    np.testing.assert_array_equal(e0[8:], 1.0)
    grid = np.round(np.arange(0, 1.0, 1e-3), 10)
    emb = time_embed(grid, 16)
    assert (np.abs(np.diff(emb, axis=0)).max(axis=1) > 1e-6).all()
    np.testing.assert_array_equal(time_embed(0.37, 16), time_embed(0.37, 16))
    with pytest.raises(ValueError):
        time_embed(1.5, 16)


def test_velocity_model_shapes(rng):
    cfg = TransformerConfig(hidden=8, layers=1, heads=2, head_size=4)
    model = VelocityModel(5, 3, cfg, rng, max_len=10, in_window=(2, 1))
    assert model(rng.standard_normal((2, 9, 5)), np.array([0.1, 0.9])).shape == (2, 9, 3)
    assert model(rng.standard_normal((9, 5)), 0.5).shape == (9, 3)
    with pytest.raises(ShapeError):
        model(rng.standard_normal((2, 11, 5)), 0.5)
    with pytest.raises(ShapeError):
        model(rng.standard_normal((2, 9, 4)), 0.5)


def test_frame_window_layout(rng):
    x = rng.standard_normal((1, 5, 2))
    w = frame_window(Tensor(x), 2, 1).data
    assert w.shape == (1, 5, 8)
    np.testing.assert_array_equal(w[0, 3, 0:2], x[0, 1])  # block 0 = frame t-2
    np.testing.assert_array_equal(w[0, 3, 4:6], x[0, 3])  # block 2 = frame t
    np.testing.assert_array_equal(w[0, 4, 6:8], 0.0)  # past the end


def test_sinusoidal_positions_distinct():
    pe = sinusoidal_positions(256, 16)
    d = np.abs(pe[:, None] - pe[None]).max(-1)
    assert (d[~np.eye(256, dtype=bool)] > 1e-3).all()


def test_state_dict_roundtrip(rng):
    cfg = TransformerConfig(hidden=8, layers=1, heads=2, head_size=4)
    a = VelocityModel(3, 2, cfg, np.random.default_rng(1))
    b = VelocityModel(3, 2, cfg, np.random.default_rng(2))
    b.load_state_dict(a.state_dict())
    x = rng.standard_normal((4, 3))
    assert np.array_equal(a(x, 0.2).data, b(x, 0.2).data)
    bad = a.state_dict()
    bad["in_proj.weight"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        b.load_state_dict(bad)
