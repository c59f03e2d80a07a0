import numpy as np
import pytest

from talkflow.autograd import Tensor, l1_loss
from talkflow.errors import ConfigError, ShapeError
from talkflow.sd_hybrid import (
    GRID, GRID_C, AdaptConfig, GenericRenderer, PretrainConfig, ablation_csv, ablation_eval, extract_patches,
    init_inversion, motion_features, pretrain_generic, reconstruction_l1, render, sd_hybrid_adapt, split_clip,
)
from talkflow.synthbench import gen_identity_world


@pytest.fixture(scope="module")
def small_world():
    return gen_identity_world(52, 12, np.random.default_rng(4))


def _snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_patches_and_motion_features(rng):
    img = rng.uniform(size=(32, 32))
    p = extract_patches(img)
    assert p.shape == (1, GRID * GRID, 16)
    # cell (1, 1) covers rows/cols 1..4 of the image (pad 1, stride 2)
    np.testing.assert_array_equal(p[0, GRID + 1].reshape(4, 4), img[1:5, 1:5])
    np.testing.assert_array_equal(motion_features([0.0, 0.25]), [[0, 0, 0], [0.25, 0.0625, 0.5]])
    with pytest.raises(ValueError):
        motion_features(1.5)
    with pytest.raises(ShapeError):
        extract_patches(np.zeros((30, 30)))


def test_pretraining_needs_fifty_identities(small_world):
    with pytest.raises(ConfigError):
        pretrain_generic(small_world, PretrainConfig(steps=1, n_train=49))


def test_pretraining_is_reproducible(small_world):
    a = pretrain_generic(small_world, PretrainConfig(steps=5, batch=4, seed=2))[1]
    b = pretrain_generic(small_world, PretrainConfig(steps=5, batch=4, seed=2))[1]
    assert a == b


def test_pretrained_renderer_generalises(pretrained, identity_world):
    renderer, losses = pretrained
    train = reconstruction_l1(renderer, identity_world, range(50))
    held = reconstruction_l1(renderer, identity_world, range(50, 56))
    assert held < 0.15
    assert train <= held
    assert np.mean(losses[-100:]) < 0.5 * np.mean(losses[:100])


def test_init_inversion_copies_encoder_output(small_world):
    r = GenericRenderer(1)
    frame = small_world.frames[0, 0]
    grid = init_inversion(r, frame)
    assert grid.trainable and grid.grid.shape == (GRID, GRID, GRID_C)
    for m in (0.0, 0.3, 1.0):
        direct = r.decoder(r.encoder(frame), m).data
        assert np.array_equal(r.decoder(grid.grid, m).data, direct)
    loss = l1_loss(r.decoder(grid.grid, 0.5), np.zeros((1, 32, 32)))
    loss.backward()
    assert np.abs(grid.grid.grad).sum() > 0.0
    with pytest.raises(ShapeError):
        init_inversion(r, np.zeros((16, 16)))


def test_zero_iterations_reproduce_generic_render(small_world):
    r = GenericRenderer(1)
    frames, conds = small_world.frames[51], small_world.conditions[51]
    res = sd_hybrid_adapt(r, frames, conds, AdaptConfig(iters=0))
    expected = r(np.repeat(frames[:1], len(conds), axis=0), conds).data
    assert np.array_equal(render(res, conds), expected)


@pytest.mark.parametrize("components", [("inversion", "lora"), ("inversion",), ("lora",)])
def test_adaptation_leaves_base_untouched(small_world, components):
    r = GenericRenderer(1)
    enc, dec = _snapshot(r.encoder), _snapshot(r.decoder)
    res = sd_hybrid_adapt(r, small_world.frames[50], small_world.conditions[50],
                          AdaptConfig(components=components, iters=30))
    assert _same(_snapshot(r.encoder), enc) and _same(_snapshot(r.decoder), dec)
    adapted = res.decoder.state_dict()
    for ad in res.adapters():
        assert ad.A.shape[0] == 4
    for k, v in dec.items():
        # the adapted copy's frozen base weights stay bitwise equal to the generic decoder
        layer, name = k.split(".")
        key = f"{layer}.base.{name}" if res.adapters() else k
        assert np.array_equal(adapted[key], v)
    assert ("lora" in components) == bool(res.adapters())
    start = init_inversion(r, small_world.frames[50, 0]).grid.data
    assert ("inversion" in components) == (not np.array_equal(res.grid.grid.data, start))


def test_render_contract(small_world):
    res = sd_hybrid_adapt(GenericRenderer(0), small_world.frames[50], small_world.conditions[50],
                          AdaptConfig(iters=5))
    img = render(res, 0.4)
    assert img.shape == (32, 32) and img.min() >= 0.0 and img.max() <= 1.0
    assert np.array_equal(img, render(res, 0.4))
    assert render(res, np.array([0.1, 0.9])).shape == (2, 32, 32)
    with pytest.raises(ValueError):
        render(res, -0.1)


def test_loss_hooks_are_weighted(small_world):
    frames, conds = small_world.frames[50], small_world.conditions[50]
    plain = sd_hybrid_adapt(GenericRenderer(0), frames, conds, AdaptConfig(iters=1))
    calls = []

    def hook(pred, target):
        calls.append(1)
        return l1_loss(pred, target)

    hooked = sd_hybrid_adapt(GenericRenderer(0), frames, conds, AdaptConfig(iters=1, lpips_hook=hook, id_hook=hook))
    assert len(calls) == 2
    assert hooked.losses[0] == pytest.approx(plain.losses[0] * (1 + 0.2 + 0.1), rel=1e-12)


def test_adapt_validation(small_world):
    with pytest.raises(ConfigError):
        AdaptConfig(components=("shape",))
    with pytest.raises(ConfigError):
        AdaptConfig(components=())
    with pytest.raises(ShapeError):
        sd_hybrid_adapt(GenericRenderer(0), np.zeros((0, 32, 32)), np.zeros(0))
    (tr, _), (ho, _) = split_clip(small_world.frames[50], small_world.conditions[50])
    assert len(tr) == 10 and len(ho) == 2


def test_adaptation_improves_training_frames(pretrained, identity_world):
    renderer, _ = pretrained
    frames, conds = identity_world.frames[52], identity_world.conditions[52]
    (tr_f, tr_c), _ = split_clip(frames, conds)
    base = sd_hybrid_adapt(renderer, frames, conds, AdaptConfig(iters=0))
    res = sd_hybrid_adapt(renderer, frames, conds, AdaptConfig(iters=2000))
    before = np.abs(render(base, tr_c) - tr_f).mean()
    after = np.abs(render(res, tr_c) - tr_f).mean()
    assert after <= 0.7 * before


@pytest.mark.xfail(strict=True, reason="constant lr 1e-3 with batch 1 leaves 4-9% plateau noise in the "
                   "100-step moving average")
def test_adaptation_loss_moving_average_is_monotone(pretrained, identity_world):
    renderer, _ = pretrained
    rises = []
    for ident in range(50, 56):
        res = sd_hybrid_adapt(renderer, identity_world.frames[ident], identity_world.conditions[ident],
                              AdaptConfig(iters=2000))
        ma = np.convolve(res.losses, np.ones(100) / 100, mode="valid")
        # rise of the moving average above its running minimum so far
        rises.append(float(np.max(ma[1:] / np.minimum.accumulate(ma)[:-1])))
    print("moving-average rise per held-out identity:", [f"{r:.3f}" for r in rises])
    assert max(rises) <= 1.05


def test_ablation_report_shape_and_determinism(small_world):
    r = GenericRenderer(0)
    rows = ablation_eval(r, small_world, 50, [0, 1], iters=3)
    assert [(row.config, row.seed) for row in rows] == [
        ("full", 0), ("inversion_only", 0), ("lora_only", 0), ("full", 1), ("inversion_only", 1), ("lora_only", 1)]
    text = ablation_csv(rows)
    assert text.splitlines()[0] == "config,seed,psnr,l1,train_l1" and len(text.splitlines()) == 7
    assert ablation_csv(ablation_eval(r, small_world, 50, [0, 1], iters=3)) == text
