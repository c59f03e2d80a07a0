import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkflow.autograd import Tensor
from talkflow.errors import ConfigError, ShapeError
from talkflow.flowmatch import draw_flow, ot_velocity
from talkflow.ics_a2m import (
    IN_CHANNELS, A2MTrainConfig, A2MTrainer, SyncScorer, SyncTrainConfig, assemble_input, build_model,
    estimate_x1, frame_loss_map, icsa2m_loss, infer_stylized, infer_unstylized, make_batch, sample_mask,
    split_channels, stylized_layout, style_recovery_trials, sync_penalty, sync_ranking_accuracy,
    train_sync_scorer, unconditional_layout,
)
from talkflow.nn import TransformerConfig
from talkflow.synthbench import N_LIP, articulation_signal, gen_audio, gen_speaker_dataset, recover_style

TINY = TransformerConfig(hidden=32, layers=2, heads=2, head_size=16, mlp_layers=2)


@pytest.fixture(scope="module")
def scorer(speakers32):
    return train_sync_scorer(speakers32, SyncTrainConfig(epochs=30))


@pytest.fixture(scope="module")
def trained_tiny(small_speakers):
    model = build_model(TINY, seed=0, max_len=128)
    tr = A2MTrainer(model, small_speakers, A2MTrainConfig(steps=600, batch=8, window=64, lr=2e-3,
                                                          lambda_sync=0.0, warmup=50, log_every=10))
    tr.run()
    return model, tr.history


# masks


def test_mask_statistics_over_1000_draws():
    rng = np.random.default_rng(0)
    counts = set()
    for _ in range(1000):
        spec = sample_mask(100, rng)
        assert 0.3 <= spec.fraction <= 0.7
        counts.add(len(spec.segments))
        ends = [0] + [x for seg in spec.segments for x in seg]
        assert all(0 <= a < b <= 100 for a, b in spec.segments)
        # disjoint and non-touching
        for (a0, b0), (a1, b1) in zip(spec.segments, spec.segments[1:]):
            assert b0 < a1
        assert ends == sorted(ends)
    assert counts == {1, 2, 3}


@settings(max_examples=200, deadline=None)
@given(st.integers(8, 40), st.integers(0, 2**32 - 1))
def test_mask_bounds_hold_for_short_sequences(T, seed):
    m = sample_mask(T, np.random.default_rng(seed)).to_array()
    assert int(np.ceil(0.3 * T)) <= m.sum() <= int(np.floor(0.7 * T))
    if T == 8:
        assert m.sum() >= 3 and (~m).sum() >= 3


def test_mask_rejects_tiny_sequences_and_is_seeded():
    with pytest.raises(ValueError):
        sample_mask(7, np.random.default_rng(0))
    assert sample_mask(50, np.random.default_rng(3)) == sample_mask(50, np.random.default_rng(3))


# input layout


def test_unmasked_unprompted_context_equals_motion(rng):
    audio, motion, x_t = rng.standard_normal((10, 8)), rng.standard_normal((10, 16)), rng.standard_normal((10, 16))
    inp = assemble_input(audio, motion, x_t, np.zeros(10, bool), 0.0)
    assert inp.shape == (10, IN_CHANNELS)
    ch = split_channels(inp)
    assert np.array_equal(ch["context"], motion)
    assert not ch["mask"].any() and np.all(ch["present"] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_stylized_layout_round_trip(P, T, seed):
    rng = np.random.default_rng(seed)
    pa, pm = rng.standard_normal((P, 8)), rng.standard_normal((P, 16))
    da, x_t = rng.standard_normal((T, 8)), rng.standard_normal((P + T, 16))
    inp = stylized_layout(pa, pm, da, x_t)
    assert inp.shape == (P + T, IN_CHANNELS)
    ch = split_channels(inp)
    assert np.array_equal(ch["audio"][P:], da) and np.array_equal(ch["audio"][:P], pa)
    assert np.array_equal(ch["x_t"], x_t)
    assert np.array_equal(ch["context"][:P], pm) and np.all(ch["context"][P:] == 0.0)
    assert not ch["mask"][:P].any() and ch["mask"][P:].all()
    assert np.all(ch["present"] == 1.0)


def test_unconditional_layout_carries_no_style(rng):
    inp = unconditional_layout(rng.standard_normal((2, 6, 8)), rng.standard_normal((2, 6, 16)))
    ch = split_channels(inp)
    assert np.all(ch["context"] == 0.0) and ch["mask"].all() and np.all(ch["present"] == 0.0)


def test_assemble_rejects_misaligned(rng):
    with pytest.raises(ShapeError):
        assemble_input(rng.standard_normal((5, 8)), None, rng.standard_normal((6, 16)), np.ones(5, bool), 1.0)
    with pytest.raises(ShapeError):
        stylized_layout(rng.standard_normal((4, 8)), rng.standard_normal((3, 16)),
                        rng.standard_normal((5, 8)), rng.standard_normal((9, 16)))


# x1 estimate


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 2**32 - 1))
def test_estimate_x1_inverts_ot_path(t, seed):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((2, 5, 16))
    draw = draw_flow(x1, rng, t=np.array(t), x0=x0)
    x_t = draw.x_t
    est = estimate_x1(x_t, t, ot_velocity(x1, x_t, t))
    np.testing.assert_allclose(est, x1, rtol=0, atol=1e-9 * max(1.0, 1 / (1 - t)))
    assert np.all(np.isfinite(estimate_x1(x_t, t, rng.standard_normal(x_t.shape))))


def test_estimate_x1_edge_cases(rng):
    x0, x1 = rng.standard_normal((2, 3, 4))
    assert np.array_equal(estimate_x1(x0, 0.0, x1 - x0), x0 + (x1 - x0))
    with pytest.raises(ValueError):
        estimate_x1(x0, 1.0, x1)


# sync scorer


def test_untrained_scorer_is_at_chance(speakers32):
    sc = SyncScorer(np.random.default_rng(1))
    sc.scale.data[...] = 1.0  # a random but non-degenerate scorer
    acc = sync_ranking_accuracy(sc, speakers32.heldout_clips(), seed=0)
    assert abs(acc - 0.5) <= 0.05


def test_trained_scorer_ranks_held_out_pairs(scorer, speakers32):
    assert scorer.frozen
    assert sync_ranking_accuracy(scorer, speakers32.heldout_clips(), seed=3) > 0.9


def test_scorer_unchanged_by_a2m_training(scorer, small_speakers):
    before = {k: v.copy() for k, v in scorer.state_dict().items()}
    model = build_model(TINY, seed=0, max_len=64)
    A2MTrainer(model, small_speakers, A2MTrainConfig(steps=5, window=32, warmup=1, lambda_sync=0.5), scorer).run()
    for k, v in scorer.state_dict().items():
        assert np.array_equal(v, before[k])


def test_unfrozen_scorer_rejected(small_speakers, rng):
    batch = make_batch(small_speakers.train_clips(), rng, 2, 32)
    with pytest.raises(ConfigError):
        icsa2m_loss(build_model(TINY, 0, max_len=64), batch, SyncScorer(rng), 0.05)


def test_sync_penalty_skips_windows_without_masked_frames(scorer, rng):
    audio, motion = rng.standard_normal((1, 48, 8)), rng.standard_normal((1, 48, 16))
    mask = np.zeros((1, 48), bool)
    assert sync_penalty(scorer, audio, motion, mask).item() == 0.0
    mask[0, 40] = True  # only windows starting at 32 contain it
    expected = -scorer(audio[:, 32:48], motion[:, 32:48]).mean().item()
    assert sync_penalty(scorer, audio, motion, mask).item() == pytest.approx(expected, abs=1e-12)


# loss


def test_lambda_zero_total_is_cfm(scorer, small_speakers, rng):
    batch = make_batch(small_speakers.train_clips(), rng, 4, 32)
    total, cfm, _ = icsa2m_loss(build_model(TINY, 0, max_len=64), batch, scorer, 0.0)
    assert total.item() == cfm.item()


def test_exact_velocity_oracle(scorer, small_speakers, rng):
    batch = make_batch(small_speakers.train_clips(), rng, 4, 48, p_drop=0.0)
    oracle = lambda inp, t: Tensor(batch.u_t)  # noqa: E731
    total, cfm, sync = icsa2m_loss(oracle, batch, scorer, 0.05)
    assert cfm.item() < 1e-24
    ref = sync_penalty(scorer, batch.audio, batch.x1, batch.mask).item()
    assert sync.item() == pytest.approx(ref, abs=1e-10)
    assert total.item() == pytest.approx(cfm.item() + 0.05 * sync.item(), abs=1e-15)


def test_loss_ignores_unmasked_frames(small_speakers, rng):
    model = build_model(TINY, 0, max_len=64)
    batch = make_batch(small_speakers.train_clips(), rng, 3, 32, p_drop=0.0)
    v = model(Tensor(batch.inp), batch.t).data
    lmap = frame_loss_map(v, batch.u_t, batch.mask)
    assert np.all(lmap[~batch.mask] == 0.0) and np.all(lmap[batch.mask] > 0.0)
    # changing the target on unmasked frames leaves the loss unchanged
    cfm = icsa2m_loss(model, batch, None, 0.0)[1].item()
    batch.u_t[~batch.mask] += 100.0
    assert icsa2m_loss(model, batch, None, 0.0)[1].item() == cfm


def test_loss_gradient_matches_finite_differences(scorer, small_speakers, rng):
    cfg = TransformerConfig(hidden=8, layers=1, heads=2, head_size=4, mlp_layers=1)
    model = build_model(cfg, 0, max_len=32, in_window=(1, 1))
    for p in model.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    batch = make_batch(small_speakers.train_clips(), rng, 2, 24, p_drop=0.0)
    params = model.parameters()
    total = icsa2m_loss(model, batch, scorer, 0.05)[0]
    for p in params:
        p.grad = None
    total.backward()
    eps = 1e-5
    for _ in range(4):
        dirs = [rng.standard_normal(p.shape) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
        for p, d in zip(params, dirs):
            p.data += eps * d
        fp = icsa2m_loss(model, batch, scorer, 0.05)[0].item()
        for p, d in zip(params, dirs):
            p.data -= 2 * eps * d
        fm = icsa2m_loss(model, batch, scorer, 0.05)[0].item()
        for p, d in zip(params, dirs):
            p.data += eps * d
        numeric = (fp - fm) / (2 * eps)
        assert abs(analytic - numeric) / max(abs(numeric), 1e-8) < 1e-3


# training


def test_short_training_halves_masked_loss(trained_tiny):
    _, hist = trained_tiny
    early = np.mean([r.cfm for r in hist[:1]])  # step-10 moving average
    late = np.mean([r.cfm for r in hist[-2:]])
    assert late <= 0.5 * early


def test_training_is_deterministic(small_speakers):
    finals = []
    for _ in range(2):
        model = build_model(TINY, seed=4, max_len=64)
        tr = A2MTrainer(model, small_speakers, A2MTrainConfig(steps=6, window=32, warmup=2, log_every=3, seed=9, lambda_sync=0.0))
        finals.append(tr.run()[-1].total)
    assert finals[0] == finals[1]


def test_trainer_requires_scorer_for_sync(small_speakers):
    with pytest.raises(ConfigError):
        A2MTrainer(build_model(TINY, 0, max_len=64), small_speakers, A2MTrainConfig(lambda_sync=0.05))


def test_lr_schedule_warms_up_and_decays():
    cfg = A2MTrainConfig(steps=1000, lr=1e-3, warmup=100)
    lrs = np.array([cfg.lr_at(s) for s in range(1000)])
    assert lrs[0] == pytest.approx(1e-5) and lrs[99] == pytest.approx(1e-3)
    assert np.all(np.diff(lrs[100:]) <= 0) and lrs[-1] == pytest.approx(1e-4, rel=1e-3)


def test_resume_reproduces_next_step(small_speakers):
    cfg = A2MTrainConfig(steps=8, window=32, warmup=2, log_every=1, seed=2, lambda_sync=0.0)
    a = A2MTrainer(build_model(TINY, 1, max_len=64), small_speakers, cfg)
    a.run(5)
    state = {k: v.copy() for k, v in a.state_arrays().items()}
    expected = a.train_step()
    b = A2MTrainer(build_model(TINY, 99, max_len=64), small_speakers, cfg)
    b.load_state_arrays(state)
    assert b.train_step() == expected


# inference


def test_stylized_output_strips_prompt(trained_tiny, rng):
    model, _ = trained_tiny
    drv = gen_audio(40, rng)
    out = infer_stylized(model, drv, gen_audio(24, rng), rng.standard_normal((24, 16)), np.random.default_rng(0))
    assert out.shape == (40, 16)
    again = infer_stylized(model, drv, gen_audio(24, np.random.default_rng(0)),
                           np.zeros((24, 16)), np.random.default_rng(0))
    assert again.shape == (40, 16)
    with pytest.raises(ShapeError):
        infer_stylized(model, gen_audio(100, rng), gen_audio(40, rng), np.zeros((40, 16)), rng)


def test_stylized_inference_is_deterministic(trained_tiny, rng):
    model, _ = trained_tiny
    drv, ra, rm = gen_audio(32, rng), gen_audio(16, rng), rng.standard_normal((16, 16))
    a = infer_stylized(model, drv, ra, rm, np.random.default_rng(5))
    b = infer_stylized(model, drv, ra, rm, np.random.default_rng(5))
    assert np.array_equal(a, b)


def _articulation_corr(audio, motion):
    tau = recover_style(audio, motion).tau
    sig = articulation_signal(audio, tau)
    return np.mean([np.corrcoef(sig[:, d], motion[:, d])[0, 1] for d in range(N_LIP)])


def test_unstylized_follows_audio_and_varies_with_seed(trained_tiny):
    model, _ = trained_tiny
    drv = gen_audio(64, np.random.default_rng(21))
    a = infer_unstylized(model, drv, np.random.default_rng(0))
    b = infer_unstylized(model, drv, np.random.default_rng(1))
    assert a.shape == drv.shape[:1] + (16,)
    assert _articulation_corr(drv, a) > 0.5 and _articulation_corr(drv, b) > 0.5
    assert np.var(a - b) > 0.0


def test_prompt_dropout_one_gives_chance_style_recovery():
    ds = gen_speaker_dataset(8, 4, 128, np.random.default_rng(5))
    model = build_model(TINY, seed=0, max_len=128)
    A2MTrainer(model, ds, A2MTrainConfig(steps=300, batch=8, window=64, lr=2e-3, lambda_sync=0.0,
                                         p_drop=1.0, warmup=30)).run()
    trials = style_recovery_trials(model, ds, n_trials=100, seed=0, prompt_len=32, drv_len=64)
    # binomial(100, 0.5) stays within +-15 points with probability > 0.997
    assert 0.35 <= trials.success_rate <= 0.65
