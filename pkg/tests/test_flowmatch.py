import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from talkflow.autograd import Tensor
from talkflow.errors import ConfigError, NumericalError, ShapeError
from talkflow.flowmatch import (
    DEFAULT_CFG_W, T_EPS, OTPath, SolverConfig, cfg_velocity, cfm_loss, draw_flow, energy_distance, interpolate,
    masked_mse, ode_solve, ot_velocity, sample,
)

vec = hnp.arrays(np.float64, 6, elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.floats(0.0, 1.0 - T_EPS))
def test_ot_velocity_recovers_displacement(x0, x1, t):
    v = ot_velocity(x1, interpolate(x0, x1, t), t)
    np.testing.assert_allclose(v, x1 - x0, rtol=0, atol=1e-12 * max(1.0, 1.0 / (1.0 - t)) * 10)


def test_interpolate_endpoints(rng):
    x0, x1 = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    with pytest.raises(ShapeError):
        interpolate(x0, x1[:2], 0.5)


def test_ot_velocity_rejects_t_near_one():
    with pytest.raises(NumericalError):
        ot_velocity(np.ones(2), np.zeros(2), 1.0)


def test_only_straight_path():
    assert OTPath().final_sigma == 0.0
    with pytest.raises(ConfigError):
        OTPath(final_sigma=0.1)


def test_draw_flow_targets(rng):
    x1 = rng.standard_normal((50, 3))
    d = draw_flow(x1, rng)
    assert d.t.shape == (50,) and (d.t >= 0).all() and (d.t <= 1 - T_EPS).all()
    np.testing.assert_allclose(d.u_t, x1 - d.x0, atol=1e-9)


def _final_error(method, steps):
    return abs(ode_solve(lambda x, t: x, np.array([1.0]), SolverConfig(method, steps))[0] - np.e)


@pytest.mark.parametrize("method,lo,hi", [("euler", 1.8, 2.2), ("midpoint", 3.5, 4.5)])
def test_solver_order(method, lo, hi):
    assert lo <= _final_error(method, 40) / _final_error(method, 80) <= hi


def test_ode_time_dependent_field():
    # dx/dt = 2t, x(0) = 0 -> x(1) = 1; midpoint is exact for linear-in-t fields
    out = ode_solve(lambda x, t: np.full_like(x, 2 * t), np.zeros(1), SolverConfig("midpoint", 3))
    assert out[0] == pytest.approx(1.0, abs=1e-14)


def test_ode_divergence_raises():
    with np.errstate(all="ignore"):
        with pytest.raises(NumericalError):
            ode_solve(lambda x, t: x * 1e300, np.ones(1), SolverConfig("euler", 4))


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig("rk4", 5)
    with pytest.raises(ConfigError):
        SolverConfig("euler", 0)
    assert SolverConfig() == SolverConfig("midpoint", 5)


@settings(max_examples=50, deadline=None)
@given(vec, vec, st.floats(-4, 4))
def test_cfg_reductions(vc, vu, w):
    np.testing.assert_array_equal(cfg_velocity(vc, vu, 0.0), vc)
    np.testing.assert_array_equal(cfg_velocity(vc, vc, w), vc)


def test_cfg_default_and_shape():
    assert DEFAULT_CFG_W == 2.0
    np.testing.assert_array_equal(cfg_velocity(np.array([1.0]), np.array([0.0])), [3.0])
    with pytest.raises(ShapeError):
        cfg_velocity(np.ones(2), np.ones(3))


def test_masked_mse_ignores_unselected(rng):
    pred = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    target = rng.standard_normal((2, 4))
    w = np.array([[1, 1, 0, 0], [0, 1, 0, 0]], dtype=float)
    loss = masked_mse(pred, target, w)
    assert loss.item() == pytest.approx(((pred.data - target) ** 2 * w).sum() / 3)
    loss.backward()
    np.testing.assert_array_equal(pred.grad[w == 0], 0.0)
    with pytest.raises(ShapeError):
        masked_mse(pred, target, np.zeros((2, 4)))


def test_cfm_loss_is_zero_for_exact_velocity(rng):
    x1 = rng.standard_normal((8, 3))
    x0 = rng.standard_normal((8, 3))
    loss = cfm_loss(lambda xt, t: Tensor(x1 - x0), x1, rng, x0=x0)
    assert loss.item() < 1e-24


def test_sample_deterministic_and_guided(rng):
    cond = lambda x, t: np.ones_like(x)
    uncond = lambda x, t: np.zeros_like(x)
    a = sample(cond, (3, 2), np.random.default_rng(5), uncond, w=2.0)
    b = sample(cond, (3, 2), np.random.default_rng(5), uncond, w=2.0)
    assert np.array_equal(a, b)
    x0 = np.random.default_rng(5).standard_normal((3, 2))
    np.testing.assert_allclose(a, x0 + 3.0, atol=1e-12)


def test_energy_distance_separates(rng):
    x = rng.standard_normal((400, 2))
    y = rng.standard_normal((400, 2))
    z = rng.standard_normal((400, 2)) + 2.0
    assert abs(energy_distance(x, y)) < 0.05
    assert energy_distance(x, z) > 1.0
