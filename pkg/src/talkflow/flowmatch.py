"""Conditional flow matching on the straight (optimal-transport) path.

Noise ``x0 ~ N(0, I)`` at t=0 is transported to data ``x1`` at t=1 along
``x_t = (1 - t) x0 + t x1``; the conditional target velocity is
``(x1 - x_t) / (1 - t) = x1 - x0``. Sampling integrates the learned field with
a fixed-step ODE solver, optionally mixing conditional and unconditional
predictions (classifier-free guidance).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .autograd import Tensor
from .errors import ConfigError, NumericalError, ShapeError

T_EPS = 1e-5
DEFAULT_CFG_W = 2.0
FINAL_SIGMA = 0.0


@dataclass(frozen=True)
class OTPath:
    final_sigma: float = FINAL_SIGMA

    def __post_init__(self):
        if self.final_sigma != 0.0:
            raise ConfigError("only the sigma=0 straight path is supported")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "midpoint"
    steps: int = 5

    def __post_init__(self):
        if self.method not in ("euler", "midpoint"):
            raise ConfigError(f"unknown ODE method {self.method!r}")
        if int(self.steps) < 1:
            raise ConfigError("ODE steps must be >= 1")


def _t_like(t, x: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-sample (B,) time against ``x`` of shape (B, ...)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: {x0.shape} vs {x1.shape}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError("t must lie in [0, 1]")
    tt = _t_like(t, x0)
    return (1.0 - tt) * x0 + tt * x1


def ot_velocity(x1: np.ndarray, x_t: np.ndarray, t) -> np.ndarray:
    """Target velocity ``(x1 - x_t) / (1 - t)`` of the straight path."""
    if np.any(np.asarray(t) > 1.0 - T_EPS):
        raise NumericalError(f"t too close to 1 for the OT velocity (limit {1 - T_EPS})")
    x1, x_t = np.asarray(x1, dtype=np.float64), np.asarray(x_t, dtype=np.float64)
    return (x1 - x_t) / (1.0 - _t_like(t, x_t))


@dataclass
class FlowDraw:
    t: np.ndarray  # (B,)
    x0: np.ndarray
    x_t: np.ndarray
    u_t: np.ndarray


def draw_flow(x1: np.ndarray, rng: np.random.Generator, t=None, x0=None) -> FlowDraw:
    """Sample per-item ``t ~ U[0, 1 - eps]`` and ``x0 ~ N(0, I)`` and form the path point and target."""
    x1 = np.asarray(x1, dtype=np.float64)
    B = x1.shape[0]
    if t is None:
        t = rng.uniform(0.0, 1.0 - T_EPS, B)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
    if x0 is None:
        x0 = rng.standard_normal(x1.shape)
    x_t = interpolate(x0, x1, t)
    return FlowDraw(t=t, x0=x0, x_t=x_t, u_t=ot_velocity(x1, x_t, t))


def masked_mse(pred: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean squared error over the entries selected by ``weight`` (broadcastable 0/1 array)."""
    diff = pred - target
    sq = diff * diff
    if weight is None:
        return sq.mean()
    weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), pred.shape)
    total = weight.sum()
    if total <= 0:
        raise ShapeError("loss mask selects no entries")
    return (sq * weight).sum() * (1.0 / total)


def cfm_loss(velocity_fn: Callable[[np.ndarray, np.ndarray], Tensor], x1: np.ndarray,
             rng: np.random.Generator, t=None, x0=None, weight: np.ndarray | None = None) -> Tensor:
    """Flow-matching regression loss ``|| u_t - v(x_t, t) ||^2`` averaged over (selected) entries.

    ``velocity_fn(x_t, t)`` closes over any conditioning (audio, style) and
    returns a Tensor connected to the model parameters.
    """
    draw = draw_flow(x1, rng, t=t, x0=x0)
    v = velocity_fn(draw.x_t, draw.t)
    if v.shape != draw.u_t.shape:
        raise ShapeError(f"velocity shape {v.shape} != target shape {draw.u_t.shape}")
    return masked_mse(v, draw.u_t, weight)


def cfg_velocity(v_cond, v_uncond, w: float = DEFAULT_CFG_W):
    """Guided velocity ``v_cond + w * (v_cond - v_uncond)``."""
    v_cond, v_uncond = np.asarray(v_cond, dtype=np.float64), np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"cfg_velocity: {v_cond.shape} vs {v_uncond.shape}")
    return v_cond + w * (v_cond - v_uncond)


def ode_solve(velocity_fn: Callable[[np.ndarray, float], np.ndarray], x0: np.ndarray,
              cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Integrate ``dx/dt = velocity_fn(x, t)`` from t=0 to t=1 with fixed steps."""
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / cfg.steps
    for i in range(cfg.steps):
        t = i * h
        if cfg.method == "euler":
            x = x + h * velocity_fn(x, t)
        else:
            x_mid = x + 0.5 * h * velocity_fn(x, t)
            x = x + h * velocity_fn(x_mid, t + 0.5 * h)
        if not np.isfinite(x).all():
            raise NumericalError(f"ODE state became non-finite at step {i + 1}/{cfg.steps} (t={t + h:.3f})")
    return x


def sample(cond_fn: Callable[[np.ndarray, float], np.ndarray], shape: tuple[int, ...], rng: np.random.Generator,
           uncond_fn: Callable[[np.ndarray, float], np.ndarray] | None = None, w: float = DEFAULT_CFG_W,
           solver: SolverConfig = SolverConfig(), x0: np.ndarray | None = None) -> np.ndarray:
    """Draw ``x0 ~ N(0, I)`` and integrate the (guided) field to t=1.

    Without ``uncond_fn`` the conditional field is used as-is.
    """
    if x0 is None:
        x0 = rng.standard_normal(shape)

    def field(x, t):
        v = cond_fn(x, t)
        if uncond_fn is None or w == 0.0:
            return v
        return cfg_velocity(v, uncond_fn(x, t), w)

    return ode_solve(field, x0, solver)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased two-sample energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    n, m = len(x), len(y)
    xy = cdist(x, y).mean()
    xx = cdist(x, x).sum() / (n * (n - 1))
    yy = cdist(y, y).sum() / (m * (m - 1))
    return float(2.0 * xy - xx - yy)
