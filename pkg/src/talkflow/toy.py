"""2-D Gaussian-mixture sandbox for checking that flow matching learns a distribution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Adam, Tensor, concat, no_grad
from .flowmatch import SolverConfig, cfm_loss, sample
from .nn import MLP, Module, time_embed


@dataclass
class GaussianMixture2D:
    means: np.ndarray = field(default_factory=lambda: np.array([[-2.0, -1.0], [2.0, 1.0]]))
    std: float = 0.4
    weights: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal((n, 2))


class PointVelocity(Module):
    """MLP velocity field on points, conditioned on a sinusoidal time embedding."""

    def __init__(self, rng: np.random.Generator, dim: int = 2, hidden: int = 128, t_dim: int = 16):
        self.t_dim = t_dim
        self.net = MLP([dim + t_dim, hidden, hidden, hidden, dim], rng)

    def forward(self, x, t):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return self.net(concat([x, Tensor(time_embed(t, self.t_dim))], axis=1))


def train_toy_flow(target: GaussianMixture2D, steps: int, seed: int, batch: int = 256,
                   lr: float = 2e-3) -> tuple[PointVelocity, list[float]]:
    rng = np.random.default_rng(seed)
    model = PointVelocity(rng)
    opt = Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        step_rng = np.random.default_rng([seed, step])
        x1 = target.sample(batch, step_rng)
        loss = cfm_loss(lambda x_t, t: model(Tensor(x_t), t), x1, step_rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return model, losses


def sample_toy(model: PointVelocity, n: int, rng: np.random.Generator,
               solver: SolverConfig = SolverConfig()) -> np.ndarray:
    with no_grad():
        return sample(lambda x, t: model(Tensor(x), t).data, (n, 2), rng, solver=solver)
