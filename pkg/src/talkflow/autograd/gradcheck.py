"""Finite-difference verification of every backward rule.

``run_suite`` is what ``talkflow gradcheck`` executes. Each case contracts the
op output with a fixed random weight so non-scalar ops yield a scalar loss.
Error metric: ``max|g_ad - g_fd| / max(max|g_fd|, max|g_ad|, 1e-8)`` per input,
maximised over inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3
FD_EPS = 1e-5


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        return f"{self.name} {self.max_rel_err:.3e} {'PASS' if self.passed else 'FAIL'}"


def numerical_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int, eps: float = FD_EPS) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. ``arrays[which]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[which]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*[Tensor(a) for a in base]).item()
            flat[i] = orig - eps
            fm = f(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    f(*leaves).backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def relative_error(ga: np.ndarray, gn: np.ndarray) -> float:
    scale = max(np.abs(gn).max(initial=0.0), np.abs(ga).max(initial=0.0), 1e-8)
    return float(np.abs(ga - gn).max(initial=0.0) / scale)


def check_gradients(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = FD_EPS) -> float:
    ga = analytic_grads(f, arrays)
    return max(relative_error(ga[i], numerical_grad(f, arrays, i, eps)) for i in range(len(arrays)))


def _contract(out: Tensor, weight: np.ndarray) -> Tensor:
    return (out * weight).sum()


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    def r(*shape):
        return rng.standard_normal(shape)

    def away_from_zero(*shape):
        x = rng.uniform(0.3, 1.5, shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    w34, w3, w44, w234 = r(3, 4), r(3), r(4, 4), r(2, 3, 4)
    w131, w423, w22, w36 = r(1, 3, 1), r(4, 2, 3), r(2, 2), r(3, 6)
    gather_idx = np.array([0, 2, 2, 1])
    cases = [
        ("add", lambda a, b: _contract(a + b, w34), [r(3, 4), r(4)]),
        ("sub", lambda a, b: _contract(a - b, w34), [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: _contract(a * b, w34), [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: _contract(a / b, w34), [r(3, 4), rng.uniform(0.5, 2.0, (3, 4))]),
        ("neg", lambda a: _contract(-a, w34), [r(3, 4)]),
        ("pow", lambda a: _contract(a**3.0, w34), [r(3, 4)]),
        ("matmul", lambda a, b: _contract(T.matmul(a, b), w44), [r(4, 5), r(5, 4)]),
        ("matmul_batched", lambda a, b: _contract(T.matmul(a, b), w234), [r(2, 3, 5), r(5, 4)]),
        ("matmul_bmm", lambda a, b: _contract(T.matmul(a, b), w234), [r(2, 3, 5), r(2, 5, 4)]),
        ("sum", lambda a: _contract(a.sum(axis=1), w3), [r(3, 4)]),
        ("mean", lambda a: _contract(a.mean(axis=(0, 2), keepdims=True), w131), [r(2, 3, 4)]),
        ("reshape", lambda a: _contract(a.reshape(4, 3), w34.T), [r(3, 4)]),
        ("transpose", lambda a: _contract(a.transpose(2, 0, 1), w423), [r(2, 3, 4)]),
        ("getitem", lambda a: _contract(a[1:, ::2], w22), [r(3, 4)]),
        ("gather", lambda a: _contract(a[gather_idx], w44), [r(3, 4)]),
        ("concat", lambda a, b: _contract(T.concat([a, b], axis=1), w36), [r(3, 4), r(3, 2)]),
        ("exp", lambda a: _contract(a.exp(), w34), [r(3, 4)]),
        ("log", lambda a: _contract(a.log(), w34), [rng.uniform(0.5, 2.0, (3, 4))]),
        ("sqrt", lambda a: _contract(a.sqrt(), w34), [rng.uniform(0.5, 2.0, (3, 4))]),
        ("abs", lambda a: _contract(a.abs(), w34), [away_from_zero(3, 4)]),
        ("tanh", lambda a: _contract(a.tanh(), w34), [r(3, 4)]),
        ("sigmoid", lambda a: _contract(a.sigmoid(), w34), [r(3, 4)]),
        ("relu", lambda a: _contract(a.relu(), w34), [away_from_zero(3, 4)]),
        ("gelu", lambda a: _contract(a.gelu(), w34), [r(3, 4)]),
        ("softmax", lambda a: _contract(T.softmax(a, axis=-1), w34), [r(3, 4)]),
        ("softmax_axis0", lambda a: _contract(T.softmax(a, axis=0), w34), [r(3, 4)]),
        ("layer_norm", lambda x, g, b: _contract(T.layer_norm(x, g, b), w234), [r(2, 3, 4), r(4), r(4)]),
        ("mse", lambda p, t: T.mse(p, t), [r(3, 4), r(3, 4)]),
        ("l1", lambda p, t: T.l1_loss(p, t), [r(3, 4) + 3.0, r(3, 4) - 3.0]),
        (
            "matmul_chain",
            lambda a, b, c: T.matmul(T.matmul(a, b), c).sum(),
            [r(3, 4), r(4, 5), r(5, 2)],
        ),
    ]
    return cases


def _end_to_end_case(rng: np.random.Generator) -> float:
    from ..nn import TransformerConfig, VelocityModel

    cfg = TransformerConfig(hidden=8, layers=2, heads=2, head_size=4, mlp_layers=2)
    model = VelocityModel(in_dim=3, out_dim=2, cfg=cfg, max_len=8, rng=rng)
    params = model.parameters()
    # zero-initialised pieces would hide their own gradient paths
    for p in params:
        p.data += 0.1 * rng.standard_normal(p.data.shape)
    x = Tensor(rng.standard_normal((1, 5, 3)))
    t = np.array([0.37])
    w = rng.standard_normal((1, 5, 2))

    def loss() -> Tensor:
        return _contract(model(x, t), w)

    for p in params:
        p.grad = None
    loss().backward()
    ga = np.concatenate([p.grad.ravel() for p in params])
    gn = []
    with T.no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + FD_EPS
                fp = loss().item()
                flat[i] = orig - FD_EPS
                fm = loss().item()
                flat[i] = orig
                gn.append((fp - fm) / (2 * FD_EPS))
    return relative_error(ga, np.array(gn))


def run_suite(seed: int = 0, include_end_to_end: bool = True) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = [GradcheckResult(name, check_gradients(f, arrays), OP_TOL) for name, f, arrays in _op_cases(rng)]
    if include_end_to_end:
        results.append(GradcheckResult("velocity_model_end_to_end", _end_to_end_case(rng), END_TO_END_TOL))
    return results
