"""Adam optimizer, in functional (``adam_step``) and stateful (``Adam``) form."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    A ``None`` gradient leaves that parameter (and its moments) untouched.
    """
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer tracks {len(state.m)} buffers for {len(params)} parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise ShapeError(f"moment/gradient shape mismatch for parameter of shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def state_arrays(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array([float(self.state.step)])}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}/m/{i}"] = m
            out[f"{prefix}/v/{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "opt") -> None:
        self.state.step = int(arrays[f"{prefix}/step"][0])
        for i, p in enumerate(self.params):
            m = arrays[f"{prefix}/m/{i}"]
            v = arrays[f"{prefix}/v/{i}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ShapeError(f"optimizer buffer {i} has shape {m.shape}, parameter has {p.data.shape}")
            self.state.m[i] = m.copy()
            self.state.v[i] = v.copy()
