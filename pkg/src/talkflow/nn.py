"""Layers, LoRA adapters and the transformer velocity network."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np

from .autograd import Tensor, concat, layer_norm, matmul, parameter, softmax
from .errors import ConfigError, ShapeError


class Module:
    """Minimal container: tensors and sub-modules are discovered from attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        """Every tensor in the module tree, frozen or not, in a stable order."""
        out = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((full, value))
            else:
                out.extend(value.named_tensors(full + "."))
        return out

    def parameters(self) -> list[Tensor]:
        """Trainable tensors only."""
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def freeze(self) -> "Module":
        for _, t in self.named_tensors():
            t.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.named_tensors():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing tensor {key!r} in state")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{key}: expected shape {t.data.shape}, got {arr.shape}")
            t.data = arr.copy()


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(rng.standard_normal((out_features, in_features)) / np.sqrt(in_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape[-1]}")
        y = matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y


class LoRALinear(Module):
    """Frozen base layer plus a trainable rank-``r`` update ``(alpha/r) * B @ A``."""

    def __init__(self, base: Linear, rank: int, rng: np.random.Generator, alpha: float | None = None, init_std: float = 0.02):
        if not 1 <= rank <= min(base.in_features, base.out_features):
            raise ConfigError(
                f"LoRA rank {rank} must lie in [1, min(in={base.in_features}, out={base.out_features})]"
            )
        self.base = base.freeze()
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.A = parameter(init_std * rng.standard_normal((rank, base.in_features)))
        self.B = parameter(np.zeros((base.out_features, rank)))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x):
        delta = matmul(matmul(x, self.A.T), self.B.T)
        return self.base(x) + delta * self.scale

    def merged_weight(self) -> np.ndarray:
        return self.base.weight.data + self.scale * (self.B.data @ self.A.data)


def lora_forward(x, adapter: LoRALinear):
    return adapter(x)


def merge_lora(adapter: LoRALinear) -> Linear:
    """Fold the low-rank delta into a plain dense layer (trainable, detached from the adapter)."""
    merged = Linear.__new__(Linear)
    merged.in_features = adapter.in_features
    merged.out_features = adapter.out_features
    merged.weight = parameter(adapter.merged_weight())
    base_bias = adapter.base.bias
    merged.bias = parameter(base_bias.data.copy()) if base_bias is not None else None
    return merged


def _replace_linears(module: Module, fn: Callable[[Linear], Module], predicate) -> list:
    created = []
    for mod in list(module.modules()):
        for name, value in list(vars(mod).items()):
            if isinstance(value, Linear) and predicate(name, value):
                new = fn(value)
                setattr(mod, name, new)
                created.append(new)
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Linear) and predicate(f"{name}.{i}", item):
                        value[i] = fn(item)
                        created.append(value[i])
    return created


def inject_lora(module: Module, rank: int, rng: np.random.Generator, alpha: float | None = None,
                predicate=lambda name, layer: True) -> list[LoRALinear]:
    """Freeze ``module`` and wrap every matching Linear in a LoRA adapter."""
    module.freeze()
    return _replace_linears(module, lambda lin: LoRALinear(lin, rank, rng, alpha), predicate)


def merge_all_lora(module: Module) -> None:
    for mod in list(module.modules()):
        for name, value in list(vars(mod).items()):
            if isinstance(value, LoRALinear):
                setattr(mod, name, merge_lora(value))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, LoRALinear):
                        value[i] = merge_lora(item)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Linear layers with GELU in between (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.gelu()
        return x


@dataclass(frozen=True)
class TransformerConfig:
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    head_size: int = 16
    mlp_layers: int = 2
    norm: str = "layernorm"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden != self.heads * self.head_size:
            raise ConfigError(f"hidden {self.hidden} != heads {self.heads} x head_size {self.head_size}")
        if self.layers < 1 or self.mlp_layers < 1:
            raise ConfigError("layer counts must be positive")
        if self.norm != "layernorm":
            raise ConfigError(f"unsupported norm type {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class SelfAttention(Module):
    """Bidirectional multi-head attention."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        inner = cfg.heads * cfg.head_size
        self.heads, self.head_size = cfg.heads, cfg.head_size
        self.q = Linear(cfg.hidden, inner, rng)
        self.k = Linear(cfg.hidden, inner, rng)
        self.v = Linear(cfg.hidden, inner, rng)
        self.proj = Linear(inner, cfg.hidden, rng)

    def _split(self, x, B: int, T: int):
        return x.reshape(B, T, self.heads, self.head_size).transpose(0, 2, 1, 3)

    def forward(self, x):
        B, T, _ = x.shape
        q = self._split(self.q(x), B, T)
        k = self._split(self.k(x), B, T)
        v = self._split(self.v(x), B, T)
        att = softmax(matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_size)), axis=-1)
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, self.heads * self.head_size)
        return self.proj(out)


class Block(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.hidden)
        self.attn = SelfAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.hidden)
        width = cfg.hidden * cfg.mlp_ratio
        sizes = [cfg.hidden] + [width] * (cfg.mlp_layers - 1) + [cfg.hidden]
        self.mlp = MLP(sizes, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Transformer(Module):
    """Pre-norm transformer stack followed by a final LayerNorm."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.hidden)

    def forward(self, x):
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        if x.shape[-1] != self.cfg.hidden:
            raise ShapeError(f"transformer expects width {self.cfg.hidden}, got {x.shape[-1]}")
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.reshape(x.shape[1:]) if squeeze else x


def transformer_forward(seq, transformer: Transformer, t_embed=None):
    """Run ``seq`` (frames x hidden, or batch x frames x hidden) through the stack.

    ``t_embed`` (hidden,) or (batch, hidden), when given, is added to every frame.
    """
    if t_embed is not None:
        t_embed = np.asarray(t_embed)
        seq = seq + (t_embed if t_embed.ndim == 1 or seq.ndim == 2 else t_embed[:, None, :])
    return transformer(seq)


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1]: ``[sin(w_k t), cos(w_k t)]`` with w_k from 1 to 1000 rad.

    Scalar ``t`` gives shape (dim,); an array of shape (B,) gives (B, dim).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    if dim < 4 or dim % 2:
        raise ConfigError("time embedding dimension must be even and >= 4")
    half = dim // 2
    freqs = 1000.0 ** (np.arange(half) / (half - 1))
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def frame_window(x, left: int, right: int) -> Tensor:
    """(B, T, C) -> (B, T, C * (left + 1 + right)): each frame stacked with its neighbours, zeros past the ends.

    Block ``j`` of the output channels holds frame ``t - left + j``.
    """
    if left == 0 and right == 0:
        return x
    x = x if isinstance(x, Tensor) else Tensor(x)
    B, T, C = x.shape
    padded = concat([Tensor(np.zeros((B, left, C))), x, Tensor(np.zeros((B, right, C)))], axis=1)
    return concat([padded[:, j : j + T] for j in range(left + 1 + right)], axis=-1)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """(n, dim) table ``[sin(p w_k), cos(p w_k)]`` with wavelengths from 2 pi to about 2 pi * 10^3 frames."""
    half = dim // 2
    freqs = 1.0 / (1000.0 ** (np.arange(half) / max(half - 1, 1)))
    ang = np.arange(n, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class VelocityModel(Module):
    """Per-frame input projection + positional and time embeddings -> transformer -> motion velocity."""

    def __init__(self, in_dim: int, out_dim: int, cfg: TransformerConfig, rng: np.random.Generator,
                 max_len: int = 256, use_pos: bool = True, pos_init: str = "sinusoidal",
                 in_window: tuple[int, int] = (0, 0)):
        self.in_dim, self.out_dim, self.max_len = in_dim, out_dim, max_len
        self.cfg = cfg
        self.use_pos = use_pos
        self.in_window = tuple(int(k) for k in in_window)
        if min(self.in_window) < 0:
            raise ConfigError("input window extents must be >= 0")
        self.in_proj = Linear(in_dim * (sum(self.in_window) + 1), cfg.hidden, rng)
        if pos_init == "sinusoidal":
            # still a learned table; the sinusoidal start makes relative offsets linearly readable
            self.pos = parameter(sinusoidal_positions(max_len, cfg.hidden))
        elif pos_init == "normal":
            self.pos = parameter(0.02 * rng.standard_normal((max_len, cfg.hidden)))
        else:
            raise ConfigError(f"unknown positional init {pos_init!r}")
        self.time_proj = Linear(cfg.hidden, cfg.hidden, rng)
        self.transformer = Transformer(cfg, rng)
        self.out_proj = Linear(cfg.hidden, out_dim, rng)

    def forward(self, x, t):
        if x.ndim == 2:
            return self.forward(x.reshape(1, *x.shape), np.reshape(t, (1,))).reshape(x.shape[0], self.out_dim)
        B, T, C = x.shape
        if C != self.in_dim:
            raise ShapeError(f"velocity model expects {self.in_dim} input channels, got {C}")
        if T > self.max_len:
            raise ShapeError(f"sequence of {T} frames exceeds max_len {self.max_len}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        h = self.in_proj(frame_window(x, *self.in_window))
        if self.use_pos:
            h = h + self.pos[:T]
        temb = self.time_proj(Tensor(time_embed(t, self.cfg.hidden)))
        h = h + temb.reshape(B, 1, self.cfg.hidden)
        return self.out_proj(self.transformer(h))
