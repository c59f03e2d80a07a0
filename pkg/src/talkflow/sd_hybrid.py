"""Static-dynamic hybrid adaptation of a generic motion-conditioned renderer.

A generic renderer (patch encoder -> feature grid -> per-cell decoder) is
pretrained across many identities. Adapting it to one identity combines two
parts. The static part inverts the grid: the encoder output for the first
frame becomes a free parameter. The dynamic part injects low-rank adapters
into every decoder linear layer, so the identity's own motion-to-image mapping
can be learned while the base weights stay frozen.
"""
from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Adam, Tensor, concat, l1_loss, no_grad, parameter
from .errors import ConfigError, NumericalError, ShapeError
from .nn import MLP, Linear, LoRALinear, Module, inject_lora
from .synthbench import IMAGE_SIZE, IdentityWorld

log = logging.getLogger(__name__)

GRID = 16
GRID_C = 8
PATCH = 4
CELL = IMAGE_SIZE // GRID  # each grid cell decodes a CELL x CELL pixel block
LAMBDA_LPIPS = 0.2
LAMBDA_ID = 0.1
COMPONENTS = ("inversion", "lora")


def motion_features(m) -> np.ndarray:
    """(B,) motion scalars -> (B, 3) features ``[m, m^2, sqrt(m)]``."""
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ValueError("motion condition must lie in [0, 1]")
    return np.stack([m, m * m, np.sqrt(m)], axis=-1)


def extract_patches(images: np.ndarray) -> np.ndarray:
    """(B, 32, 32) -> (B, 256, 16): 4x4 patches at stride 2 over a 1-pixel zero pad."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} images, got {images.shape[1:]}")
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (PATCH, PATCH), axis=(1, 2))[:, ::2, ::2]
    return win.reshape(len(images), GRID * GRID, PATCH * PATCH)


def _neighbour_matrix() -> np.ndarray:
    """0/1 matrix (256*9, 256) gathering each cell's 3x3 neighbourhood (zeros beyond the border)."""
    S = np.zeros((GRID * GRID * 9, GRID * GRID))
    for i in range(GRID):
        for j in range(GRID):
            for k, (di, dj) in enumerate((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < GRID and 0 <= jj < GRID:
                    S[(i * GRID + j) * 9 + k, ii * GRID + jj] = 1.0
    return S


_NEIGHBOURS_T = _neighbour_matrix().T.copy()
_COORDS = np.stack(np.meshgrid((np.arange(GRID) + 0.5) / GRID * 2 - 1,
                               (np.arange(GRID) + 0.5) / GRID * 2 - 1, indexing="ij"), -1).reshape(-1, 2)


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 32):
        self.mlp = MLP([PATCH * PATCH, hidden, GRID_C], rng)

    def forward(self, images: np.ndarray) -> Tensor:
        """Images -> flat grid features (B, 256, C)."""
        return self.mlp(Tensor(extract_patches(images)))


class Decoder(Module):
    """Per-cell MLP over (3x3 neighbourhood features, motion features, cell position) -> 2x2 pixel block."""

    def __init__(self, rng: np.random.Generator, hidden: int = 64):
        n_in = 9 * GRID_C + 3 + 2
        self.l1 = Linear(n_in, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.l3 = Linear(hidden, CELL * CELL, rng)

    def forward(self, grid, m) -> Tensor:
        grid = grid if isinstance(grid, Tensor) else Tensor(grid)
        if grid.shape == (GRID, GRID, GRID_C):  # a single grid, not a flat batch
            grid = grid.reshape(1, GRID * GRID, GRID_C)
        B = grid.shape[0]
        if grid.shape[1:] != (GRID * GRID, GRID_C):
            raise ShapeError(f"decoder expects grids of {GRID}x{GRID}x{GRID_C}, got {grid.shape}")
        feats = motion_features(m)
        if len(feats) == 1 and B > 1:
            feats = np.repeat(feats, B, axis=0)
        if len(feats) != B:
            raise ShapeError(f"{len(feats)} motion conditions for {B} grids")
        hood = (grid.swapaxes(1, 2) @ _NEIGHBOURS_T).swapaxes(1, 2).reshape(B, GRID * GRID, 9 * GRID_C)
        extra = np.concatenate([np.broadcast_to(feats[:, None, :], (B, GRID * GRID, 3)),
                                np.broadcast_to(_COORDS, (B, GRID * GRID, 2))], axis=-1)
        h = concat([hood, Tensor(extra)], axis=-1)
        h = self.l2(self.l1(h).gelu()).gelu()
        blocks = self.l3(h).sigmoid().reshape(B, GRID, GRID, CELL, CELL)
        return blocks.transpose(0, 1, 3, 2, 4).reshape(B, IMAGE_SIZE, IMAGE_SIZE)


class GenericRenderer(Module):
    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng)
        self.decoder = Decoder(rng)

    def forward(self, source: np.ndarray, m) -> Tensor:
        return self.decoder(self.encoder(source), m)


@dataclass
class FeatureGrid:
    grid: Tensor  # (16, 16, C)
    trainable: bool = False

    def __post_init__(self):
        if self.grid.shape != (GRID, GRID, GRID_C):
            raise ShapeError(f"feature grid must be {GRID}x{GRID}x{GRID_C}, got {self.grid.shape}")
        if not np.isfinite(self.grid.data).all():
            raise NumericalError("feature grid has non-finite entries")


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 2e-3
    seed: int = 0
    n_train: int | None = None  # identities used for training; the rest are held out


def pretrain_generic(world: IdentityWorld, cfg: PretrainConfig = PretrainConfig(),
                     on_log: Callable[[int, float], None] | None = None) -> tuple[GenericRenderer, list[float]]:
    """Joint encoder/decoder L1 training: neutral first frame of an identity -> its frame at condition m."""
    n_train = len(world) if cfg.n_train is None else cfg.n_train
    if n_train < 50:
        raise ConfigError(f"generic pretraining needs >= 50 identities, got {n_train}")
    renderer = GenericRenderer(cfg.seed)
    opt = Adam(renderer.parameters(), lr=cfg.lr)
    sources = world.frames[:n_train, 0]
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        ids = rng.integers(0, n_train, cfg.batch)
        fr = rng.integers(0, world.frames.shape[1], cfg.batch)
        pred = renderer(sources[ids], world.conditions[ids, fr])
        loss = l1_loss(pred, world.frames[ids, fr])
        if not np.isfinite(loss.item()):
            raise NumericalError(f"generic pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_log is not None:
            on_log(step, losses[-1])
    return renderer, losses


def reconstruction_l1(renderer: GenericRenderer, world: IdentityWorld, identities: Sequence[int]) -> float:
    """Mean L1 of the generic renderer over every frame of the given identities."""
    errs = []
    with no_grad():
        for i in identities:
            src = np.repeat(world.frames[i, :1], world.frames.shape[1], axis=0)
            pred = renderer(src, world.conditions[i]).data
            errs.append(np.abs(pred - world.frames[i]).mean())
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# adaptation


def init_inversion(renderer: GenericRenderer, first_frame: np.ndarray) -> FeatureGrid:
    """The encoder's grid for the first frame, copied into a free parameter."""
    first_frame = np.asarray(first_frame, dtype=np.float64)
    if first_frame.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"first frame must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {first_frame.shape}")
    with no_grad():
        g = renderer.encoder(first_frame).data.reshape(GRID, GRID, GRID_C)
    return FeatureGrid(parameter(g.copy()), trainable=True)


LossHook = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class AdaptConfig:
    components: tuple[str, ...] = COMPONENTS
    iters: int = 2000
    lr: float = 1e-3
    rank: int = 4
    seed: int = 0
    train_frac: float = 0.8
    lpips_hook: LossHook | None = None  # perceptual term, weight LAMBDA_LPIPS when supplied
    id_hook: LossHook | None = None  # identity term, weight LAMBDA_ID when supplied

    def __post_init__(self):
        comps = tuple(self.components)
        bad = [c for c in comps if c not in COMPONENTS]
        if bad or not comps:
            raise ConfigError(f"components must be a non-empty subset of {COMPONENTS}, got {comps}")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if not 0.0 < self.train_frac <= 1.0:
            raise ConfigError("train_frac must lie in (0, 1]")
        self.components = comps


@dataclass
class AdaptationResult:
    grid: FeatureGrid
    decoder: Decoder  # private copy; LoRA adapters attached when enabled
    config: AdaptConfig
    losses: list[float] = field(default_factory=list)

    def adapters(self) -> list[LoRALinear]:
        return [mod for mod in self.decoder.modules() if isinstance(mod, LoRALinear)]


def split_clip(frames: np.ndarray, conditions: np.ndarray, train_frac: float = 0.8):
    """First ``train_frac`` of frames for adaptation, the rest held out."""
    n = len(frames)
    if n == 0 or len(conditions) != n:
        raise ShapeError("clip must hold matching, non-empty frames and conditions")
    cut = max(1, int(round(train_frac * n)))
    return (frames[:cut], conditions[:cut]), (frames[cut:], conditions[cut:])


def sd_hybrid_adapt(renderer: GenericRenderer, frames: np.ndarray, conditions: np.ndarray,
                    cfg: AdaptConfig = AdaptConfig()) -> AdaptationResult:
    """Fit the inverted grid and/or decoder LoRA to the training split of one identity's clip (batch 1)."""
    frames = np.asarray(frames, dtype=np.float64)
    conditions = np.asarray(conditions, dtype=np.float64)
    (tr_f, tr_c), _ = split_clip(frames, conditions, cfg.train_frac)
    rng = np.random.default_rng(cfg.seed)
    grid = init_inversion(renderer, frames[0])
    if "inversion" not in cfg.components:
        grid.grid.requires_grad = False
        grid.trainable = False
    decoder = copy.deepcopy(renderer.decoder).freeze()
    if "lora" in cfg.components:
        inject_lora(decoder, cfg.rank, rng)
    params = decoder.parameters() + ([grid.grid] if grid.trainable else [])
    opt = Adam(params, lr=cfg.lr)
    result = AdaptationResult(grid, decoder, cfg)
    order = np.empty(0, dtype=int)
    for it in range(cfg.iters):
        if it % len(tr_f) == 0:  # each pass visits every training frame once, in a fresh order
            order = rng.permutation(len(tr_f))
        k = int(order[it % len(tr_f)])
        pred = decoder(grid.grid, tr_c[k])
        loss = l1_loss(pred, tr_f[k][None])
        if cfg.lpips_hook is not None:
            loss = loss + cfg.lpips_hook(pred, tr_f[k][None]) * LAMBDA_LPIPS
        if cfg.id_hook is not None:
            loss = loss + cfg.id_hook(pred, tr_f[k][None]) * LAMBDA_ID
        if not np.isfinite(loss.item()):
            raise NumericalError(f"adaptation loss non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
    return result


def render(result: AdaptationResult, m) -> np.ndarray:
    """Adapted decoder on the inverted grid; (32, 32) for a scalar condition, (B, 32, 32) for a batch."""
    scalar = np.ndim(m) == 0
    m_arr = np.atleast_1d(np.asarray(m, dtype=np.float64))
    flat = result.grid.grid.reshape(1, GRID * GRID, GRID_C).data
    with no_grad():
        out = result.decoder(np.repeat(flat, len(m_arr), axis=0), m_arr).data
    return out[0] if scalar else out


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))


@dataclass
class AblationRow:
    config: str
    seed: int
    psnr: float
    l1: float
    train_l1: float


ABLATIONS = {"full": ("inversion", "lora"), "inversion_only": ("inversion",), "lora_only": ("lora",)}


def heldout_metrics(result: AdaptationResult, frames: np.ndarray, conditions: np.ndarray) -> tuple[float, float, float]:
    (tr_f, tr_c), (ho_f, ho_c) = split_clip(frames, conditions, result.config.train_frac)
    pred_ho = render(result, ho_c)
    pred_tr = render(result, tr_c)
    return psnr(pred_ho, ho_f), float(np.abs(pred_ho - ho_f).mean()), float(np.abs(pred_tr - tr_f).mean())


def ablation_eval(renderer: GenericRenderer, world: IdentityWorld, identity: int, seeds: Sequence[int],
                  iters: int = 2000) -> list[AblationRow]:
    """Every ablation config on the same identity clip, one independent renderer copy per run."""
    frames, conds = world.frames[identity], world.conditions[identity]
    rows = []
    for seed in seeds:
        for name, comps in ABLATIONS.items():
            res = sd_hybrid_adapt(renderer, frames, conds, AdaptConfig(components=comps, iters=iters, seed=seed))
            p, l1, tr = heldout_metrics(res, frames, conds)
            rows.append(AblationRow(name, int(seed), p, l1, tr))
            log.info("ablation %s seed %d psnr %.3f", name, seed, p)
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seed", "psnr", "l1", "train_l1"])
    for r in rows:
        w.writerow([r.config, r.seed, repr(r.psnr), repr(r.l1), repr(r.train_l1)])
    return buf.getvalue()


__all__ = [
    "ABLATIONS", "AblationRow", "AdaptConfig", "AdaptationResult", "Decoder", "Encoder", "FeatureGrid",
    "GenericRenderer", "PretrainConfig", "ablation_csv", "ablation_eval", "extract_patches", "heldout_metrics",
    "init_inversion", "motion_features", "pretrain_generic", "psnr", "reconstruction_l1", "render",
    "sd_hybrid_adapt", "split_clip",
]
