"""In-context stylized audio-to-motion: masked infilling with a flow-matching transformer.

Per-frame input channels, in order::

    audio (8) | context motion (16, zero on masked frames) | mask flag (1) | x_t (16) | prompt flag (1)

Training masks 1-3 segments of a clip window and regresses the flow velocity
on the masked frames; the unmasked frames act as the style context. At
inference a reference (audio, motion) pair is prepended as clean context and
the whole driving segment is masked. With probability ``p_drop`` a training
window drops its context entirely (all frames masked, prompt flag 0), which is
what trains the unconditional branch used by guidance.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Adam, Tensor, no_grad
from .errors import ConfigError, NumericalError, ShapeError
from .flowmatch import SolverConfig, draw_flow, masked_mse, sample
from .nn import Linear, Module, TransformerConfig, VelocityModel
from .autograd import parameter
from .synthbench import D_AUDIO, D_MOTION, Clip, SpeakerDataset

log = logging.getLogger(__name__)

IN_CHANNELS = D_AUDIO + D_MOTION + 1 + D_MOTION + 1
SYNC_WINDOW = 16
SYNC_STRIDE = 8
SYNC_LAGS = 8
MIN_SHIFT = 10
DEFAULT_PROMPT_LEN = 64
LAMBDA_SYNC = 0.05
P_DROP = 0.2
IN_WINDOW = (8, 8)  # frames before/after each frame seen by the input projection

_A = slice(0, D_AUDIO)
_CTX = slice(D_AUDIO, D_AUDIO + D_MOTION)
_MASK = D_AUDIO + D_MOTION
_XT = slice(_MASK + 1, _MASK + 1 + D_MOTION)
_PRESENT = _MASK + 1 + D_MOTION


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class MaskSpec:
    T: int
    segments: tuple[tuple[int, int], ...]

    def to_array(self) -> np.ndarray:
        out = np.zeros(self.T, dtype=bool)
        for a, b in self.segments:
            out[a:b] = True
        return out

    @property
    def fraction(self) -> float:
        return sum(b - a for a, b in self.segments) / self.T


def sample_mask(T: int, rng: np.random.Generator, min_frac: float = 0.3, max_frac: float = 0.7) -> MaskSpec:
    """1-3 disjoint, non-touching segments covering a fraction of frames drawn uniformly in [0.3, 0.7]."""
    if T < 8:
        raise ValueError(f"mask sampling needs T >= 8, got {T}")
    lo, hi = int(np.ceil(min_frac * T)), int(np.floor(max_frac * T))
    n_seg = int(rng.integers(1, 4))
    masked = int(np.clip(round(rng.uniform(min_frac, max_frac) * T), lo, hi))
    masked = max(masked, n_seg)
    # random compositions: segment lengths >= 1, inner gaps >= 1, outer gaps >= 0
    lengths = np.diff(np.concatenate([[0], np.sort(rng.choice(np.arange(1, masked), n_seg - 1, replace=False)), [masked]]))
    free = T - masked - (n_seg - 1)
    cuts = np.sort(rng.integers(0, free + 1, n_seg))
    gaps = np.diff(np.concatenate([[0], cuts]))
    segments, pos = [], 0
    for i in range(n_seg):
        pos += int(gaps[i]) + (1 if i > 0 else 0)
        segments.append((pos, pos + int(lengths[i])))
        pos += int(lengths[i])
    return MaskSpec(T, tuple(segments))


# ---------------------------------------------------------------------------
# input layout


def assemble_input(audio: np.ndarray, motion_context: np.ndarray | None, x_t: np.ndarray,
                   mask: np.ndarray, present) -> np.ndarray:
    """Channel-concatenate aligned frames; works on (T, C) or (B, T, C).

    ``mask`` is True on frames to be generated: their context channel is zeroed.
    ``present`` (scalar or per-batch) marks whether any style context is supplied.
    """
    audio = np.asarray(audio, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    lead = audio.shape[:-1]
    if x_t.shape[:-1] != lead or np.shape(mask) != lead:
        raise ShapeError(f"misaligned frames: audio {audio.shape}, x_t {x_t.shape}, mask {np.shape(mask)}")
    if motion_context is None:
        motion_context = np.zeros(lead + (D_MOTION,))
    elif motion_context.shape[:-1] != lead:
        raise ShapeError(f"misaligned context {motion_context.shape} vs audio {audio.shape}")
    mask_f = np.asarray(mask, dtype=np.float64)[..., None]
    present = np.asarray(present, dtype=np.float64)
    if present.ndim:
        present = present.reshape(present.shape + (1,) * (len(lead) - present.ndim))
    present_ch = np.broadcast_to(present, lead)[..., None]
    return np.concatenate([audio, motion_context * (1.0 - mask_f), mask_f, x_t, present_ch], axis=-1)


def split_channels(inp: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "audio": inp[..., _A],
        "context": inp[..., _CTX],
        "mask": inp[..., _MASK] > 0.5,
        "x_t": inp[..., _XT],
        "present": inp[..., _PRESENT],
    }


def stylized_layout(prompt_audio: np.ndarray, prompt_motion: np.ndarray, drv_audio: np.ndarray,
                    x_t: np.ndarray) -> np.ndarray:
    """Prompt frames (clean motion, mask 0) followed by fully masked driving frames."""
    P = prompt_audio.shape[-2]
    if prompt_motion.shape[-2] != P:
        raise ShapeError("prompt audio and motion must be aligned")
    if x_t.shape[-2] != P + drv_audio.shape[-2]:
        raise ShapeError("x_t must span prompt + driving frames")
    audio = np.concatenate([prompt_audio, drv_audio], axis=-2)
    context = np.concatenate([prompt_motion, np.zeros(drv_audio.shape[:-1] + (D_MOTION,))], axis=-2)
    mask = np.concatenate([np.zeros(prompt_audio.shape[:-1], bool), np.ones(drv_audio.shape[:-1], bool)], axis=-1)
    return assemble_input(audio, context, x_t, mask, 1.0)


def unconditional_layout(drv_audio: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """Zero style prompt: no context anywhere, every frame masked, prompt flag 0."""
    return assemble_input(drv_audio, None, x_t, np.ones(drv_audio.shape[:-1], bool), 0.0)


def estimate_x1(x_t, t, v):
    """Single-step endpoint estimate ``x_t + (1 - t) v`` (exact on the straight path)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0):
        raise ValueError("estimate_x1 needs t < 1")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (np.ndim(x_t) - t.ndim))
    return x_t + v * (1.0 - t)


# ---------------------------------------------------------------------------
# sync scorer


def lagged_audio(audio: np.ndarray, lags: int = SYNC_LAGS) -> np.ndarray:
    """Stack ``audio[t - j]`` for j < lags along channels, zero-padded at the window start."""
    T = audio.shape[-2]
    parts = []
    for j in range(lags):
        shifted = np.zeros_like(audio)
        shifted[..., j:, :] = audio[..., : T - j, :]
        parts.append(shifted)
    return np.concatenate(parts, axis=-1)


class SyncScorer(Module):
    """Audio/motion window alignment score: ``scale * cos(E_a(audio), E_m(centered motion)) + bias``.

    ``scale`` starts at 0, so an untrained scorer ranks every pair equally.
    """

    def __init__(self, rng: np.random.Generator, embed: int = 16, lags: int = SYNC_LAGS):
        self.lags = lags
        self.audio_embed = Linear(D_AUDIO * lags, embed, rng, bias=False)
        self.motion_embed = Linear(D_MOTION, embed, rng, bias=False)
        self.scale = parameter(np.zeros(()))
        self.bias = parameter(np.zeros(()))
        self.frozen = False

    def freeze(self) -> "SyncScorer":
        super().freeze()
        self.frozen = True
        return self

    def forward(self, audio_win: np.ndarray, motion_win) -> Tensor:
        """``audio_win`` (N, W, 8) array, ``motion_win`` (N, W, 16) array or Tensor -> scores (N,)."""
        motion_win = motion_win if isinstance(motion_win, Tensor) else Tensor(motion_win)
        if audio_win.shape[:-1] != motion_win.shape[:-1]:
            raise ShapeError(f"audio window {audio_win.shape} vs motion window {motion_win.shape}")
        ea = self.audio_embed(lagged_audio(audio_win, self.lags))
        centered = motion_win - motion_win.mean(axis=-2, keepdims=True)
        em = self.motion_embed(centered)
        dot = (ea * em).sum(axis=(-2, -1))
        na = ((ea * ea).sum(axis=(-2, -1)) + 1e-8).sqrt()
        nm = ((em * em).sum(axis=(-2, -1)) + 1e-8).sqrt()
        return dot / (na * nm) * self.scale + self.bias


def _softplus(x: Tensor) -> Tensor:
    # smooth at 0 (the untrained scorer outputs exactly 0); scores are bounded by |scale| + |bias|
    return -(-x).sigmoid().log()


def _window_pairs(clips: Sequence[Clip], rng: np.random.Generator, per_clip: int, window: int = SYNC_WINDOW):
    """Aligned (audio, motion) windows plus the same motion with audio shifted by >= MIN_SHIFT frames."""
    aud_pos, aud_neg, mot = [], [], []
    for clip in clips:
        T = len(clip.audio)
        if T < window + MIN_SHIFT + 1:
            raise ValueError(f"clip of {T} frames too short for sync windows")
        for _ in range(per_clip):
            s = int(rng.integers(0, T - window + 1))
            choices = np.array([o for o in range(T - window + 1) if abs(o - s) >= MIN_SHIFT])
            o = int(rng.choice(choices))
            aud_pos.append(clip.audio[s : s + window])
            aud_neg.append(clip.audio[o : o + window])
            mot.append(clip.motion[s : s + window])
    return np.stack(aud_pos), np.stack(aud_neg), np.stack(mot)


def ranking_accuracy(pos: np.ndarray, neg: np.ndarray) -> float:
    """Fraction of pairs where the aligned score wins; ties count half."""
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


def sync_ranking_accuracy(scorer: SyncScorer, clips: Sequence[Clip], seed: int = 0, per_clip: int = 16) -> float:
    rng = np.random.default_rng(seed)
    ap, an, m = _window_pairs(clips, rng, per_clip)
    with no_grad():
        return ranking_accuracy(scorer(ap, m).data, scorer(an, m).data)


@dataclass
class SyncTrainConfig:
    epochs: int = 30
    per_clip: int = 8
    batch: int = 128
    lr: float = 3e-3
    seed: int = 0


def train_sync_scorer(dataset: SpeakerDataset, cfg: SyncTrainConfig = SyncTrainConfig(),
                      on_log: Callable[[int, float], None] | None = None) -> SyncScorer:
    """Contrastive (logistic) training of aligned vs time-shifted windows; returns a frozen scorer."""
    clips = dataset.train_clips()
    if len(clips) < 2:
        raise ValueError("sync scorer training needs at least 2 training clips")
    scorer = SyncScorer(np.random.default_rng(cfg.seed))
    opt = Adam(scorer.parameters(), lr=cfg.lr)
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        ap, an, m = _window_pairs(clips, rng, cfg.per_clip)
        order = rng.permutation(len(m))
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            pos = scorer(ap[idx], m[idx])
            neg = scorer(an[idx], m[idx])
            loss = (_softplus(-pos).mean() + _softplus(neg).mean()) * 0.5
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if on_log is not None:
                on_log(step, loss.item())
    return scorer.freeze()


def sync_windows(T: int, window: int = SYNC_WINDOW, stride: int = SYNC_STRIDE) -> np.ndarray:
    starts = np.arange(0, T - window + 1, stride)
    return starts[:, None] + np.arange(window)[None, :]


def sync_penalty(scorer: SyncScorer, audio: np.ndarray, motion, frame_mask: np.ndarray | None = None) -> Tensor:
    """Negative mean score over 16-frame windows (stride 8); windows without masked frames are skipped."""
    motion = motion if isinstance(motion, Tensor) else Tensor(motion)
    B, T, _ = motion.shape
    idx = sync_windows(T)
    if frame_mask is None:
        frame_mask = np.ones((B, T), bool)
    keep = frame_mask[:, idx].any(axis=-1)  # (B, n_windows)
    b_idx, w_idx = np.nonzero(keep)
    if len(b_idx) == 0:
        return Tensor(0.0)
    frames = idx[w_idx]
    aud = audio[b_idx[:, None], frames]
    mot = motion[b_idx[:, None], frames]
    return -scorer(aud, mot).mean()


# ---------------------------------------------------------------------------
# model, batches, loss


def build_model(cfg: TransformerConfig, seed: int, max_len: int = 256,
                in_window: tuple[int, int] = IN_WINDOW) -> VelocityModel:
    return VelocityModel(IN_CHANNELS, D_MOTION, cfg, np.random.default_rng(seed), max_len=max_len,
                         in_window=in_window)


@dataclass
class ICSBatch:
    inp: np.ndarray  # (B, L, IN_CHANNELS)
    t: np.ndarray  # (B,)
    x_t: np.ndarray
    u_t: np.ndarray
    x1: np.ndarray
    audio: np.ndarray
    mask: np.ndarray  # (B, L) bool, True = in loss


def make_batch(clips: Sequence[Clip], rng: np.random.Generator, batch: int, window: int,
               p_drop: float = P_DROP, t=None) -> ICSBatch:
    audio, motion, masks, present = [], [], [], []
    for _ in range(batch):
        clip = clips[int(rng.integers(len(clips)))]
        T = len(clip.audio)
        if T < window:
            raise ShapeError(f"clip of {T} frames shorter than training window {window}")
        s = int(rng.integers(0, T - window + 1))
        audio.append(clip.audio[s : s + window])
        motion.append(clip.motion[s : s + window])
        if rng.uniform() < p_drop:
            masks.append(np.ones(window, bool))
            present.append(0.0)
        else:
            masks.append(sample_mask(window, rng).to_array())
            present.append(1.0)
    audio, x1, mask, present = np.stack(audio), np.stack(motion), np.stack(masks), np.array(present)
    draw = draw_flow(x1, rng, t=t)
    context = x1 * present[:, None, None]
    inp = assemble_input(audio, context, draw.x_t, mask, present)
    return ICSBatch(inp=inp, t=draw.t, x_t=draw.x_t, u_t=draw.u_t, x1=x1, audio=audio, mask=mask)


def frame_loss_map(v: np.ndarray, u_t: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-frame squared velocity error as it enters the loss (zero outside the mask)."""
    return ((v - u_t) ** 2).sum(axis=-1) * mask


def icsa2m_loss(model: Callable, batch: ICSBatch, scorer: SyncScorer | None,
                lambda_sync: float = LAMBDA_SYNC) -> tuple[Tensor, Tensor, Tensor]:
    """(total, cfm_part, sync_part) with ``total = cfm_part + lambda_sync * sync_part``."""
    if scorer is not None and not scorer.frozen:
        raise ConfigError("the sync scorer must be frozen before A2M training")
    v = model(Tensor(batch.inp), batch.t)
    cfm_part = masked_mse(v, batch.u_t, batch.mask[..., None])
    if scorer is None or lambda_sync == 0.0:
        sync_part = Tensor(0.0)
        if scorer is not None:
            with no_grad():
                sync_part = sync_penalty(scorer, batch.audio, _composite(batch, v.detach()), batch.mask)
        return cfm_part, cfm_part, sync_part
    x1_hat = _composite(batch, v)
    sync_part = sync_penalty(scorer, batch.audio, x1_hat, batch.mask)
    return cfm_part + sync_part * lambda_sync, cfm_part, sync_part


def _composite(batch: ICSBatch, v: Tensor) -> Tensor:
    """Estimated endpoint on masked frames, ground truth elsewhere."""
    est = estimate_x1(batch.x_t, batch.t, v)
    m = batch.mask[..., None].astype(np.float64)
    return est * m + batch.x1 * (1.0 - m)


@dataclass
class A2MTrainConfig:
    steps: int = 3000
    batch: int = 8
    window: int = 128
    lr: float = 1e-3
    lambda_sync: float = LAMBDA_SYNC
    p_drop: float = P_DROP
    seed: int = 0
    log_every: int = 10
    warmup: int = 200
    schedule: str = "cosine"  # or "constant"
    final_lr_frac: float = 0.1

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.steps < 1 or self.batch < 1 or self.log_every < 1:
            raise ConfigError("steps, batch and log_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``final_lr_frac * lr``; a pure function of the step."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        if self.schedule == "constant":
            return self.lr
        frac = min(1.0, (step - self.warmup) / max(1, self.steps - self.warmup))
        floor = self.final_lr_frac
        return self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


@dataclass
class LossRecord:
    step: int
    total: float
    cfm: float
    sync: float
    wall_time: float


@dataclass
class A2MTrainer:
    """Owns model + optimizer so training can be checkpointed and resumed step-exactly.

    The batch for step ``k`` is drawn from ``default_rng([seed, k])``, so
    resuming needs only the parameters, the Adam moments and the step index.
    """

    model: VelocityModel
    dataset: SpeakerDataset
    cfg: A2MTrainConfig
    scorer: SyncScorer | None = None
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.cfg.lambda_sync > 0 and self.scorer is None:
            raise ConfigError("lambda_sync > 0 requires a trained sync scorer")
        if not 0.0 <= self.cfg.p_drop <= 1.0:
            raise ConfigError("p_drop must lie in [0, 1]")
        self.clips = self.dataset.train_clips()
        self.opt = Adam(self.model.parameters(), lr=self.cfg.lr)
        self._t0 = time.perf_counter()

    def batch_for(self, step: int) -> ICSBatch:
        rng = np.random.default_rng([self.cfg.seed, step])
        return make_batch(self.clips, rng, self.cfg.batch, self.cfg.window, self.cfg.p_drop)

    def train_step(self) -> tuple[float, float, float]:
        batch = self.batch_for(self.step)
        try:
            total, cfm, sync = icsa2m_loss(self.model, batch, self.scorer, self.cfg.lambda_sync)
            if not np.isfinite(total.item()):
                raise NumericalError("non-finite loss")
            self.opt.zero_grad()
            total.backward()
        except NumericalError as exc:
            raise NumericalError(f"A2M training diverged at step {self.step}: {exc}") from None
        self.opt.state.lr = self.cfg.lr_at(self.step)
        self.opt.step()
        self.step += 1
        return total.item(), cfm.item(), sync.item()

    def run(self, steps: int | None = None, on_log: Callable[[LossRecord], None] | None = None) -> list[LossRecord]:
        end = self.cfg.steps if steps is None else self.step + steps
        while self.step < end:
            total, cfm, sync = self.train_step()
            if self.step % self.cfg.log_every == 0:
                rec = LossRecord(self.step, total, cfm, sync, time.perf_counter() - self._t0)
                self.history.append(rec)
                if on_log is not None:
                    on_log(rec)
                log.debug("a2m step %d total %.5f cfm %.5f sync %.5f", self.step, total, cfm, sync)
        return self.history

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out.update(self.opt.state_arrays("opt"))
        out["trainer/step"] = np.array([float(self.step)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict(arrays, prefix="model/")
        self.opt = Adam(self.model.parameters(), lr=self.cfg.lr)
        self.opt.load_state_arrays(arrays, "opt")
        self.step = int(arrays["trainer/step"][0])


def train_icsa2m(model: VelocityModel, dataset: SpeakerDataset, cfg: A2MTrainConfig,
                 scorer: SyncScorer | None = None) -> tuple[VelocityModel, list[LossRecord]]:
    trainer = A2MTrainer(model, dataset, cfg, scorer)
    return model, trainer.run()


# ---------------------------------------------------------------------------
# inference


def _model_velocity(model: VelocityModel, inp: np.ndarray, t: float) -> np.ndarray:
    t_arr = np.full(inp.shape[0], t)
    with no_grad():
        return model(Tensor(inp), t_arr).data


def _batched(a: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    return (a[None], True) if a.ndim == 2 else (a, False)


def infer_stylized(model: VelocityModel, drv_audio: np.ndarray, ref_audio: np.ndarray, ref_motion: np.ndarray,
                   rng: np.random.Generator, w: float = 2.0, solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Prompt-conditioned guided sampling; returns only the driving-segment motion.

    Accepts single sequences (T, C) or batches (B, T, C). Prompt frames follow
    the exact straight path toward the reference motion, matching how unmasked
    frames look during training.
    """
    drv, single = _batched(drv_audio)
    ref_a, _ = _batched(ref_audio)
    ref_m, _ = _batched(ref_motion)
    if ref_a.shape[:2] != ref_m.shape[:2]:
        raise ShapeError(f"reference audio {ref_a.shape} and motion {ref_m.shape} are not aligned")
    if ref_a.shape[0] != drv.shape[0]:
        raise ShapeError("reference and driving batches differ in size")
    P = ref_a.shape[1]
    if P + drv.shape[1] > model.max_len:
        raise ShapeError(f"prompt ({P}) + driving ({drv.shape[1]}) frames exceed max_len {model.max_len}")

    def prompt_velocity(x, t):
        return (ref_m - x[:, :P]) / (1.0 - t)

    def cond(x, t):
        v = _model_velocity(model, stylized_layout(ref_a, ref_m, drv, x), t)
        v[:, :P] = prompt_velocity(x, t)
        return v

    def uncond(x, t):
        v = np.empty_like(x)
        v[:, :P] = prompt_velocity(x, t)
        v[:, P:] = _model_velocity(model, unconditional_layout(drv, x[:, P:]), t)
        return v

    out = sample(cond, (drv.shape[0], P + drv.shape[1], D_MOTION), rng,
                 uncond_fn=uncond if w != 0.0 else None, w=w, solver=solver)[:, P:]
    return out[0] if single else out


def infer_unstylized(model: VelocityModel, drv_audio: np.ndarray, rng: np.random.Generator,
                     solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Audio-only sampling with a zero style prompt; the style comes from the noise draw."""
    drv, single = _batched(drv_audio)
    if drv.shape[1] > model.max_len:
        raise ShapeError(f"{drv.shape[1]} frames exceed max_len {model.max_len}")
    out = sample(lambda x, t: _model_velocity(model, unconditional_layout(drv, x), t),
                 drv.shape[:2] + (D_MOTION,), rng, solver=solver)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class StyleTrials:
    prompt_speaker: np.ndarray
    other_speaker: np.ndarray
    err_prompt: np.ndarray  # L2 between recovered and prompt-speaker gains
    err_other: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.err_prompt < self.err_other))


def style_recovery_trials(model: VelocityModel, dataset: SpeakerDataset, n_trials: int = 100, seed: int = 0,
                          w: float = 2.0, solver: SolverConfig = SolverConfig(),
                          prompt_len: int = DEFAULT_PROMPT_LEN, drv_len: int = 64) -> StyleTrials:
    """Prompt with a held-out clip of one speaker, drive with fresh audio, recover gains from the output.

    Trials are fully determined by ``seed`` (prompts, driving audio, noise), so
    two calls differing only in ``w`` form a paired comparison.
    """
    from .synthbench import gen_audio, recover_style

    rng = np.random.default_rng(seed)
    n_spk = len(dataset.speakers)
    ks = rng.integers(0, n_spk, n_trials)
    js = (ks + rng.integers(1, n_spk, n_trials)) % n_spk
    ref_a, ref_m, drv = [], [], []
    for k in ks:
        held = dataset.clips_of(int(k), heldout=True) or dataset.clips_of(int(k))
        clip = held[int(rng.integers(len(held)))]
        s = int(rng.integers(0, len(clip.audio) - prompt_len + 1))
        ref_a.append(clip.audio[s : s + prompt_len])
        ref_m.append(clip.motion[s : s + prompt_len])
        drv.append(gen_audio(drv_len, rng))
    ref_a, ref_m, drv = np.stack(ref_a), np.stack(ref_m), np.stack(drv)
    out = infer_stylized(model, drv, ref_a, ref_m, np.random.default_rng([seed, 1]), w=w, solver=solver)
    err_p, err_o = np.empty(n_trials), np.empty(n_trials)
    for i in range(n_trials):
        est = recover_style(drv[i], out[i], warmup_audio=ref_a[i])
        err_p[i] = np.linalg.norm(est.gain - dataset.speakers[ks[i]].gain)
        err_o[i] = np.linalg.norm(est.gain - dataset.speakers[js[i]].gain)
    return StyleTrials(ks, js, err_p, err_o)


def generated_sync_accuracy(model: VelocityModel, scorer: SyncScorer, dataset: SpeakerDataset, seed: int = 0,
                            w: float = 2.0, solver: SolverConfig = SolverConfig(),
                            prompt_len: int = DEFAULT_PROMPT_LEN, drv_len: int = 64) -> float:
    """Scorer ranking accuracy (aligned vs shifted audio) on motion generated for held-out clips."""
    clips = dataset.heldout_clips()
    ref_a = np.stack([c.audio[:prompt_len] for c in clips])
    ref_m = np.stack([c.motion[:prompt_len] for c in clips])
    drv = np.stack([c.audio[prompt_len : prompt_len + drv_len] for c in clips])
    out = infer_stylized(model, drv, ref_a, ref_m, np.random.default_rng([seed, 2]), w=w, solver=solver)
    gen = [Clip(c.speaker, drv[i], out[i], True) for i, c in enumerate(clips)]
    return sync_ranking_accuracy(scorer, gen, seed=seed)


__all__ = [
    "A2MTrainConfig", "A2MTrainer", "ICSBatch", "IN_CHANNELS", "MaskSpec", "StyleTrials", "SyncScorer",
    "SyncTrainConfig", "assemble_input", "build_model", "estimate_x1", "frame_loss_map", "generated_sync_accuracy",
    "icsa2m_loss", "infer_stylized", "style_recovery_trials",
    "infer_unstylized", "make_batch", "sample_mask", "split_channels", "stylized_layout", "sync_penalty",
    "sync_ranking_accuracy", "train_icsa2m", "train_sync_scorer", "unconditional_layout",
]
