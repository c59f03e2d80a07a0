"""Synthetic stylized audio->motion speakers and parametric identity images.

Each speaker's talking style is an identifiable tuple (gain, offset, smoothing
tau) applied to a shared sparse articulation map, so style can be recovered
from any (audio, motion) pair by least squares. That recovery oracle is what
turns style mimicking into a measurable quantity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import lfilter

D_MOTION = 16
D_AUDIO = 8
N_LIP = 4
IMAGE_SIZE = 32
IDENTITY_DIM = 8
AUDIO_WINDOW = 3
TAU_RANGE = (1.0, 8.0)


def default_articulation() -> np.ndarray:
    """Shared sparse map: lip dims mix two audio channels, the rest follow one channel weakly."""
    art = np.zeros((D_MOTION, D_AUDIO))
    for d in range(N_LIP):
        art[d, 2 * d] = 0.8
        art[d, 2 * d + 1] = 0.6
    for d in range(N_LIP, D_MOTION):
        art[d, (3 * d) % D_AUDIO] = 0.5
    return art


ARTICULATION = default_articulation()


@dataclass
class SyntheticSpeaker:
    gain: np.ndarray
    offset: np.ndarray
    tau: float
    articulation: np.ndarray = field(default_factory=lambda: ARTICULATION.copy())

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.tau = float(self.tau)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.gain, self.offset, [self.tau]])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "SyntheticSpeaker":
        d = (len(arr) - 1) // 2
        return cls(gain=arr[:d].copy(), offset=arr[d : 2 * d].copy(), tau=float(arr[-1]))


def random_speaker(rng: np.random.Generator) -> SyntheticSpeaker:
    return SyntheticSpeaker(
        gain=rng.uniform(0.5, 2.0, D_MOTION),
        offset=rng.uniform(-0.5, 0.5, D_MOTION),
        tau=rng.uniform(*TAU_RANGE),
    )


def smooth(u: np.ndarray, tau: float) -> np.ndarray:
    """Causal exponential smoothing along time: ``y[t] = y[t-1] + (u[t] - y[t-1]) / tau``, ``y[-1] = 0``."""
    alpha = 1.0 / tau
    return lfilter([alpha], [1.0, alpha - 1.0], u, axis=0)


def gen_audio(T: int, rng: np.random.Generator, channels: int = D_AUDIO, window: int = AUDIO_WINDOW) -> np.ndarray:
    """Band-limited noise: white noise through a length-``window`` moving sum scaled to unit variance."""
    if T < 1:
        raise ValueError("T must be >= 1")
    white = rng.standard_normal((T + window - 1, channels))
    return lfilter(np.ones(window) / np.sqrt(window), [1.0], white, axis=0)[window - 1 :]


def articulation_signal(audio: np.ndarray, tau: float = 1.0, articulation: np.ndarray = ARTICULATION) -> np.ndarray:
    """Style-free drive ``smooth(audio @ A^T, tau)``."""
    return smooth(audio @ articulation.T, tau)


def gen_motion(audio: np.ndarray, speaker: SyntheticSpeaker) -> np.ndarray:
    """Ground-truth law: ``motion = offset + gain * smooth(audio @ A^T, tau)``."""
    return speaker.offset + speaker.gain * articulation_signal(audio, speaker.tau, speaker.articulation)


@dataclass
class StyleEstimate:
    gain: np.ndarray
    offset: np.ndarray
    tau: float
    residual: float
    degenerate: np.ndarray  # per-dim flag: unidentifiable or near-zero gain

    @property
    def flagged(self) -> bool:
        return bool(self.degenerate.any())


def _fit_given_tau(drive: np.ndarray, motion: np.ndarray, tau: float, skip: int = 0):
    s = smooth(drive, tau)[skip:]
    s_mean = s.mean(axis=0)
    m_mean = motion.mean(axis=0)
    sc = s - s_mean
    var = (sc * sc).sum(axis=0)
    ok = var > 1e-12 * len(s)
    cov = (sc * (motion - m_mean)).sum(axis=0)
    gain = np.where(ok, cov / np.where(ok, var, 1.0), 0.0)
    offset = m_mean - gain * s_mean
    resid = motion - offset - gain * s
    return gain, offset, float((resid * resid).sum()), ok


def recover_style(audio: np.ndarray, motion: np.ndarray, articulation: np.ndarray = ARTICULATION,
                  refine: bool = True, warmup_audio: np.ndarray | None = None) -> StyleEstimate:
    """Least-squares (gain, offset) per dim under a shared tau.

    tau is grid-searched over 1..8 and then polished with a bounded scalar search.
    ``warmup_audio`` (frames preceding ``audio``) only primes the smoothing state,
    for motion that continues an earlier segment instead of starting at rest.
    """
    audio = np.asarray(audio, dtype=np.float64)
    motion = np.asarray(motion, dtype=np.float64)
    if audio.shape[0] != motion.shape[0]:
        raise ValueError("audio and motion must share the frame count")
    if audio.shape[0] < 4 * audio.shape[1]:
        raise ValueError(f"need at least {4 * audio.shape[1]} frames, got {audio.shape[0]}")
    skip = 0
    if warmup_audio is not None:
        skip = len(warmup_audio)
        audio = np.concatenate([np.asarray(warmup_audio, dtype=np.float64), audio])
    drive = audio @ articulation.T
    grid = np.arange(1, 9, dtype=np.float64)
    sse = [_fit_given_tau(drive, motion, tau, skip)[2] for tau in grid]
    best = float(grid[int(np.argmin(sse))])
    if refine:
        lo, hi = max(TAU_RANGE[0], best - 1.0), min(TAU_RANGE[1], best + 1.0)
        res = minimize_scalar(lambda tau: _fit_given_tau(drive, motion, tau, skip)[2], bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-10})
        if res.fun < min(sse):
            best = float(res.x)
    gain, offset, resid, ok = _fit_given_tau(drive, motion, best, skip)
    degenerate = ~ok | (np.abs(gain) < 1e-3)
    return StyleEstimate(gain=gain, offset=offset, tau=best, residual=resid, degenerate=degenerate)


# ---------------------------------------------------------------------------
# speaker datasets


@dataclass
class Clip:
    speaker: int
    audio: np.ndarray
    motion: np.ndarray
    heldout: bool = False


@dataclass
class SpeakerDataset:
    speakers: list[SyntheticSpeaker]
    clips: list[Clip]

    def train_clips(self) -> list[Clip]:
        return [c for c in self.clips if not c.heldout]

    def heldout_clips(self) -> list[Clip]:
        return [c for c in self.clips if c.heldout]

    def clips_of(self, speaker: int, heldout: bool | None = None) -> list[Clip]:
        return [c for c in self.clips if c.speaker == speaker and (heldout is None or c.heldout == heldout)]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"speakers": np.stack([s.to_array() for s in self.speakers]),
               "articulation": self.speakers[0].articulation.copy()}
        out["clip_meta"] = np.array([[c.speaker, float(c.heldout)] for c in self.clips], dtype=np.float64)
        for i, c in enumerate(self.clips):
            out[f"clip/{i:05d}/audio"] = c.audio
            out[f"clip/{i:05d}/motion"] = c.motion
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SpeakerDataset":
        art = arrays["articulation"]
        speakers = []
        for row in arrays["speakers"]:
            s = SyntheticSpeaker.from_array(row)
            s.articulation = art.copy()
            speakers.append(s)
        clips = []
        for i, (spk, held) in enumerate(arrays["clip_meta"]):
            clips.append(Clip(int(spk), arrays[f"clip/{i:05d}/audio"].copy(),
                              arrays[f"clip/{i:05d}/motion"].copy(), bool(held)))
        return cls(speakers, clips)


def gen_speaker_dataset(n_speakers: int, clips_per: int, T: int, rng: np.random.Generator,
                        heldout_per_speaker: int = 1, min_gain_distance: float = 0.1) -> SpeakerDataset:
    """Speakers with pairwise-distinct gains (rejection sampled); the last clips of each speaker are held out."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    speakers: list[SyntheticSpeaker] = []
    while len(speakers) < n_speakers:
        cand = random_speaker(rng)
        if all(np.linalg.norm(cand.gain - s.gain) > min_gain_distance for s in speakers):
            speakers.append(cand)
    n_held = min(heldout_per_speaker, clips_per - 1) if clips_per > 1 else 0
    clips = []
    for sid, spk in enumerate(speakers):
        for j in range(clips_per):
            audio = gen_audio(T, rng)
            clips.append(Clip(sid, audio, gen_motion(audio, spk), heldout=j >= clips_per - n_held))
    return SpeakerDataset(speakers, clips)


# ---------------------------------------------------------------------------
# identity images


@dataclass
class SyntheticIdentity:
    vector: np.ndarray  # 8 floats inside the unit ball


def _coords(size: int = IMAGE_SIZE):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="xy")  # u: horizontal, v: vertical (down)


def _soft(inside: np.ndarray, sharpness: float = 0.06) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(inside / sharpness))


def render_identity(identity: SyntheticIdentity | np.ndarray, m: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Grayscale face-like pattern in [0, 1]; ``m`` in [0, 1] opens the mouth and drops the jaw.

    The opening follows ``amp * m**gamma`` with identity-specific amp and gamma,
    so dynamics are personal as well as appearance.
    """
    z = identity.vector if isinstance(identity, SyntheticIdentity) else np.asarray(identity)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"motion scalar must lie in [0, 1], got {m}")
    u, v = _coords(size)
    cx, cy = 0.08 * z[0], 0.08 * z[1]
    rx, ry = 0.62 + 0.12 * z[2], 0.74 + 0.1 * z[3]
    gamma = np.exp(0.8 * z[6])
    amp = 0.2 + 0.08 * z[5]
    opening = amp * m**gamma
    jaw = 0.5 * opening
    # lower half of the face stretches with the jaw
    ry_eff = np.where(v > cy, ry + jaw, ry)
    face = _soft(1.0 - np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry_eff) ** 2))
    theta = 0.5 * np.pi * z[6]
    freq = 4.0 + 2.0 * z[5]
    skin = 0.55 + 0.25 * z[4] + 0.12 * np.sin(np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + 3.0 * z[7])
    img = 0.08 + (skin - 0.08) * face
    for side in (-1.0, 1.0):
        ex, ey = cx + side * (0.3 + 0.05 * z[7]), cy - 0.22
        eye = _soft(1.0 - np.sqrt(((u - ex) / 0.11) ** 2 + ((v - ey) / 0.08) ** 2))
        img = img * (1.0 - eye) + 0.1 * eye
    mx, my = cx, cy + 0.38 + 0.05 * z[7] + 0.5 * jaw
    mw = 0.34 + 0.06 * z[3]
    mouth = _soft(1.0 - np.sqrt(((u - mx) / mw) ** 2 + ((v - my) / (0.04 + opening)) ** 2))
    img = img * (1.0 - mouth) + 0.05 * mouth
    return np.clip(img, 0.0, 1.0)


def motion_trajectory(frames: int, rng: np.random.Generator) -> np.ndarray:
    """Oscillating motion scalars in [0, 1] starting from the neutral value 0."""
    t = np.arange(frames, dtype=np.float64)
    omega = 2 * np.pi * rng.uniform(2.5, 4.5) / max(frames, 1)
    wobble = rng.uniform(0.3, 0.8) * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t / max(frames, 1))
    return 0.5 * (1.0 - np.cos(omega * t + wobble))


@dataclass
class IdentityWorld:
    identities: np.ndarray  # (N, 8)
    conditions: np.ndarray  # (N, F)
    frames: np.ndarray  # (N, F, H, W)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"identities": self.identities, "conditions": self.conditions, "frames": self.frames}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "IdentityWorld":
        return cls(arrays["identities"].copy(), arrays["conditions"].copy(), arrays["frames"].copy())

    def __len__(self) -> int:
        return len(self.identities)


def _unit_ball(rng: np.random.Generator, dim: int) -> np.ndarray:
    d = rng.standard_normal(dim)
    return d / np.linalg.norm(d) * rng.uniform() ** (1.0 / dim)


def gen_identity_world(n_identities: int, frames_per: int, rng: np.random.Generator,
                       min_l1: float = 0.05) -> IdentityWorld:
    """Identities rejection-sampled to be visibly distinct (neutral-frame mean L1 > ``min_l1``)."""
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    vectors: list[np.ndarray] = []
    neutral: list[np.ndarray] = []
    while len(vectors) < n_identities:
        z = _unit_ball(rng, IDENTITY_DIM)
        img = render_identity(z, 0.0)
        if all(np.abs(img - other).mean() > min_l1 for other in neutral):
            vectors.append(z)
            neutral.append(img)
    conds = np.stack([motion_trajectory(frames_per, rng) for _ in vectors])
    frames = np.stack([[render_identity(z, float(m)) for m in row] for z, row in zip(vectors, conds)])
    return IdentityWorld(np.stack(vectors), conds, frames)
