"""Synthetic corpora for desk-scale training.

Two generators:

* motion: act-conditioned sinusoidal gestures with speech-like
  conditioning tracks carrying the gesture phase but not the act;
* affect: conversations of sentences whose per-modality features encode
  valence/arousal with noise that grows as the modality's reliability
  drops, plus per-sentence speech frames for driving the motion model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .container import Clip, Container, schema
from .gbdt import MODALITIES
from .policy import ACTS


class SynthSpecError(ValueError):
    pass


def _from_dict(cls, d: Mapping):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise SynthSpecError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


# ---------------------------------------------------------------------------
# motion


@dataclass(frozen=True)
class MotionSynthSpec:
    n_clips: int = 256
    frames: int = 32
    motion_dim: int = 8
    audio_dim: int = 4
    text_dim: int = 4
    fps: float = 30.0
    acts: tuple[str, ...] = ("explain", "neutral")
    amplitudes: tuple[float, ...] = (1.0, 0.5)
    freq_range: tuple[float, float] = (0.8, 1.5)
    noise: float = 0.05
    mixed_frac: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1 or self.frames < 4 or self.motion_dim < 1:
            raise SynthSpecError("need n_clips >= 1, frames >= 4, motion_dim >= 1")
        if len(self.acts) != len(self.amplitudes) or not self.acts:
            raise SynthSpecError("one amplitude per act is required")
        if any(a not in ACTS for a in self.acts):
            raise SynthSpecError(f"acts must come from {ACTS}")
        if self.audio_dim < 2 or self.text_dim < 1:
            raise SynthSpecError("audio_dim must be >= 2 and text_dim >= 1")
        if self.noise < 0 or not 0 <= self.mixed_frac <= 1:
            raise SynthSpecError("noise must be >= 0 and mixed_frac in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MotionSynthSpec":
        return _from_dict(cls, d)


def gesture(amplitude: np.ndarray, phase: np.ndarray, motion_dim: int) -> np.ndarray:
    """Per-frame amplitude times a phase-shifted sine on every motion channel."""
    return amplitude[:, None] * np.sin(phase[:, None] + 0.4 * np.arange(motion_dim))


def speech_tracks(phase, freq, audio_dim, text_dim, rng, jitter=0.1):
    T = phase.size
    audio = np.concatenate([
        np.stack([np.sin(phase), np.cos(phase)], axis=1),
        np.full((T, 1), freq)[:, : max(0, audio_dim - 2)],
        jitter * rng.standard_normal((T, max(0, audio_dim - 3))),
    ], axis=1)[:, :audio_dim]
    text = jitter * rng.standard_normal((T, text_dim))
    return audio, text


def synth_motion(spec: MotionSynthSpec) -> Container:
    rng = np.random.default_rng(spec.seed)
    act_idx = [ACTS.index(a) for a in spec.acts]
    amp_of = dict(zip(act_idx, spec.amplitudes))
    T = spec.frames
    clips = []
    for i in range(spec.n_clips):
        first = act_idx[i % len(act_idx)]
        frame_acts = np.full(T, first)
        if len(act_idx) > 1 and rng.random() < spec.mixed_frac:
            other = act_idx[int(rng.integers(0, len(act_idx)))]
            cut = int(rng.integers(T // 4, 3 * T // 4 + 1))
            frame_acts[cut:] = other
        freq = rng.uniform(*spec.freq_range)
        phase = 2 * np.pi * freq * np.arange(T) / spec.fps + rng.uniform(0, 2 * np.pi)
        amp = np.array([amp_of[a] for a in frame_acts])
        motion = gesture(amp, phase, spec.motion_dim)
        motion += spec.noise * rng.standard_normal(motion.shape)
        audio, text = speech_tracks(phase, freq, spec.audio_dim, spec.text_dim, rng)
        clips.append(Clip(f"clip{i:05d}", {
            "motion": motion,
            "audio": audio,
            "text": text,
            "acts": np.eye(len(ACTS))[frame_acts],
        }))
    streams = schema(motion=(spec.motion_dim, "frame"), audio=(spec.audio_dim, "frame"),
                     text=(spec.text_dim, "frame"), acts=(len(ACTS), "frame"))
    meta = {"kind": "motion", "fps": spec.fps, "acts": list(ACTS), "spec": asdict(spec)}
    return Container(streams, clips, meta)


def motion_dataset(container: Container, ids=None):
    """Container -> diffusion MotionDataset (cond = audio ++ text)."""
    from .diffusion import MotionDataset

    clips = container.clips if ids is None else [container[i] for i in ids]
    if not clips:
        raise ValueError("no motion clips")
    motion = np.stack([c.streams["motion"] for c in clips]).astype(np.float64)
    cond = np.stack([np.concatenate([c.streams["audio"], c.streams["text"]], axis=1)
                     for c in clips]).astype(np.float64)
    acts = np.stack([c.streams["acts"].argmax(axis=1) for c in clips])
    return MotionDataset(motion, cond, acts, float(container.meta.get("fps", 30.0)))


# ---------------------------------------------------------------------------
# affect


@dataclass(frozen=True)
class AffectSynthSpec:
    n_conversations: int = 60
    sentences: tuple[int, int] = (6, 12)
    dims: tuple[int, int, int] = (16, 24, 8)  # text, visual, acoustic
    noise: float = 0.05
    unreliable_noise: float = 0.6
    outlier_frac: float = 0.0
    frames_per_sentence: tuple[int, int] = (12, 24)
    audio_dim: int = 4
    text_dim: int = 4
    fps: float = 30.0
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.n_conversations < 1:
            raise SynthSpecError("need at least one conversation")
        lo, hi = self.sentences
        if not 1 <= lo <= hi:
            raise SynthSpecError("sentences must be a (min, max) pair with 1 <= min <= max")
        if min(self.dims) < 2 or len(self.dims) != 3:
            raise SynthSpecError("dims must be three values >= 2")
        if self.noise < 0 or self.unreliable_noise < 0 or not 0 <= self.outlier_frac < 1:
            raise SynthSpecError("noise levels must be >= 0 and outlier_frac in [0, 1)")
        if self.frames_per_sentence[0] < 1 or self.frames_per_sentence[0] > self.frames_per_sentence[1]:
            raise SynthSpecError("frames_per_sentence must be a (min, max) pair >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AffectSynthSpec":
        return _from_dict(cls, d)


def _planted(v, a, dim, rng_mod, which):
    """Columns 0..2 carry valence/arousal signals; the rest are distractors."""
    n = v.size
    X = rng_mod.standard_normal((n, dim)) * 0.5
    X[:, 0] = v if which != "acoustic" else np.tanh(2 * v)
    X[:, 1] = a if which != "text" else a ** 2
    X[:, 2] = np.sin(np.pi * v) + (a - 0.5)
    return X


def synth_affect(spec: AffectSynthSpec) -> Container:
    rng = np.random.default_rng(spec.seed)
    dims = dict(zip(MODALITIES, spec.dims))
    clips = []
    n = spec.n_conversations
    cut1 = int(round(spec.splits[0] * n))
    cut2 = int(round((spec.splits[0] + spec.splits[1]) * n))
    for i in range(n):
        m = int(rng.integers(spec.sentences[0], spec.sentences[1] + 1))
        # slowly drifting affect so smoothing and trends have something to track
        v = np.clip(np.cumsum(rng.normal(0, 0.25, m)) + rng.uniform(-0.5, 0.5), -1, 1)
        a = np.clip(np.cumsum(rng.normal(0, 0.12, m)) + rng.uniform(0.1, 0.7), 0, 1)
        rel = rng.uniform(0, 1, (m, 3))  # gate order: visual, acoustic, text
        streams = {}
        for k, mod in enumerate(("visual", "acoustic", "text")):
            X = _planted(v, a, dims[mod], rng, mod)
            sigma = spec.noise + spec.unreliable_noise * (1 - rel[:, k])
            X[:, :3] += sigma[:, None] * rng.standard_normal((m, 3))
            streams[mod] = X
        yv, ya = v.copy(), a.copy()
        if spec.outlier_frac > 0:
            hit = rng.random(m) < spec.outlier_frac
            yv[hit] = rng.choice([-1.0, 1.0], hit.sum())
        streams["reliability"] = rel
        streams["targets"] = np.stack([yv, ya], axis=1)
        nf = rng.integers(spec.frames_per_sentence[0], spec.frames_per_sentence[1] + 1, m)
        streams["frames"] = nf[:, None].astype(np.float64)
        total = int(nf.sum())
        freq = rng.uniform(0.8, 1.5)
        phase = 2 * np.pi * freq * np.arange(total) / spec.fps + rng.uniform(0, 2 * np.pi)
        audio, text = speech_tracks(phase, freq, spec.audio_dim, spec.text_dim, rng)
        streams["audio"] = audio
        streams["text_cond"] = text
        split = "train" if i < cut1 else "dev" if i < cut2 else "test"
        clips.append(Clip(f"conv{i:04d}", streams, {"split": split}))
    streams = schema(
        text=(dims["text"], "sentence"), visual=(dims["visual"], "sentence"),
        acoustic=(dims["acoustic"], "sentence"), reliability=(3, "sentence"),
        targets=(2, "sentence"), frames=(1, "sentence"),
        audio=(spec.audio_dim, "frame"), text_cond=(spec.text_dim, "frame"),
    )
    meta = {"kind": "affect", "fps": spec.fps, "acts": list(ACTS), "spec": asdict(spec),
            "reliability_order": ["visual", "acoustic", "text"]}
    return Container(streams, clips, meta)


def affect_arrays(clips) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Stack sentence streams: ({modality: X}, G, Y)."""
    if not clips:
        raise ValueError("no affect clips")
    feats = {m: np.concatenate([c.streams[m] for c in clips]).astype(np.float64) for m in MODALITIES}
    G = np.concatenate([c.streams["reliability"] for c in clips]).astype(np.float64)
    Y = np.concatenate([c.streams["targets"] for c in clips]).astype(np.float64)
    return feats, G, Y
