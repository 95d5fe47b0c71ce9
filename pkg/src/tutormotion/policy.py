"""Affect-to-teaching-act policy.

Sentence-level V/A estimates are exponentially smoothed, differenced into
short-term trends, and mapped to a teaching act by a fixed priority list.
Thresholds are strict except the closed ranges in the hint and explain rules.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

ACTS = ("praise", "hint", "explain", "checkin", "slow_down", "challenge", "neutral", "unclear")
K = len(ACTS)


@dataclass(frozen=True)
class TeachingAct:
    label: str

    def __post_init__(self):
        if self.label not in ACTS:
            raise ValueError(f"unknown teaching act {self.label!r}")

    @property
    def index(self) -> int:
        return ACTS.index(self.label)

    def one_hot(self) -> np.ndarray:
        u = np.zeros(K)
        u[self.index] = 1.0
        return u

    @classmethod
    def from_index(cls, i: int) -> "TeachingAct":
        return cls(ACTS[i])


@dataclass(frozen=True)
class PolicyThresholds:
    v_pos: float = 0.24
    v_neg: float = -0.11
    a_high: float = 0.42
    trend_eps: float = 0.02
    conf_min: float = 0.5
    alpha: float = 0.3

    def __post_init__(self):
        if not self.v_neg < 0 < self.v_pos:
            raise ValueError("need v_neg < 0 < v_pos")
        if not 0 < self.a_high < 1:
            raise ValueError("need 0 < a_high < 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("need 0 < alpha <= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyThresholds":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AffectState:
    v_bar: float
    a_bar: float
    dv: float = 0.0
    da: float = 0.0
    confidence: float = 1.0
    step_index: int = 0


def smooth(prev: AffectState | None, v: float, a: float, alpha: float = 0.3):
    """One exponential smoothing step; the first step takes the raw value."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if prev is None:
        return float(v), float(a)
    return (alpha * v + (1 - alpha) * prev.v_bar,
            alpha * a + (1 - alpha) * prev.a_bar)


def step_state(prev: AffectState | None, v: float, a: float, confidence: float = 1.0,
               alpha: float = 0.3) -> AffectState:
    """Advance the smoothed state by one sentence."""
    v_bar, a_bar = smooth(prev, v, a, alpha)
    if prev is None:
        return AffectState(v_bar, a_bar, 0.0, 0.0, confidence, 0)
    return AffectState(v_bar, a_bar, v_bar - prev.v_bar, a_bar - prev.a_bar,
                       confidence, prev.step_index + 1)


def decide(state: AffectState, th: PolicyThresholds = PolicyThresholds()) -> TeachingAct:
    v, a, dv, da = state.v_bar, state.a_bar, state.dv, state.da
    eps = th.trend_eps
    if state.confidence < th.conf_min:
        return TeachingAct("unclear")
    # regulation first
    if (a > th.a_high and v < th.v_neg) or (da > eps and dv < -eps):
        return TeachingAct("slow_down")
    if v > th.v_pos and a > th.a_high and dv > eps:
        return TeachingAct("challenge")
    if v > th.v_pos:
        return TeachingAct("praise")
    if dv < -eps and a <= th.a_high:
        return TeachingAct("hint")
    if th.v_neg <= v <= th.v_pos and a > th.a_high / 2:
        return TeachingAct("explain")
    return TeachingAct("neutral")


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ActSchedule:
    per_frame: np.ndarray
    clip_level: np.ndarray

    @property
    def frame_indices(self) -> np.ndarray:
        return self.per_frame.argmax(axis=1)

    @property
    def clip_act(self) -> TeachingAct:
        return TeachingAct.from_index(int(self.clip_level.argmax()))


def modal_act(indices) -> int:
    """Most frequent act index; ties go to the lower index."""
    counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=K)
    return int(np.argmax(counts))


def encode_schedule(acts: Sequence, frame_spans: Sequence[tuple[int, int]], T: int) -> ActSchedule:
    """Per-frame one-hot schedule from per-sentence acts and [start, end) spans."""
    if T <= 0:
        raise ValueError("T must be positive")
    if len(acts) != len(frame_spans):
        raise ValueError("one frame span per sentence is required")
    idx = np.full(T, -1, dtype=np.int64)
    for act, (start, end) in zip(acts, frame_spans):
        if not 0 <= start < end <= T:
            raise ValueError(f"span [{start}, {end}) outside [0, {T})")
        if np.any(idx[start:end] >= 0):
            raise ValueError(f"span [{start}, {end}) overlaps another sentence")
        idx[start:end] = _act_index(act)
    gaps = np.flatnonzero(idx < 0)
    if gaps.size:
        raise ValueError(f"frames {gaps[0]}..{gaps[-1]} are not covered by any sentence")
    per_frame = np.eye(K)[idx]
    clip = np.eye(K)[modal_act(idx)]
    return ActSchedule(per_frame, clip)


def constant_schedule(act, T: int) -> ActSchedule:
    return encode_schedule([act], [(0, T)], T)


def _act_index(act) -> int:
    if isinstance(act, TeachingAct):
        return act.index
    if isinstance(act, str):
        return TeachingAct(act).index
    return int(act)


# ---------------------------------------------------------------------------
# streaming


class ActPolicy:
    """Stateful wrapper holding the previous smoothed state for one stream.

    ``external_command`` optionally replaces the rule set: the command gets
    one JSON object per call on stdin and must print ``{"act": label}``.
    """

    def __init__(self, thresholds: PolicyThresholds = PolicyThresholds(),
                 external_command: Sequence[str] | None = None):
        self.thresholds = thresholds
        self.external_command = external_command
        self.state: AffectState | None = None

    def reset(self):
        self.state = None

    def step(self, v: float, a: float, confidence: float = 1.0) -> tuple[TeachingAct, AffectState]:
        self.state = step_state(self.state, v, a, confidence, self.thresholds.alpha)
        if self.external_command:
            return self._external(self.state), self.state
        return decide(self.state, self.thresholds), self.state

    def _external(self, state: AffectState) -> TeachingAct:
        proc = subprocess.run(list(self.external_command), input=json.dumps(asdict(state)),
                              capture_output=True, text=True, check=True, timeout=60)
        return TeachingAct(json.loads(proc.stdout)["act"])

    def run_stream(self, records: Iterable[Mapping]) -> Iterator[dict]:
        """JSON-lines protocol: {v, a, confidence, sentence_id} -> {act, v_bar, a_bar, dv, da}."""
        for rec in records:
            act, st = self.step(float(rec["v"]), float(rec["a"]), float(rec.get("confidence", 1.0)))
            out = {"act": act.label, "v_bar": st.v_bar, "a_bar": st.a_bar, "dv": st.dv, "da": st.da}
            if "sentence_id" in rec:
                out["sentence_id"] = rec["sentence_id"]
            yield out

