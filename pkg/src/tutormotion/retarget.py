"""Direct per-joint retargeting of BVH rotation channels onto a humanoid.

Each robot joint is driven by one BVH rotation channel through
``sign * radians(angle) + offset``.  The result is resampled to the
controller rate, clamped to joint limits and then rate-limited with a
causal forward sweep.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bvh import BvhDocument

TOL = 1e-9


class RetargetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class JointLimit:
    name: str
    min: float
    max: float
    max_velocity: float
    neutral: float | None = None

    def __post_init__(self):
        if not self.min < self.max:
            raise RetargetConfigError(f"{self.name}: min must be < max")
        if not self.max_velocity > 0:
            raise RetargetConfigError(f"{self.name}: max_velocity must be > 0")

    @property
    def rest(self) -> float:
        n = 0.0 if self.neutral is None else self.neutral
        return float(np.clip(n, self.min, self.max))


@dataclass(frozen=True)
class ChannelMap:
    bvh_joint: str
    channel: str
    robot_joint: str
    sign: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class RobotProfile:
    joints: tuple[JointLimit, ...]
    control_rate: float
    mapping: tuple[ChannelMap, ...] = ()
    name: str = "robot"

    def __post_init__(self):
        if not self.control_rate > 0:
            raise RetargetConfigError("control_rate must be > 0")
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise RetargetConfigError("duplicate robot joint names")
        targets = [m.robot_joint for m in self.mapping]
        unknown = set(targets) - set(names)
        if unknown:
            raise RetargetConfigError(f"mapping targets unknown joints: {sorted(unknown)}")
        if len(set(targets)) != len(targets):
            raise RetargetConfigError("a robot joint is mapped more than once")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.min for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.max for j in self.joints])

    @property
    def vmax(self) -> np.ndarray:
        return np.array([j.max_velocity for j in self.joints])

    @classmethod
    def from_dict(cls, d: Mapping) -> "RobotProfile":
        return cls(
            joints=tuple(JointLimit(**j) for j in d["joints"]),
            control_rate=float(d["control_rate"]),
            mapping=tuple(ChannelMap(**m) for m in d.get("mapping", ())),
            name=d.get("name", "robot"),
        )

    @classmethod
    def load(cls, path) -> "RobotProfile":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def default(cls) -> "RobotProfile":
        text = resources.files("tutormotion.data").joinpath("nao_upper_body.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class JointCommandTrack:
    times: np.ndarray
    angles: np.ndarray  # (ticks, joints) rad
    joint_names: tuple[str, ...]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("time",) + self.joint_names)
            for t, row in zip(self.times, self.angles):
                w.writerow([f"{t:.6f}"] + [f"{x:.6f}" for x in row])


@dataclass
class TrackReport:
    passed: bool
    violations: list = field(default_factory=list)
    clamped: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "violations": self.violations, "clamped": self.clamped}

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def resample(times: np.ndarray, values: np.ndarray, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation of (frames, joints) values onto a uniform grid at ``rate``."""
    duration = float(times[-1] - times[0])
    n = int(np.floor(duration * rate + 1e-9)) + 1
    t = times[0] + np.arange(n) / rate
    out = np.stack([np.interp(t, times, values[:, k]) for k in range(values.shape[1])], axis=1)
    return t, out


def rate_limit(angles: np.ndarray, vmax: np.ndarray, dt: float) -> np.ndarray:
    """Forward sweep bounding every per-tick step by ``vmax * dt``."""
    out = np.array(angles, dtype=np.float64)
    step = vmax * dt
    for i in range(1, out.shape[0]):
        out[i] = out[i - 1] + np.clip(out[i] - out[i - 1], -step, step)
    return out


def map_channels(doc: BvhDocument, profile: RobotProfile) -> np.ndarray:
    """(frames, robot joints) raw joint angles before limits."""
    layout = {key: i for i, key in enumerate(doc.channel_layout())}
    by_joint = {m.robot_joint: m for m in profile.mapping}
    out = np.empty((doc.frame_count, len(profile.joints)))
    for k, joint in enumerate(profile.joints):
        m = by_joint.get(joint.name)
        if m is None:
            out[:, k] = joint.rest
            continue
        col = layout.get((m.bvh_joint, m.channel))
        if col is None:
            raise RetargetConfigError(
                f"mapping for {joint.name} references missing BVH channel {m.bvh_joint}.{m.channel}")
        if not m.channel.endswith("rotation"):
            raise RetargetConfigError(f"{m.bvh_joint}.{m.channel} is not a rotation channel")
        out[:, k] = m.sign * np.deg2rad(doc.motion[:, col]) + m.offset
    return out


def retarget(doc: BvhDocument, profile: RobotProfile) -> tuple[JointCommandTrack, TrackReport]:
    if doc.frame_count == 0:
        raise ValueError("cannot retarget an empty motion")
    raw = map_channels(doc, profile)
    src_t = np.arange(doc.frame_count) * doc.frame_time
    t, ang = resample(src_t, raw, profile.control_rate)
    lo, hi = profile.lower, profile.upper
    clamped = {}
    for k, name in enumerate(profile.names):
        n = int(np.sum((ang[:, k] < lo[k]) | (ang[:, k] > hi[k])))
        if n:
            clamped[name] = n
    ang = np.clip(ang, lo, hi)
    ang = rate_limit(ang, profile.vmax, 1.0 / profile.control_rate)
    track = JointCommandTrack(t, ang, profile.names)
    report = validate_track(track, profile)
    report.clamped = clamped
    return track, report


def validate_track(track: JointCommandTrack, profile: RobotProfile, tol: float = TOL) -> TrackReport:
    """Check limits, velocity bounds and time monotonicity; list every violation."""
    violations = []
    names = list(profile.names)
    if tuple(track.joint_names) != tuple(names):
        violations.append({"kind": "joint_set", "frame": None, "joint": None})
        return TrackReport(False, violations)
    A = np.asarray(track.angles)
    t = np.asarray(track.times)
    lo, hi, vmax = profile.lower, profile.upper, profile.vmax
    for f in np.flatnonzero(np.diff(t) <= 0):
        violations.append({"kind": "time", "frame": int(f + 1), "joint": None})
    bad = np.argwhere((A < lo - tol) | (A > hi + tol))
    for f, k in bad:
        violations.append({"kind": "limit", "frame": int(f), "joint": names[k],
                           "value": float(A[f, k])})
    if A.shape[0] > 1:
        dt = np.diff(t)[:, None]
        over = np.argwhere(np.abs(np.diff(A, axis=0)) > vmax * dt + tol)
        for f, k in over:
            violations.append({"kind": "velocity", "frame": int(f + 1), "joint": names[k]})
    return TrackReport(not violations, violations)


def profile_from_limits(limits: Sequence[tuple[str, float, float, float]], rate: float,
                        mapping: Sequence[ChannelMap] = ()) -> RobotProfile:
    return RobotProfile(tuple(JointLimit(*l) for l in limits), rate, tuple(mapping))


def write_outputs(track: JointCommandTrack, report: TrackReport, stem) -> list[Path]:
    stem = Path(stem)
    track.to_csv(stem.with_suffix(".csv"))
    report.to_json(stem.with_suffix(".json"))
    return [stem.with_suffix(".csv"), stem.with_suffix(".json")]
