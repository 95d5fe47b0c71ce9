"""BVH (BioVision Hierarchy) reading, writing and forward kinematics.

Rotation channels are in degrees and are applied as intrinsic rotations
in the order they are declared, so ``Zrotation Xrotation Yrotation``
gives ``R = Rz @ Rx @ Ry``.  Position channels add to the joint OFFSET.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CHANNEL_NAMES = ("Xposition", "Yposition", "Zposition", "Xrotation", "Yrotation", "Zrotation")


class BvhParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Joint:
    name: str
    offset: tuple[float, float, float]
    channels: tuple[str, ...] = ()
    children: tuple["Joint", ...] = ()
    end_site: tuple[float, float, float] | None = None

    def walk(self) -> Iterator["Joint"]:
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass(frozen=True)
class BvhDocument:
    root: Joint
    frame_time: float
    motion: np.ndarray = field(compare=False)

    def __post_init__(self):
        motion = np.array(self.motion, dtype=np.float64)
        if motion.ndim == 1 and motion.size == 0:
            motion = motion.reshape(0, self.n_channels)
        if motion.ndim != 2 or motion.shape[1] != self.n_channels:
            raise ValueError(f"motion must be (frames, {self.n_channels})")
        if not self.frame_time > 0:
            raise ValueError("frame_time must be > 0")
        motion.flags.writeable = False
        object.__setattr__(self, "motion", motion)

    @property
    def joints(self) -> list[Joint]:
        return list(self.root.walk())

    @property
    def n_channels(self) -> int:
        return sum(len(j.channels) for j in self.root.walk())

    @property
    def frame_count(self) -> int:
        return self.motion.shape[0]

    @property
    def fps(self) -> float:
        return 1.0 / self.frame_time

    def channel_layout(self) -> list[tuple[str, str]]:
        return [(j.name, c) for j in self.root.walk() for c in j.channels]

    def channel_index(self, joint: str, channel: str) -> int:
        try:
            return self.channel_layout().index((joint, channel))
        except ValueError:
            raise KeyError(f"no channel {channel} on joint {joint}") from None

    def __eq__(self, other):
        if not isinstance(other, BvhDocument):
            return NotImplemented
        return (self.root == other.root and self.frame_time == other.frame_time
                and self.motion.shape == other.motion.shape
                and np.array_equal(self.motion, other.motion))

    __hash__ = None


# ---------------------------------------------------------------------------
# parsing


def _tokens(text: str):
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split():
            out.append((tok, lineno))
    return out


def _number(tok: str, line: int) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise BvhParseError(f"expected a number, got {tok!r}", line) from None
    if not math.isfinite(x):
        raise BvhParseError(f"non-finite number {tok!r}", line)
    return x


class _Builder:
    def __init__(self, name, line):
        self.name = name
        self.line = line
        self.offset = None
        self.channels = None
        self.children = []
        self.end_site = None

    def build(self) -> Joint:
        if self.offset is None:
            raise BvhParseError(f"joint {self.name!r} has no OFFSET", self.line)
        return Joint(self.name, self.offset, tuple(self.channels or ()),
                     tuple(c.build() for c in self.children), self.end_site)


def parse(text: str) -> BvhDocument:
    """Parse BVH text. Every failure is raised as BvhParseError with a line number."""
    if not isinstance(text, str):
        raise BvhParseError("BVH input must be text")
    toks = _tokens(text)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, toks[-1][1] if toks else 1)

    def take(expected=None):
        nonlocal pos
        tok, line = peek()
        if tok is None:
            raise BvhParseError("unexpected end of file" +
                                (f", expected {expected!r}" if expected else ""), line)
        if expected is not None and tok != expected:
            raise BvhParseError(f"expected {expected!r}, got {tok!r}", line)
        pos += 1
        return tok, line

    def take_offset():
        _, line = take("OFFSET")
        return tuple(_number(take()[0], line) for _ in range(3))

    take("HIERARCHY")
    tok, line = take()
    if tok != "ROOT":
        raise BvhParseError(f"expected 'ROOT', got {tok!r}", line)
    name, _ = take()
    root = _Builder(name, line)
    take("{")
    stack = [root]
    while stack:
        tok, line = take()
        node = stack[-1]
        if tok == "OFFSET":
            pos -= 1
            if node.offset is not None:
                raise BvhParseError("duplicate OFFSET", line)
            node.offset = take_offset()
        elif tok == "CHANNELS":
            if node.channels is not None:
                raise BvhParseError("duplicate CHANNELS", line)
            ntok, nline = take()
            try:
                n = int(ntok)
            except ValueError:
                raise BvhParseError(f"bad channel count {ntok!r}", nline) from None
            if not 0 <= n <= 6:
                raise BvhParseError(f"channel count {n} outside 0..6", nline)
            chans = [take()[0] for _ in range(n)]
            for c in chans:
                if c not in CHANNEL_NAMES:
                    raise BvhParseError(f"unknown channel {c!r}", line)
            if len(set(chans)) != len(chans):
                raise BvhParseError("repeated channel", line)
            node.channels = chans
        elif tok == "JOINT":
            cname, _ = take()
            child = _Builder(cname, line)
            take("{")
            node.children.append(child)
            stack.append(child)
        elif tok == "End":
            take("Site")
            take("{")
            if node.end_site is not None:
                raise BvhParseError("multiple End Site blocks", line)
            node.end_site = take_offset()
            take("}")
        elif tok == "}":
            if node.offset is None:
                raise BvhParseError(f"joint {node.name!r} has no OFFSET", line)
            stack.pop()
        else:
            raise BvhParseError(f"unexpected keyword {tok!r}", line)

    try:
        root_joint = root.build()
        names = [j.name for j in root_joint.walk()]
    except RecursionError:
        raise BvhParseError("hierarchy nested too deeply", root.line) from None
    if len(set(names)) != len(names):
        raise BvhParseError("duplicate joint names", root.line)
    n_channels = sum(len(j.channels) for j in root_joint.walk())

    take("MOTION")
    tok, line = take()
    if tok == "Frames:":
        ftok, fline = take()
    elif tok.startswith("Frames:") and len(tok) > 7:
        ftok, fline = tok[7:], line
    else:
        raise BvhParseError(f"expected 'Frames:', got {tok!r}", line)
    try:
        n_frames = int(ftok)
    except ValueError:
        raise BvhParseError(f"bad frame count {ftok!r}", fline) from None
    if n_frames < 0:
        raise BvhParseError("negative frame count", fline)
    take("Frame")
    tok, line = take()
    if tok == "Time:":
        frame_time = _number(take()[0], line)
    elif tok.startswith("Time:") and len(tok) > 5:
        frame_time = _number(tok[5:], line)
    else:
        raise BvhParseError(f"expected 'Time:', got {tok!r}", line)
    if not frame_time > 0:
        raise BvhParseError("frame time must be > 0", line)

    # remaining tokens grouped by their source line form the motion rows
    rows: dict[int, list[str]] = {}
    for tok, line in toks[pos:]:
        rows.setdefault(line, []).append(tok)
    if len(rows) != n_frames:
        last = toks[-1][1] if toks else 1
        raise BvhParseError(f"declared {n_frames} frames, found {len(rows)} rows", last)
    motion = np.zeros((n_frames, n_channels))
    for r, (line, vals) in enumerate(rows.items()):
        if len(vals) != n_channels:
            raise BvhParseError(f"frame row {r} has {len(vals)} values, expected {n_channels}", line)
        motion[r] = [_number(v, line) for v in vals]
    return BvhDocument(root_joint, frame_time, motion)


def load(path) -> BvhDocument:
    with open(path, encoding="utf-8") as f:
        return parse(f.read())


# ---------------------------------------------------------------------------
# writing


def _fmt(x: float) -> str:
    return f"{round(float(x), 6) + 0.0:.6f}"


def serialize(doc: BvhDocument) -> str:
    out = ["HIERARCHY"]

    def emit(j: Joint, depth: int, kind: str):
        ind = "\t" * depth
        out.append(f"{ind}{kind} {j.name}")
        out.append(f"{ind}{{")
        out.append(f"{ind}\tOFFSET {' '.join(_fmt(v) for v in j.offset)}")
        out.append(f"{ind}\tCHANNELS {len(j.channels)}" + "".join(f" {c}" for c in j.channels))
        for c in j.children:
            emit(c, depth + 1, "JOINT")
        if j.end_site is not None:
            out.append(f"{ind}\tEnd Site")
            out.append(f"{ind}\t{{")
            out.append(f"{ind}\t\tOFFSET {' '.join(_fmt(v) for v in j.end_site)}")
            out.append(f"{ind}\t}}")
        out.append(f"{ind}}}")

    emit(doc.root, 0, "ROOT")
    out.append("MOTION")
    out.append(f"Frames: {doc.frame_count}")
    out.append(f"Frame Time: {np.format_float_positional(doc.frame_time, trim='-')}")
    for row in doc.motion:
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def save(doc: BvhDocument, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize(doc))


# ---------------------------------------------------------------------------
# forward kinematics


def _axis_rotation(axis: str, deg: np.ndarray) -> np.ndarray:
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    one, zero = np.ones_like(th), np.zeros_like(th)
    if axis == "X":
        m = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == "Y":
        m = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        m = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return np.moveaxis(np.array(m), (0, 1), (-2, -1))


@dataclass(frozen=True)
class JointTrajectory:
    positions: np.ndarray  # (frames, joints, 3)
    names: tuple[str, ...]
    fps: float = 30.0

    def select(self, names: Sequence[str]) -> "JointTrajectory":
        idx = [self.names.index(n) for n in names]
        return JointTrajectory(self.positions[:, idx], tuple(names), self.fps)


def forward_kinematics(doc: BvhDocument, include_end_sites: bool = False) -> JointTrajectory:
    """World-space joint positions for every frame."""
    F = doc.frame_count
    col = 0
    names, positions = [], []

    def visit(j: Joint, parent_R, parent_p):
        nonlocal col
        local = np.broadcast_to(np.asarray(j.offset, dtype=np.float64), (F, 3)).copy()
        R = np.broadcast_to(np.eye(3), (F, 3, 3)).copy()
        for ch in j.channels:
            vals = doc.motion[:, col]
            col += 1
            if ch.endswith("position"):
                local[:, "XYZ".index(ch[0])] += vals
            else:
                R = R @ _axis_rotation(ch[0], vals)
        p = parent_p + np.einsum("fij,fj->fi", parent_R, local)
        world_R = parent_R @ R
        names.append(j.name)
        positions.append(p)
        for c in j.children:
            visit(c, world_R, p)
        if include_end_sites and j.end_site is not None:
            names.append(f"{j.name}_end")
            positions.append(p + np.einsum("fij,j->fi", world_R, np.asarray(j.end_site)))

    visit(doc.root, np.broadcast_to(np.eye(3), (F, 3, 3)).copy(), np.zeros((F, 3)))
    pos = np.stack(positions, axis=1) if F else np.zeros((0, len(names), 3))
    return JointTrajectory(pos, tuple(names), doc.fps)


# ---------------------------------------------------------------------------
# export of generated motion frames


def chain_skeleton(n_values: int, bone_length: float = 10.0) -> Joint:
    """Serial chain carrying ``n_values`` rotation channels, three per joint.

    The root holds a fixed position triple plus the first rotation triple;
    unused trailing channels are padded with zeros on export.
    """
    n_joints = max(1, math.ceil(n_values / 3))
    rot = ("Zrotation", "Xrotation", "Yrotation")
    child = None
    for k in reversed(range(1, n_joints)):
        child = Joint(f"joint{k}", (0.0, bone_length, 0.0), rot,
                      (child,) if child else (),
                      None if child else (0.0, bone_length, 0.0))
    return Joint("joint0", (0.0, 0.0, 0.0), ("Xposition", "Yposition", "Zposition") + rot,
                 (child,) if child else (), None if child else (0.0, bone_length, 0.0))


def frames_to_document(frames: np.ndarray, fps: float, angle_scale: float = 30.0,
                       bone_length: float = 10.0) -> BvhDocument:
    """Write a (T, D) motion array onto a chain skeleton, ``angle_scale`` degrees per unit."""
    frames = np.asarray(frames, dtype=np.float64)
    T, D = frames.shape
    root = chain_skeleton(D, bone_length)
    n_rot = sum(len(j.channels) for j in root.walk()) - 3
    motion = np.zeros((T, 3 + n_rot))
    motion[:, 3:3 + D] = angle_scale * frames
    return BvhDocument(root, 1.0 / fps, motion)
