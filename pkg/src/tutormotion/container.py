"""Chunked columnar container for aligned clip streams.

Layout::

    b"TMCDATA1"                 8-byte magic
    u64 little-endian           header length in bytes
    header                      UTF-8 JSON, sorted keys, no whitespace
    data                        raw little-endian float32 blocks

The header holds ``meta`` (free-form: fps, act vocabulary, ...), the
``streams`` schema (``{name: {"dim": int, "axis": str}}``) and the per-clip
index.  Each clip entry records its length along every axis and, per
stream, the byte offset (relative to the data section) and row count of
its block.  Streams sharing an axis must have the same row count within
a clip.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TMCDATA1"
VERSION = 1


class ContainerError(ValueError):
    pass


@dataclass
class Clip:
    id: str
    streams: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


@dataclass
class Container:
    streams: dict[str, dict]  # name -> {"dim", "axis"}
    clips: list[Clip]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise ContainerError("duplicate clip ids")
        for c in self.clips:
            self._check_clip(c)

    def _check_clip(self, clip: Clip):
        lengths = {}
        for name, arr in clip.streams.items():
            if name not in self.streams:
                raise ContainerError(f"clip {clip.id}: unknown stream {name!r}")
            spec = self.streams[name]
            if arr.ndim != 2 or arr.shape[1] != spec["dim"]:
                raise ContainerError(f"clip {clip.id}: stream {name} must be (n, {spec['dim']})")
            n = lengths.setdefault(spec["axis"], arr.shape[0])
            if n != arr.shape[0]:
                raise ContainerError(
                    f"clip {clip.id}: streams on axis {spec['axis']!r} disagree on length")

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, clip_id: str) -> Clip:
        for c in self.clips:
            if c.id == clip_id:
                return c
        raise KeyError(clip_id)

    def select(self, **meta) -> list[Clip]:
        return [c for c in self.clips if all(c.meta.get(k) == v for k, v in meta.items())]


def to_bytes(container: Container) -> bytes:
    blobs, index, offset = [], [], 0
    for clip in container.clips:
        entry = {"id": clip.id, "meta": clip.meta, "lengths": {}, "blocks": {}}
        for name in sorted(clip.streams):
            arr = np.ascontiguousarray(clip.streams[name], dtype="<f4")
            raw = arr.tobytes()
            entry["blocks"][name] = [offset, int(arr.shape[0])]
            entry["lengths"][container.streams[name]["axis"]] = int(arr.shape[0])
            blobs.append(raw)
            offset += len(raw)
        index.append(entry)
    header = {
        "format": "tutormotion.container",
        "version": VERSION,
        "meta": container.meta,
        "streams": container.streams,
        "clips": index,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def from_bytes(data: bytes) -> Container:
    if data[:8] != MAGIC:
        raise ContainerError("not a tutormotion container (bad magic)")
    if len(data) < 16:
        raise ContainerError("truncated container header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt container header: {e}") from None
    if header.get("version") != VERSION:
        raise ContainerError(f"unsupported container version {header.get('version')}")
    body = memoryview(data)[16 + n:]
    streams = header["streams"]
    clips = []
    for entry in header["clips"]:
        arrays = {}
        for name, (off, rows) in entry["blocks"].items():
            dim = streams[name]["dim"]
            nbytes = rows * dim * 4
            if off < 0 or off + nbytes > len(body):
                raise ContainerError(f"clip {entry['id']}: block {name} lies outside the file")
            arrays[name] = np.frombuffer(body[off:off + nbytes], dtype="<f4").reshape(rows, dim).copy()
        clips.append(Clip(entry["id"], arrays, entry.get("meta", {})))
    return Container(streams, clips, header.get("meta", {}))


def write(container: Container, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(container))
    return path


def read(path) -> Container:
    return from_bytes(Path(path).read_bytes())


def schema(**dims: tuple[int, str]) -> dict[str, dict]:
    """``schema(motion=(8, "frame"))`` -> stream schema dict."""
    return {name: {"dim": int(d), "axis": axis} for name, (d, axis) in dims.items()}


def stack_stream(clips, name: str) -> np.ndarray:
    return np.concatenate([c.streams[name] for c in clips], axis=0)

