"""Time-tag records and their on-disk formats.

Binary layout (little endian): a 64-byte header ``magic "FCTG" | u16 version |
u64 seed | 32-byte config SHA-256 | zero padding`` followed by 16-byte records
``u8 channel | 7 reserved zero bytes | u64 time_ps``.  Run metadata that does
not fit the header goes to an optional ``<file>.json`` sidecar.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .chip import Channel, parse_channel

MAGIC = b"FCTG"
VERSION = 1
HEADER = struct.Struct("<4sHQ32s18x")
assert HEADER.size == 64
RECORD = np.dtype([("channel", "u1"), ("reserved", "V7"), ("time_ps", "<u8")])
assert RECORD.itemsize == 16


class TimeTag(NamedTuple):
    channel: Channel
    time_ps: int


@dataclass
class TagStream:
    channels: np.ndarray
    times: np.ndarray
    seed: int = 0
    cfg_hash: bytes = bytes(32)
    n_pulses: int | None = None
    truncated: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.channels.shape != self.times.shape:
            raise ValueError("channels and times differ in length")
        if self.times.size and self.times.min() < 0:
            raise ValueError("negative time tag")

    @classmethod
    def from_tags(cls, tags, **meta) -> "TagStream":
        tags = list(tags)
        return cls(np.array([parse_channel(c) for c, _ in tags], dtype=np.uint8),
                   np.array([t for _, t in tags], dtype=np.int64), **meta)

    def __len__(self):
        return int(self.times.size)

    def __iter__(self):
        for c, t in zip(self.channels.tolist(), self.times.tolist()):
            yield TimeTag(Channel(c), t)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.times) >= 0))

    def channel_times(self, channel) -> np.ndarray:
        return self.times[self.channels == int(parse_channel(channel))]

    def singles(self, channel) -> int:
        return int(np.count_nonzero(self.channels == int(parse_channel(channel))))

    def sorted(self) -> "TagStream":
        order = np.lexsort((self.channels, self.times))
        return TagStream(self.channels[order], self.times[order], self.seed, self.cfg_hash,
                         self.n_pulses, self.truncated, dict(self.meta))

    def metadata(self) -> dict:
        return {"seed": self.seed, "cfg_sha256": self.cfg_hash.hex(), "n_pulses": self.n_pulses,
                "truncated": self.truncated, **self.meta}

    # -- binary ---------------------------------------------------------

    def write_binary(self, path, sidecar: bool = True) -> None:
        path = Path(path)
        records = np.zeros(len(self), dtype=RECORD)
        records["channel"] = self.channels
        records["time_ps"] = self.times.astype(np.uint64)
        _atomic_write(path, HEADER.pack(MAGIC, VERSION, self.seed, self.cfg_hash) + records.tobytes())
        if sidecar:
            _atomic_write(path.with_suffix(path.suffix + ".json"),
                          (json.dumps(self.metadata(), sort_keys=True, indent=2) + "\n").encode())

    @classmethod
    def read_binary(cls, path) -> "TagStream":
        path = Path(path)
        blob = path.read_bytes()
        if len(blob) < HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, seed, digest = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        body = blob[HEADER.size:]
        if len(body) % RECORD.itemsize:
            raise ValueError(f"{path}: record section is not a multiple of 16 bytes")
        records = np.frombuffer(body, dtype=RECORD)
        if records.size and np.any(np.frombuffer(body, np.uint8).reshape(-1, RECORD.itemsize)[:, 1:8]):
            raise ValueError(f"{path}: reserved bytes must be zero")
        stream = cls(records["channel"].copy(), records["time_ps"].astype(np.int64), seed, digest)
        side = path.with_suffix(path.suffix + ".json")
        if side.exists():
            meta = json.loads(side.read_text())
            stream.n_pulses = meta.pop("n_pulses", None)
            stream.truncated = meta.pop("truncated", 0)
            meta.pop("seed", None)
            meta.pop("cfg_sha256", None)
            stream.meta = meta
        return stream

    # -- csv ------------------------------------------------------------

    def write_csv(self, path) -> None:
        lines = ["channel,time_ps"]
        names = [c.name for c in Channel]
        lines += [f"{names[c]},{t}" for c, t in zip(self.channels.tolist(), self.times.tolist())]
        _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())

    @classmethod
    def read_csv(cls, path, **meta) -> "TagStream":
        rows = Path(path).read_text().splitlines()
        if not rows or rows[0].strip() != "channel,time_ps":
            raise ValueError(f"{path}: expected header 'channel,time_ps'")
        chans, times = [], []
        for row in rows[1:]:
            if not row.strip():
                continue
            c, t = row.split(",")
            chans.append(parse_channel(c.strip()))
            times.append(int(t))
        return cls(np.array(chans, dtype=np.uint8), np.array(times, dtype=np.int64), **meta)


def merge_streams(*streams: TagStream) -> TagStream:
    """Concatenate and time-sort; ties are ordered by channel."""
    first = streams[0]
    out = TagStream(np.concatenate([s.channels for s in streams]),
                    np.concatenate([s.times for s in streams]),
                    first.seed, first.cfg_hash, first.n_pulses,
                    sum(s.truncated for s in streams), dict(first.meta))
    return out.sorted()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".part")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
