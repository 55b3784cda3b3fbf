"""Grid/field data model and the binary snapshot format.

A :class:`Field` is a batch of square, doubly periodic, multi-channel grids
stored as ``(n_samples, N, N, C)`` with rows indexing ``y`` and columns ``x``.
A :class:`SnapshotSet` adds dataset bookkeeping and is what gets written to
disk.

Snapshot file layout (version 1, all integers little-endian)::

    b"BCST" | u16 version | u16 n_channels | u32 N | u32 n_samples
    | per channel: u16 name length + UTF-8 name
    | u32 metadata length + UTF-8 JSON (subset_name, sim_params_digest,
      spinup_discarded)
    | payload: n_samples x n_channels x N x N float32, row-major
    | 8-byte BLAKE2b (digest_size=8) checksum of the payload bytes
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"BCST"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_FLOAT32_MAX = float(np.finfo(np.float32).max)


class SnapshotFormatError(ValueError):
    """Base class for malformed snapshot files."""


class BadMagicError(SnapshotFormatError):
    pass


class VersionMismatchError(SnapshotFormatError):
    pass


class TruncatedFileError(SnapshotFormatError):
    pass


class ChecksumError(SnapshotFormatError):
    pass


class EmptySetError(ValueError):
    pass


def payload_checksum(payload: bytes) -> bytes:
    """8-byte BLAKE2b digest used as the trailing payload checksum."""
    return hashlib.blake2b(payload, digest_size=8).digest()


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    n_grid: int
    domain_length: float = 2 * math.pi

    def __post_init__(self):
        if self.n_grid <= 0 or self.domain_length <= 0:
            raise ValueError("grid needs N > 0 and L > 0")

    @property
    def dx(self) -> float:
        return self.domain_length / self.n_grid

    def coordinates(self) -> np.ndarray:
        """Node coordinates ``0, dx, ..., L - dx``."""
        return np.arange(self.n_grid) * self.dx

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, Y)`` arrays indexed ``[iy, ix]``."""
        c = self.coordinates()
        return np.meshgrid(c, c, indexing="xy")


@dataclass(frozen=True, eq=False)
class Field:
    """Batch of ``N x N`` grids with named channels.

    ``data`` may be passed as ``(N, N, C)`` for a single sample; it is stored
    as a read-only ``(B, N, N, C)`` array.
    """

    data: np.ndarray
    channels: tuple[str, ...]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ValueError(f"field data must be (B, N, N, C), got shape {data.shape}")
        channels = tuple(self.channels)
        _, ny, nx, nc = data.shape
        if ny != nx:
            raise ValueError(f"field must be square, got {ny}x{nx}")
        if nx < 4 or not _is_power_of_two(nx):
            raise ValueError(f"N must be a power of two >= 4, got {nx}")
        if nc != len(channels):
            raise ValueError(f"{nc} data channels but {len(channels)} names")
        if len(set(channels)) != len(channels):
            raise ValueError(f"duplicate channel names: {channels}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", channels)

    @property
    def n_grid(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.n_samples

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise KeyError(f"unknown channel {name!r}; have {self.channels}") from None

    def channel(self, name: str) -> np.ndarray:
        """``(B, N, N)`` view of one channel."""
        return self.data[..., self.channel_index(name)]

    def select(self, names: Sequence[str]) -> Field:
        idx = [self.channel_index(n) for n in names]
        return Field(self.data[..., idx], tuple(names))

    def samples(self, index) -> Field:
        return Field(self.data[index], self.channels)

    def replace_channel(self, name: str, values: np.ndarray) -> Field:
        data = np.array(self.data)
        data[..., self.channel_index(name)] = values
        return Field(data, self.channels)

    def astype(self, dtype) -> Field:
        return Field(self.data.astype(dtype), self.channels)

    def equals(self, other: Field) -> bool:
        return (
            self.channels == other.channels
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


def concat_channels(*fields: Field) -> Field:
    data = np.concatenate([f.data for f in fields], axis=-1)
    return Field(data, sum((f.channels for f in fields), ()))


def concat_samples(fields: Sequence[Field]) -> Field:
    if not fields:
        raise EmptySetError("empty set")
    channels = fields[0].channels
    if any(f.channels != channels for f in fields):
        raise ValueError("channel lists differ")
    return Field(np.concatenate([f.data for f in fields], axis=0), channels)


def channel_mean(f: Field, channel: str) -> np.ndarray:
    """Spatial mean of one channel, one value per sample."""
    return f.channel(channel).astype(np.float64).mean(axis=(1, 2))


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    """A persisted dataset: one :class:`Field` batch plus provenance."""

    field: Field
    subset_name: str
    sim_params_digest: str = ""
    spinup_discarded: int = 0
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.field.n_samples == 0:
            raise EmptySetError("empty set")

    def __len__(self) -> int:
        return self.field.n_samples

    def __iter__(self) -> Iterator[Field]:
        for i in range(len(self)):
            yield self.field.samples(slice(i, i + 1))

    @property
    def n_grid(self) -> int:
        return self.field.n_grid

    @property
    def channels(self) -> tuple[str, ...]:
        return self.field.channels

    def with_field(self, new: Field, **changes) -> SnapshotSet:
        kw = dict(
            subset_name=self.subset_name,
            sim_params_digest=self.sim_params_digest,
            spinup_discarded=self.spinup_discarded,
            extra=dict(self.extra),
        )
        kw.update(changes)
        return SnapshotSet(new, **kw)

    def equals(self, other: SnapshotSet) -> bool:
        return (
            self.field.equals(other.field)
            and self.subset_name == other.subset_name
            and self.sim_params_digest == other.sim_params_digest
            and self.spinup_discarded == other.spinup_discarded
            and self.extra == other.extra
        )


def _encode(s: SnapshotSet) -> bytes:
    f = s.field
    if f.n_samples == 0:
        raise EmptySetError("empty set")
    if np.max(np.abs(f.data), initial=0.0) > _FLOAT32_MAX:
        raise OverflowError("values exceed float32 range")
    parts = [_HEADER.pack(MAGIC, VERSION, len(f.channels), f.n_grid, f.n_samples)]
    for name in f.channels:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    meta = json.dumps(
        {
            "subset_name": s.subset_name,
            "sim_params_digest": s.sim_params_digest,
            "spinup_discarded": int(s.spinup_discarded),
            "extra": s.extra,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    payload = np.ascontiguousarray(np.moveaxis(f.data, -1, 1), dtype="<f4").tobytes()
    parts.append(payload)
    parts.append(payload_checksum(payload))
    return b"".join(parts)


def write_snapshot_set(s: SnapshotSet, path, force: bool = False) -> None:
    """Write ``s`` to ``path``; refuses to overwrite unless ``force``."""
    path = Path(path)
    blob = _encode(s)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use force to overwrite)")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError("truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_snapshot_set(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic")
    magic, version, n_channels, n, n_samples = _HEADER.unpack(r.take(_HEADER.size))
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {VERSION}")
    channels = []
    for _ in range(n_channels):
        (length,) = struct.unpack("<H", r.take(2))
        channels.append(r.take(length).decode("utf-8"))
    (meta_len,) = struct.unpack("<I", r.take(4))
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    payload = r.take(4 * n_samples * n_channels * n * n)
    checksum = r.take(8)
    if payload_checksum(payload) != checksum:
        raise ChecksumError("payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_samples, n_channels, n, n)
    data = np.moveaxis(data, 1, -1).astype(np.float64)
    if n_samples == 0:
        raise EmptySetError("empty set")
    return SnapshotSet(
        Field(data, tuple(channels)),
        subset_name=meta["subset_name"],
        sim_params_digest=meta["sim_params_digest"],
        spinup_discarded=meta["spinup_discarded"],
        extra=meta.get("extra", {}),
    )
