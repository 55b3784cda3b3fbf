"""Binary parameter checkpoints for :class:`UNet` models.

Layout (version 1, little-endian)::

    b"BCKP" | u16 version | u32 n_tensors | u32 metadata length
    | UTF-8 JSON metadata (architecture, schedule, free-form extras)
    | per tensor: u16 name length + UTF-8 name | u8 ndim | u32 dims...
      | float32 payload
    | 8-byte BLAKE2b checksum of everything after the magic
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from ..fields import BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError, payload_checksum
from ..sde import NoiseSchedule
from .unet import UNet, UNetConfig, UNetScore

MAGIC = b"BCKP"
VERSION = 1


def save_checkpoint(net: UNet, schedule: NoiseSchedule, path, extra: dict | None = None, force: bool = True) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use force to overwrite)")
    meta = json.dumps(
        {
            "unet": net.cfg.as_dict(),
            "schedule": {"sigma_min": schedule.sigma_min, "sigma_max": schedule.sigma_max},
            "extra": extra or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    state = net.state_dict()
    parts = [struct.pack("<HII", VERSION, len(state), len(meta)), meta]
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + body + payload_checksum(body))
    os.replace(tmp, path)


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise TruncatedFileError("truncated")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path) -> tuple[UNet, NoiseSchedule, dict]:
    """Rebuild the network and schedule stored in ``path``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(buf) < 4 + 10 + 8:
        raise TruncatedFileError("truncated")
    body, checksum = buf[4:-8], buf[-8:]
    head, pos = _take(body, 0, 10)
    version, n_tensors, meta_len = struct.unpack("<HII", head)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {VERSION}")
    raw, pos = _take(body, pos, meta_len)
    meta = json.loads(raw.decode("utf-8"))
    state = {}
    for _ in range(n_tensors):
        raw, pos = _take(body, pos, 2)
        raw, pos = _take(body, pos, struct.unpack("<H", raw)[0])
        name = raw.decode("utf-8")
        raw, pos = _take(body, pos, 1)
        ndim = raw[0]
        raw, pos = _take(body, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, pos = _take(body, pos, 4 * int(np.prod(shape, dtype=np.int64)))
        state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    if pos != len(body):
        raise TruncatedFileError("truncated")
    if payload_checksum(body) != checksum:
        raise ChecksumError("checkpoint checksum mismatch")
    net = UNet(UNetConfig.from_dict(meta["unet"]))
    net.load_state_dict(state)
    net.eval()
    schedule = NoiseSchedule(**meta["schedule"])
    return net, schedule, meta.get("extra", {})


def load_score(path, batch_size: int = 64) -> tuple[UNetScore, dict]:
    net, schedule, extra = load_checkpoint(path)
    return UNetScore(net, schedule, batch_size=batch_size), extra
