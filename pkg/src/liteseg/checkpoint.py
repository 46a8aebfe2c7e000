"""Named-tensor binary checkpoints.

Layout (little-endian)::

    b"PPLS" | u32 version | u32 tensor count
    per tensor:
        u16 name length | name (UTF-8) | u8 dtype | u8 rank | rank x u32 dims
        zero padding up to the next 64-byte file offset | raw data

dtype 0 is float32; dtype 1 is uint8 and only carries the ``__config__``
JSON blob that echoes the model configuration.
"""

from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

from .model import ModelConfig, PPLiteSeg, build_model

MAGIC = b"PPLS"
VERSION = 1
ALIGN = 64
CONFIG_KEY = "__config__"
OPTIM_PREFIX = "optim.velocity."

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    out = bytearray()
    out += MAGIC + struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            raise CheckpointError(f"{name}: float64 tensors are not storable; cast to float32")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += b"\0" * (-len(out) % ALIGN)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    if len(buf) < 12:
        raise CorruptCheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    pos = 12
    tensors: Dict[str, np.ndarray] = {}

    def take(fmt: str) -> Tuple:
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CorruptCheckpointError(f"{path}: truncated tensor header at offset {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(buf):
            raise CorruptCheckpointError(f"{path}: truncated tensor name at offset {pos}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{path}: invalid tensor name at offset {pos}") from exc
        pos += nlen
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{path}: {name}: unknown dtype code {code}")
        dims = take(f"<{rank}I")
        pos += -pos % ALIGN
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise CorruptCheckpointError(f"{path}: {name}: data truncated ({len(buf) - pos} of {nbytes} bytes)")
        tensors[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - pos} trailing bytes after last tensor")
    return tensors


def save_checkpoint(model: PPLiteSeg, path, optimizer=None) -> None:
    tensors = {CONFIG_KEY: np.frombuffer(model.cfg.to_json().encode("utf-8"), dtype=np.uint8)}
    for name, arr in model.state_dict().items():
        tensors[name] = arr.astype(np.float32, copy=False)
    if optimizer is not None:
        for name, vel in optimizer.named_velocities(model):
            tensors[OPTIM_PREFIX + name] = vel
    write_tensors(path, tensors)


def read_config(tensors: Dict[str, np.ndarray]) -> ModelConfig:
    if CONFIG_KEY not in tensors:
        raise CorruptCheckpointError("checkpoint has no embedded model config")
    return ModelConfig.from_json(tensors[CONFIG_KEY].tobytes().decode("utf-8"))


def load_into(model: PPLiteSeg, path, optimizer=None) -> PPLiteSeg:
    """Copy checkpoint tensors into an existing model, rejecting any name or shape mismatch."""
    tensors = read_tensors(path)
    state = model.state_dict()
    weights = {k: v for k, v in tensors.items() if k != CONFIG_KEY and not k.startswith(OPTIM_PREFIX)}
    unknown = sorted(set(weights) - set(state))
    missing = sorted(set(state) - set(weights))
    if unknown or missing:
        raise CheckpointMismatchError(
            f"{path}: checkpoint does not match model: unknown tensors {unknown[:3]}, missing tensors {missing[:3]}"
        )
    for name, arr in weights.items():
        if arr.shape != state[name].shape:
            raise CheckpointMismatchError(f"{path}: {name} has shape {arr.shape}, model expects {state[name].shape}")
    model.load_state_dict(weights)
    if optimizer is not None:
        vel = {k[len(OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
        optimizer.load_velocities(model, vel)
    return model


def load_checkpoint(path) -> PPLiteSeg:
    """Rebuild the model from the embedded config and load its weights."""
    cfg = read_config(read_tensors(path))
    return load_into(build_model(cfg), path)
