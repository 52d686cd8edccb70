"""Versioned binary container for model parameters.

Layout (all integers little-endian)::

    magic      8 bytes   b"REPINVCK"
    version    u32
    desc_len   u32       followed by a UTF-8 block of ``key=value`` lines
    n_params   u32
    per parameter, in declaration order:
        name_len u16, name (UTF-8), ndim u8, dims u32[ndim],
        n_bytes u64, float64 payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"REPINVCK"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, incompatible or mismatched checkpoint file."""


def encode_descriptor(desc):
    lines = []
    for key, value in desc.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text:
            raise CheckpointError(f"descriptor entry {key!r} is not representable")
        lines.append(f"{key}={text}")
    return "\n".join(lines).encode("utf-8")


def decode_descriptor(blob):
    desc = {}
    for line in blob.decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"descriptor line without '=': {line!r}")
        desc[key] = value
    return desc


def write_container(path, descriptor, params):
    """Atomically write ``params`` (name -> array) with a string descriptor."""
    desc = encode_descriptor(descriptor)
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)) + payload)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def read_container(path):
    """Returns ``(descriptor, params)``; raises :class:`CheckpointError` on bad input."""
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, desc_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    try:
        descriptor = decode_descriptor(take(desc_len))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: descriptor is not UTF-8") from exc
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8", errors="strict")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: parameter {name!r} has {nbytes} bytes for shape {shape}")
        params[name] = np.frombuffer(take(nbytes), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return descriptor, params


def check_descriptor(descriptor, expect, path="checkpoint"):
    """Raise if any ``expect`` key differs from the stored descriptor."""
    for key, value in expect.items():
        if descriptor.get(key) != str(value):
            raise CheckpointError(f"{path}: descriptor mismatch for {key!r}: stored {descriptor.get(key)!r}, expected {value!r}")
