"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FLN1"                      magic
    u16                          format version
    u32 + bytes                  config block: UTF-8 ``key = value`` lines
    repeated tensor records:
        u32 + bytes              tensor name
        u8                       dtype code (1 = f32, 2 = f64)
        u8                       rank
        u32 * rank               dims
        raw data                 row-major, little-endian

The config block always carries ``num-tensors`` so truncation at a record
boundary is detected too.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"FLN1"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def format_config_block(items: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def parse_config_block(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line in checkpoint: {line!r}")
        out[key.strip()] = value.strip()
    return out


def encode(config: dict[str, object], tensors: dict[str, np.ndarray]) -> bytes:
    items = {k: v for k, v in config.items() if k != "num-tensors"}
    items["num-tensors"] = len(tensors)
    block = format_config_block(items).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(block)), block]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[le], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (block_len,) = struct.unpack("<I", take(4))
    try:
        config = parse_config_block(bytes(take(block_len)).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError("checkpoint config block is not UTF-8") from exc

    tensors: dict[str, np.ndarray] = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = CODE_DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        tensors[name] = data.astype(dtype.newbyteorder("="), copy=True)

    expected = config.get("num-tensors")
    if expected is not None and int(expected) != len(tensors):
        raise CheckpointError(f"checkpoint is truncated: {len(tensors)} of {expected} tensors present")
    return config, tensors


def save(path, config: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: a partially written file never replaces a good one."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(config, tensors))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(os.fspath(path), "rb") as fh:
        return decode(fh.read())
