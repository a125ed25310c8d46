"""NSFG1 checkpoint container.

Layout: the 5-byte magic ``NSFG1`` followed by records of
``u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 payload``,
all little-endian, until end of file. Model configuration travels as a
rank-1 record named ``__config__`` holding UTF-8 JSON bytes, one byte per
float.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"NSFG1"
CONFIG_KEY = "__config__"


def write_checkpoint(path_or_file, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    items = list(tensors.items())
    if config is not None:
        raw = json.dumps(config, sort_keys=True).encode()
        items = [(CONFIG_KEY, np.frombuffer(raw, dtype=np.uint8).astype(np.float32))] + items
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, arr in items:
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as f:
            f.write(data)


def read_checkpoint(path_or_file) -> tuple[dict[str, np.ndarray], dict | None]:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as f:
            data = f.read()
    if data[:5] != MAGIC:
        raise ValueError("not an NSFG1 checkpoint (bad magic)")
    pos, tensors, config = 5, {}, None

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated checkpoint")
        chunk = data[pos: pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name == CONFIG_KEY:
            config = json.loads(arr.astype(np.uint8).tobytes().decode())
        else:
            tensors[name] = arr
    return tensors, config
