"""Length-framed record files with masked CRC-32C checksums.

Each record is ``u64 length | u32 masked_crc(length bytes) | payload |
u32 masked_crc(payload)``, little-endian.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Iterator

CASTAGNOLI_POLY = 0x82F63B78  # bit-reflected 0x1EDC6F41
MASK_DELTA = 0xA282EAD8


class RecordError(ValueError):
    pass


def _make_tables() -> list[list[int]]:
    base = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ CASTAGNOLI_POLY if c & 1 else c >> 1
        base.append(c)
    tables = [base]
    for _ in range(7):
        prev = tables[-1]
        tables.append([(prev[n] >> 8) ^ base[prev[n] & 0xFF] for n in range(256)])
    return tables


_T = _make_tables()


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC-32C (Castagnoli), slicing-by-8."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _T
    crc ^= 0xFFFFFFFF
    mv = memoryview(data)
    n8 = len(mv) // 8 * 8
    if n8:
        for lo, hi in struct.iter_unpack("<II", mv[:n8]):
            lo ^= crc
            crc = (t7[lo & 0xFF] ^ t6[(lo >> 8) & 0xFF] ^ t5[(lo >> 16) & 0xFF] ^ t4[lo >> 24]
                   ^ t3[hi & 0xFF] ^ t2[(hi >> 8) & 0xFF] ^ t1[(hi >> 16) & 0xFF] ^ t0[hi >> 24])
    for b in mv[n8:]:
        crc = (crc >> 8) ^ t0[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


def mask_crc(crc: int) -> int:
    return ((((crc >> 15) | (crc << 17)) & 0xFFFFFFFF) + MASK_DELTA) & 0xFFFFFFFF


def unmask_crc(masked: int) -> int:
    rot = (masked - MASK_DELTA) & 0xFFFFFFFF
    return ((rot >> 17) | (rot << 15)) & 0xFFFFFFFF


def frame_record(payload: bytes) -> bytes:
    header = struct.pack("<Q", len(payload))
    return (header + struct.pack("<I", mask_crc(crc32c(header))) + bytes(payload)
            + struct.pack("<I", mask_crc(crc32c(payload))))


def write_records(payloads: Iterable[bytes], stream: BinaryIO) -> int:
    n = 0
    for p in payloads:
        stream.write(frame_record(p))
        n += 1
    return n


def _read_exact(stream: BinaryIO, n: int, index: int, what: str) -> bytes:
    chunk = stream.read(n)
    if len(chunk) != n:
        raise RecordError(f"record {index}: truncated {what} ({len(chunk)} of {n} bytes)")
    return chunk


def read_records(stream: BinaryIO, verify: bool = True) -> Iterator[bytes]:
    """Yield payloads in order; raises :class:`RecordError` on corruption or truncation."""
    index = 0
    while True:
        header = stream.read(8)
        if not header:
            return
        if len(header) != 8:
            raise RecordError(f"record {index}: truncated length field")
        (length,) = struct.unpack("<Q", header)
        (len_crc,) = struct.unpack("<I", _read_exact(stream, 4, index, "length CRC"))
        if verify and mask_crc(crc32c(header)) != len_crc:
            raise RecordError(f"record {index}: length CRC mismatch")
        payload = _read_exact(stream, length, index, "payload")
        (data_crc,) = struct.unpack("<I", _read_exact(stream, 4, index, "payload CRC"))
        if verify and mask_crc(crc32c(payload)) != data_crc:
            raise RecordError(f"record {index}: payload CRC mismatch")
        yield payload
        index += 1
