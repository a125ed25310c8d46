"""Hand-written codec for serialized ``Example`` protocol buffers.

Only what note records need: ``Example.features`` (field 1) holding a map
of name -> ``Feature``, where a Feature carries one of ``bytes_list`` (1),
``float_list`` (2) or ``int64_list`` (3), each a repeated ``value`` field 1.
Repeated numerics are accepted packed or unpacked and always written
packed. Unrecognized fields and feature keys are kept as raw bytes and
re-emitted unchanged.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..dsp import MAX_PITCH, MIN_PITCH, NOTE_SAMPLES, SAMPLE_RATE, VELOCITIES

SOURCES = ("acoustic", "electronic", "synthetic")
FAMILIES = ("bass", "brass", "flute", "guitar", "keyboard", "mallet", "organ", "reed", "string",
            "synth_lead", "vocal")
QUALITIES = ("bright", "dark", "distortion", "fast_decay", "long_release", "multiphonic",
             "nonlinear_env", "percussive", "reverb", "tempo-synced")

VARINT, I64, LEN, I32 = 0, 1, 2, 5

REQUIRED_KEYS = ("audio", "pitch", "velocity", "instrument", "instrument_source", "instrument_family",
                 "qualities", "note_str")


class ExampleError(ValueError):
    pass


# varints
def encode_varint(value: int) -> bytes:
    value &= 0xFFFFFFFFFFFFFFFF  # negative int64 -> two's complement, 10 bytes
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    start = pos
    while True:
        if pos >= len(buf):
            raise ExampleError(f"malformed varint at offset {start}: truncated")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result & 0xFFFFFFFFFFFFFFFF, pos
        shift += 7
        if shift >= 70:
            raise ExampleError(f"malformed varint at offset {start}: too long")


def _signed64(v: int) -> int:
    return v - (1 << 64) if v >= 1 << 63 else v


def iter_fields(buf: bytes):
    """Yield ``(field_number, wire_type, value, raw_bytes)`` for each field in a message."""
    pos = 0
    while pos < len(buf):
        start = pos
        key, pos = decode_varint(buf, pos)
        num, wt = key >> 3, key & 7
        if num == 0:
            raise ExampleError(f"invalid field number 0 at offset {start}")
        if wt == VARINT:
            val, pos = decode_varint(buf, pos)
        elif wt == I64:
            if pos + 8 > len(buf):
                raise ExampleError("malformed message: truncated fixed64 field")
            val, pos = buf[pos: pos + 8], pos + 8
        elif wt == LEN:
            n, pos = decode_varint(buf, pos)
            if pos + n > len(buf):
                raise ExampleError(f"malformed message: length-delimited field {num} overruns the buffer")
            val, pos = buf[pos: pos + n], pos + n
        elif wt == I32:
            if pos + 4 > len(buf):
                raise ExampleError("malformed message: truncated fixed32 field")
            val, pos = buf[pos: pos + 4], pos + 4
        else:
            raise ExampleError(f"unsupported wire type {wt} for field {num}")
        yield num, wt, val, buf[start:pos]


def _tag(num: int, wt: int) -> bytes:
    return encode_varint(num << 3 | wt)


def _len_field(num: int, payload: bytes) -> bytes:
    return _tag(num, LEN) + encode_varint(len(payload)) + payload


# Feature values
@dataclass
class FeatureValue:
    kind: str  # "bytes" | "float" | "int64"
    values: list | np.ndarray


def parse_feature(buf: bytes) -> FeatureValue:
    kind, values = None, None
    for num, wt, val, _ in iter_fields(buf):
        if num not in (1, 2, 3) or wt != LEN:
            continue
        kind = {1: "bytes", 2: "float", 3: "int64"}[num]
        values = _parse_list(kind, val)
    if kind is None:
        raise ExampleError("feature carries no value list")
    return FeatureValue(kind, values)


def _parse_list(kind: str, buf: bytes):
    if kind == "bytes":
        return [bytes(v) for num, wt, v, _ in iter_fields(buf) if num == 1 and wt == LEN]
    chunks, scalars = [], []
    for num, wt, val, _ in iter_fields(buf):
        if num != 1:
            continue
        if kind == "float":
            if wt == LEN:
                if len(val) % 4:
                    raise ExampleError("packed float list length not a multiple of 4")
                chunks.append(np.frombuffer(val, dtype="<f4"))
            elif wt == I32:
                chunks.append(np.frombuffer(val, dtype="<f4"))
            else:
                raise ExampleError(f"wrong wire type {wt} in float list")
        else:
            if wt == LEN:
                pos, packed = 0, []
                while pos < len(val):
                    v, pos = decode_varint(val, pos)
                    packed.append(_signed64(v))
                scalars.extend(packed)
            elif wt == VARINT:
                scalars.append(_signed64(val))
            else:
                raise ExampleError(f"wrong wire type {wt} in int64 list")
    if kind == "float":
        return np.concatenate(chunks).astype(np.float32) if chunks else np.zeros(0, np.float32)
    return np.asarray(scalars, dtype=np.int64)


def encode_feature(fv: FeatureValue) -> bytes:
    if fv.kind == "bytes":
        inner = b"".join(_len_field(1, bytes(v)) for v in fv.values)
        return _len_field(1, inner)
    if fv.kind == "float":
        arr = np.asarray(fv.values, dtype="<f4")
        inner = _len_field(1, arr.tobytes()) if arr.size else b""
        return _len_field(2, inner)
    if fv.kind == "int64":
        packed = b"".join(encode_varint(int(v)) for v in np.asarray(fv.values, dtype=np.int64))
        inner = _len_field(1, packed) if packed else b""
        return _len_field(3, inner)
    raise ValueError(f"unknown feature kind {fv.kind!r}")


def parse_features(payload: bytes) -> tuple[dict[str, bytes], bytes]:
    """Split an Example into raw Feature bytes per key, plus unknown top-level fields."""
    features: dict[str, bytes] = {}
    unknown = bytearray()
    for num, wt, val, raw in iter_fields(payload):
        if num != 1 or wt != LEN:
            unknown += raw
            continue
        for fnum, fwt, entry, _ in iter_fields(val):
            if fnum != 1 or fwt != LEN:
                continue
            key, value = None, b""
            for enum_, ewt, ev, _ in iter_fields(entry):
                if enum_ == 1 and ewt == LEN:
                    key = bytes(ev).decode("utf-8")
                elif enum_ == 2 and ewt == LEN:
                    value = bytes(ev)
            if key is None:
                raise ExampleError("feature map entry without a key")
            features[key] = value
    return features, bytes(unknown)


def encode_features(features: dict[str, bytes], unknown: bytes = b"") -> bytes:
    entries = b"".join(_len_field(1, _len_field(1, k.encode("utf-8")) + _len_field(2, v))
                       for k, v in features.items())
    return _len_field(1, entries) + unknown


@dataclass(eq=False)
class NoteRecord:
    note_id: str
    instrument_id: int
    pitch: int
    velocity: int
    source: str
    family: str
    qualities: np.ndarray
    audio: np.ndarray
    sample_rate: int = SAMPLE_RATE
    extra: dict[str, bytes] = field(default_factory=dict)
    unknown: bytes = b""

    def __post_init__(self):
        self.qualities = np.asarray(self.qualities, dtype=np.int64)
        self.audio = np.asarray(self.audio, dtype=np.float32)

    def __eq__(self, other):
        if not isinstance(other, NoteRecord):
            return NotImplemented
        return (self.note_id == other.note_id and self.instrument_id == other.instrument_id
                and self.pitch == other.pitch and self.velocity == other.velocity
                and self.source == other.source and self.family == other.family
                and np.array_equal(self.qualities, other.qualities)
                and np.array_equal(self.audio, other.audio)
                and self.sample_rate == other.sample_rate and self.extra == other.extra
                and self.unknown == other.unknown)

    def validate(self, strict_length: bool = True) -> None:
        problems = []
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            problems.append(f"pitch {self.pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
        if self.velocity not in VELOCITIES:
            problems.append(f"velocity {self.velocity} not in {VELOCITIES}")
        if self.source not in SOURCES:
            problems.append(f"unknown source {self.source!r}")
        if self.family not in FAMILIES:
            problems.append(f"unknown family {self.family!r}")
        if self.qualities.shape != (len(QUALITIES),) or not np.isin(self.qualities, (0, 1)).all():
            problems.append("qualities must be a binary vector of length 10")
        elif self.qualities[0] and self.qualities[1]:
            problems.append("bright and dark are mutually exclusive")
        if self.sample_rate != SAMPLE_RATE:
            problems.append(f"sample_rate {self.sample_rate} != {SAMPLE_RATE}")
        if strict_length and self.audio.shape != (NOTE_SAMPLES,):
            problems.append(f"audio has {self.audio.size} samples, expected {NOTE_SAMPLES}")
        if not np.all(np.isfinite(self.audio)):
            problems.append("non-finite audio")
        if problems:
            raise ValueError(f"{self.note_id}: " + "; ".join(problems))


def _scalar(features: dict[str, FeatureValue], key: str, kind: str = "int64"):
    fv = features[key]
    if fv.kind != kind:
        raise ExampleError(f"feature {key!r} should be a {kind} list, found {fv.kind}")
    if len(fv.values) != 1:
        raise ExampleError(f"feature {key!r} should hold exactly one value, found {len(fv.values)}")
    return fv.values[0]


def parse_example(payload: bytes) -> NoteRecord:
    raw, unknown = parse_features(payload)
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ExampleError(f"missing required feature(s): {', '.join(missing)}")
    known = set(REQUIRED_KEYS) | {"sample_rate"}
    feats = {k: parse_feature(v) for k, v in raw.items() if k in known}
    if feats["audio"].kind != "float":
        raise ExampleError(f"feature 'audio' should be a float list, found {feats['audio'].kind}")
    if feats["qualities"].kind != "int64":
        raise ExampleError(f"feature 'qualities' should be an int64 list, found {feats['qualities'].kind}")
    src, fam = int(_scalar(feats, "instrument_source")), int(_scalar(feats, "instrument_family"))
    if not 0 <= src < len(SOURCES):
        raise ExampleError(f"instrument_source index {src} out of range")
    if not 0 <= fam < len(FAMILIES):
        raise ExampleError(f"instrument_family index {fam} out of range")
    return NoteRecord(
        note_id=_scalar(feats, "note_str", "bytes").decode("utf-8"),
        instrument_id=int(_scalar(feats, "instrument")),
        pitch=int(_scalar(feats, "pitch")),
        velocity=int(_scalar(feats, "velocity")),
        source=SOURCES[src],
        family=FAMILIES[fam],
        qualities=feats["qualities"].values,
        audio=feats["audio"].values,
        sample_rate=int(_scalar(feats, "sample_rate")) if "sample_rate" in feats else SAMPLE_RATE,
        extra={k: v for k, v in raw.items() if k not in known},
        unknown=unknown,
    )


def encode_example(rec: NoteRecord) -> bytes:
    feats = {
        "note_str": encode_feature(FeatureValue("bytes", [rec.note_id.encode("utf-8")])),
        "instrument": encode_feature(FeatureValue("int64", [rec.instrument_id])),
        "pitch": encode_feature(FeatureValue("int64", [rec.pitch])),
        "velocity": encode_feature(FeatureValue("int64", [rec.velocity])),
        "sample_rate": encode_feature(FeatureValue("int64", [rec.sample_rate])),
        "instrument_source": encode_feature(FeatureValue("int64", [SOURCES.index(rec.source)])),
        "instrument_family": encode_feature(FeatureValue("int64", [FAMILIES.index(rec.family)])),
        "qualities": encode_feature(FeatureValue("int64", list(rec.qualities))),
        "audio": encode_feature(FeatureValue("float", rec.audio)),
    }
    feats.update(rec.extra)
    return encode_features(feats, rec.unknown)
