"""Binary framing for every message exchanged between nodes.

Frame layout (all integers little-endian)::

    offset size field
    0      2    magic        0x4E 0x43 ("NC")
    2      1    version      0x01
    3      1    msg_type
    4      1    flags
    5      4    inference_id u32
    9      1    layer
    10     1    neuron
    11     2    seq          u16, chunk index
    13     2    payload_len  u16, <= 224
    15     n    payload
    15+n   4    crc32        IEEE, over bytes [0, 15+n)

An encoded frame is always ``19 + payload_len`` bytes and never exceeds
250 bytes, the ESP-NOW frame limit. Floats are IEEE-754 binary32.

Payloads by message type:

    0x01 WEIGHT_CHUNK  float32 slice of [bias, w0, w1, ...]; flags bit 0 marks
                       the last chunk, flags bits 4-7 carry the activation code
    0x02 INPUT_VECTOR  float32 inputs
    0x03 ACTIVATION    one float32
    0x04 RESULT        float32 outputs
    0x05 HEARTBEAT     role u8, 3 zero bytes, counter u32
    0x06 FAULT_INJECT  target layer u8, target neuron u8
    0x07 ACK           empty
    0x08 ROSTER        n u8, n layer sizes u8, count u16, count x (layer u8, neuron u8)

Worked example: ACTIVATION 1.0 for inference 7 from layer 1 neuron 3 is::

    4e 43 01 03 00 07 00 00 00 01 03 00 00 04 00 | 00 00 80 3f | crc32 LE
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .exceptions import FtnetError

MAGIC = b"NC"
VERSION = 0x01
HEADER = struct.Struct("<2sBBBIBBHH")
HEADER_SIZE = HEADER.size
CRC_SIZE = 4
MAX_FRAME = 250
MAX_PAYLOAD = 224
FLOATS_PER_CHUNK = MAX_PAYLOAD // 4

FLAG_LAST = 0x01
COORDINATOR_LAYER = 0xFF

ROLE_NODE = 0
ROLE_PRIMARY = 1
ROLE_STANDBY = 2

ACTIVATION_CODES = {"linear": 0, "relu": 1, "sigmoid": 2}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}

assert HEADER_SIZE == 15


class FrameError(FtnetError):
    """A byte string is not a valid frame."""


class FrameTooLarge(FrameError):
    pass


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class UnknownMessageType(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class PayloadError(FrameError):
    """The payload does not fit its message type's schema."""


class IncompleteError(FtnetError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing weight chunks: {self.missing}")


def _floats(payload: bytes) -> tuple[float, ...]:
    if len(payload) % 4:
        raise PayloadError(f"float payload of {len(payload)} bytes is not a multiple of 4")
    return struct.unpack(f"<{len(payload) // 4}f", payload)


def _pack_floats(values) -> bytes:
    return struct.pack(f"<{len(values)}f", *values)


@dataclass(frozen=True)
class WeightChunk:
    values: tuple[float, ...]
    type_code = 0x01

    def payload(self) -> bytes:
        return _pack_floats(self.values)

    @classmethod
    def parse(cls, payload):
        return cls(_floats(payload))


@dataclass(frozen=True)
class InputVector:
    values: tuple[float, ...]
    type_code = 0x02

    def payload(self) -> bytes:
        return _pack_floats(self.values)

    @classmethod
    def parse(cls, payload):
        return cls(_floats(payload))


@dataclass(frozen=True)
class Activation:
    value: float
    type_code = 0x03

    def payload(self) -> bytes:
        return struct.pack("<f", self.value)

    @classmethod
    def parse(cls, payload):
        if len(payload) != 4:
            raise PayloadError(f"ACTIVATION payload must be 4 bytes, got {len(payload)}")
        return cls(struct.unpack("<f", payload)[0])


@dataclass(frozen=True)
class Result:
    values: tuple[float, ...]
    type_code = 0x04

    def payload(self) -> bytes:
        return _pack_floats(self.values)

    @classmethod
    def parse(cls, payload):
        return cls(_floats(payload))


@dataclass(frozen=True)
class Heartbeat:
    role: int
    counter: int
    type_code = 0x05
    _fmt = struct.Struct("<B3xI")

    def payload(self) -> bytes:
        return self._fmt.pack(self.role, self.counter)

    @classmethod
    def parse(cls, payload):
        if len(payload) != cls._fmt.size:
            raise PayloadError(f"HEARTBEAT payload must be {cls._fmt.size} bytes, got {len(payload)}")
        role, counter = cls._fmt.unpack(payload)
        return cls(role, counter)


@dataclass(frozen=True)
class FaultInject:
    layer: int
    neuron: int
    type_code = 0x06

    def payload(self) -> bytes:
        return bytes([self.layer, self.neuron])

    @classmethod
    def parse(cls, payload):
        if len(payload) != 2:
            raise PayloadError(f"FAULT_INJECT payload must be 2 bytes, got {len(payload)}")
        return cls(payload[0], payload[1])


@dataclass(frozen=True)
class Ack:
    type_code = 0x07

    def payload(self) -> bytes:
        return b""

    @classmethod
    def parse(cls, payload):
        if payload:
            raise PayloadError("ACK carries no payload")
        return cls()


@dataclass(frozen=True)
class Roster:
    layer_sizes: tuple[int, ...]
    nodes: tuple[tuple[int, int], ...] = ()
    type_code = 0x08

    def payload(self) -> bytes:
        out = bytearray([len(self.layer_sizes)])
        out += bytes(self.layer_sizes)
        out += struct.pack("<H", len(self.nodes))
        for l, n in self.nodes:
            out += bytes([l, n])
        return bytes(out)

    @classmethod
    def parse(cls, payload):
        if not payload:
            raise PayloadError("empty ROSTER payload")
        n = payload[0]
        if len(payload) < 1 + n + 2:
            raise PayloadError("ROSTER payload truncated")
        sizes = tuple(payload[1:1 + n])
        (count,) = struct.unpack_from("<H", payload, 1 + n)
        rest = payload[3 + n:]
        if len(rest) != 2 * count:
            raise PayloadError(f"ROSTER lists {count} nodes but carries {len(rest)} bytes")
        nodes = tuple((rest[2 * i], rest[2 * i + 1]) for i in range(count))
        return cls(sizes, nodes)


MESSAGE_TYPES = {cls.type_code: cls for cls in
                 (WeightChunk, InputVector, Activation, Result, Heartbeat, FaultInject, Ack, Roster)}


@dataclass(frozen=True)
class Frame:
    body: object
    inference_id: int = 0
    layer: int = 0
    neuron: int = 0
    seq: int = 0
    flags: int = 0

    @property
    def msg_type(self) -> int:
        return self.body.type_code

    @property
    def source(self) -> tuple[int, int]:
        return (self.layer, self.neuron)


def encode_frame(frame: Frame) -> bytes:
    try:
        payload = frame.body.payload()
    except (struct.error, ValueError) as exc:
        raise FrameError(f"payload field out of range: {exc}") from None
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds frame cap of {MAX_PAYLOAD}")
    try:
        head = HEADER.pack(MAGIC, VERSION, frame.msg_type, frame.flags, frame.inference_id,
                           frame.layer, frame.neuron, frame.seq, len(payload))
    except struct.error as exc:
        raise FrameError(f"header field out of range: {exc}") from None
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def decode_frame(data: bytes) -> Frame:
    """Parse one frame; raises a :class:`FrameError` subclass on any defect."""
    data = bytes(data)
    if len(data) < HEADER_SIZE + CRC_SIZE:
        raise LengthMismatch(f"{len(data)} bytes is shorter than an empty frame")
    magic, version, msg_type, flags, inference_id, layer, neuron, seq, plen = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if len(data) != HEADER_SIZE + plen + CRC_SIZE:
        raise LengthMismatch(f"header announces {plen} payload bytes, frame holds {len(data) - HEADER_SIZE - CRC_SIZE}")
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + plen)
    if zlib.crc32(data[:HEADER_SIZE + plen]) != crc:
        raise CrcMismatch("CRC mismatch")
    cls = MESSAGE_TYPES.get(msg_type)
    if cls is None:
        raise UnknownMessageType(f"unknown message type 0x{msg_type:02x}")
    if plen > MAX_PAYLOAD:
        raise LengthMismatch(f"payload of {plen} bytes exceeds frame cap")
    body = cls.parse(data[HEADER_SIZE:HEADER_SIZE + plen])
    return Frame(body, inference_id, layer, neuron, seq, flags)


@dataclass
class NeuronParams:
    layer: int
    neuron: int
    weights: np.ndarray
    bias: np.float32
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = np.float32(self.bias)

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    def equal(self, other: "NeuronParams") -> bool:
        return (
            (self.layer, self.neuron, self.activation) == (other.layer, other.neuron, other.activation)
            and np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
        )


def chunk_weight_load(neuron: NeuronParams) -> list[Frame]:
    """Split ``[bias, w0, w1, ...]`` into WEIGHT_CHUNK frames of at most 224 bytes."""
    if neuron.fan_in > 0xFFFF:
        raise ValueError("fan_in above 65535 cannot be chunked")
    values = np.concatenate([[neuron.bias], neuron.weights]).astype(np.float32).tolist()
    act = ACTIVATION_CODES[neuron.activation] << 4
    starts = list(range(0, len(values), FLOATS_PER_CHUNK))
    frames = []
    for seq, lo in enumerate(starts):
        flags = act | (FLAG_LAST if seq == len(starts) - 1 else 0)
        frames.append(Frame(WeightChunk(tuple(values[lo:lo + FLOATS_PER_CHUNK])),
                            layer=neuron.layer, neuron=neuron.neuron, seq=seq, flags=flags))
    return frames


@dataclass
class WeightAssembler:
    """Collects WEIGHT_CHUNK frames for one neuron in any order, ignoring duplicates."""

    expected_fan_in: int | None = None
    chunks: dict[int, tuple[float, ...]] = field(default_factory=dict)
    last_seq: int | None = None
    activation: str | None = None
    target: tuple[int, int] | None = None

    def add(self, frame: Frame) -> None:
        if not isinstance(frame.body, WeightChunk):
            raise TypeError("not a WEIGHT_CHUNK frame")
        self.chunks.setdefault(frame.seq, frame.body.values)
        self.target = frame.source
        self.activation = ACTIVATION_NAMES.get(frame.flags >> 4, "linear")
        if frame.flags & FLAG_LAST:
            self.last_seq = frame.seq

    def _expected_count(self) -> int | None:
        if self.last_seq is not None:
            return self.last_seq + 1
        if self.expected_fan_in is not None:
            return -(-(self.expected_fan_in + 1) // FLOATS_PER_CHUNK)
        return None

    def missing(self) -> list:
        count = self._expected_count()
        if count is None:
            top = max(self.chunks, default=-1)
            return [s for s in range(top + 1) if s not in self.chunks] + ["last"]
        return [s for s in range(count) if s not in self.chunks]

    def complete(self) -> bool:
        return not self.missing()

    def result(self) -> NeuronParams:
        missing = self.missing()
        if missing:
            raise IncompleteError(missing)
        values = [v for s in sorted(self.chunks) for v in self.chunks[s]]
        layer, neuron = self.target
        return NeuronParams(layer, neuron, np.array(values[1:], dtype=np.float32), values[0], self.activation)


def reassemble(frames: Iterable[Frame], expected_fan_in: int | None = None) -> NeuronParams:
    asm = WeightAssembler(expected_fan_in)
    for f in frames:
        asm.add(f)
    return asm.result()
