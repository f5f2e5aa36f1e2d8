"""Bit-exact binary wire protocol for sensor streams.

Message layout (all multi-byte integers and reals big-endian):

    magic   2 bytes   0x49 0x45
    version 1 byte    0x01
    type    1 byte    0x01 camera | 0x02 imu | 0x03 end-of-stream
    length  u32       payload byte count
    payload bytes
    crc     u32       CRC-32 (poly 0x04C11DB7 reflected, init/xorout
                      0xFFFFFFFF) over magic..payload

The transport is any reliable ordered byte stream.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

MAGIC = b"\x49\x45"
VERSION = 0x01
MSG_CAMERA = 0x01
MSG_IMU = 0x02
MSG_END_OF_STREAM = 0x03

HEADER_LEN = 8
TRAILER_LEN = 4
MIN_MESSAGE_LEN = HEADER_LEN + TRAILER_LEN
MAX_PAYLOAD_LEN = 2**32 - 1

_FRAME_HEADER = struct.Struct(">IQHHB")
_IMU_LAYOUT = struct.Struct(">IQ6f")


class ProtocolError(ValueError):
    """Decode failure with a machine-readable ``reason``."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def encode_message(msg_type: int, payload: bytes) -> bytes:
    """Frame a payload; deterministic byte-for-byte."""
    if not 0 <= msg_type <= 0xFF:
        raise ValueError(f"msg_type must fit one byte, got {msg_type}")
    if len(payload) > MAX_PAYLOAD_LEN:
        raise ValueError(f"payload of {len(payload)} bytes exceeds u32 length")
    body = MAGIC + bytes((VERSION, msg_type)) + struct.pack(">I", len(payload)) + payload
    return body + struct.pack(">I", crc32(body))


def decode_message(buf: bytes) -> tuple[int, bytes]:
    """Decode exactly one message; raises ProtocolError with reason one of
    bad_magic, bad_version, truncated, crc_mismatch."""
    if len(buf) >= 2 and buf[:2] != MAGIC:
        raise ProtocolError("bad_magic", buf[:2].hex())
    if len(buf) >= 3 and buf[2] != VERSION:
        raise ProtocolError("bad_version", f"got {buf[2]:#04x}")
    if len(buf) < MIN_MESSAGE_LEN:
        raise ProtocolError(
            "truncated", f"{len(buf)} bytes, need at least {MIN_MESSAGE_LEN}"
        )
    (payload_len,) = struct.unpack(">I", buf[4:8])
    total = MIN_MESSAGE_LEN + payload_len
    if len(buf) != total:
        raise ProtocolError(
            "truncated", f"{len(buf)} bytes, framing says {total}"
        )
    body = buf[: HEADER_LEN + payload_len]
    (stated_crc,) = struct.unpack(">I", buf[HEADER_LEN + payload_len :])
    if crc32(body) != stated_crc:
        raise ProtocolError(
            "crc_mismatch", f"computed {crc32(body):#010x}, stated {stated_crc:#010x}"
        )
    return buf[3], buf[HEADER_LEN : HEADER_LEN + payload_len]


@dataclass(frozen=True)
class SensorFrame:
    """One grayscale camera frame; pixels are row-major bytes."""

    seq: int
    timestamp_us: int
    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ValueError(
                f"pixel byte count {len(self.pixels)} does not match "
                f"{self.width}x{self.height}x{self.channels}"
            )
        for name, value, bits in (
            ("seq", self.seq, 32),
            ("timestamp_us", self.timestamp_us, 64),
            ("width", self.width, 16),
            ("height", self.height, 16),
            ("channels", self.channels, 8),
        ):
            if not 0 <= value < 2**bits:
                raise ValueError(f"{name}={value} does not fit u{bits}")


@dataclass(frozen=True)
class ImuSample:
    """Accelerometer (m/s^2) and gyroscope (rad/s) triplets."""

    seq: int
    timestamp_us: int
    accel: tuple[float, float, float]
    gyro: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "accel", tuple(float(v) for v in self.accel))
        object.__setattr__(self, "gyro", tuple(float(v) for v in self.gyro))
        if len(self.accel) != 3 or len(self.gyro) != 3:
            raise ValueError("accel and gyro must each hold 3 components")
        if any(not math.isfinite(v) for v in self.accel + self.gyro):
            raise ValueError("accel/gyro values must be finite")


def encode_frame(frame: SensorFrame) -> bytes:
    header = _FRAME_HEADER.pack(
        frame.seq, frame.timestamp_us, frame.width, frame.height, frame.channels
    )
    return header + frame.pixels


def decode_frame(payload: bytes) -> SensorFrame:
    if len(payload) < _FRAME_HEADER.size:
        raise ProtocolError("truncated", "camera payload shorter than its header")
    seq, ts, width, height, channels = _FRAME_HEADER.unpack(
        payload[: _FRAME_HEADER.size]
    )
    pixels = payload[_FRAME_HEADER.size :]
    if len(pixels) != width * height * channels:
        raise ProtocolError(
            "truncated",
            f"camera payload holds {len(pixels)} pixel bytes, "
            f"dims need {width * height * channels}",
        )
    return SensorFrame(
        seq=seq,
        timestamp_us=ts,
        width=width,
        height=height,
        channels=channels,
        pixels=pixels,
    )


def encode_imu(sample: ImuSample) -> bytes:
    return _IMU_LAYOUT.pack(
        sample.seq, sample.timestamp_us, *sample.accel, *sample.gyro
    )


def decode_imu(payload: bytes) -> ImuSample:
    if len(payload) != _IMU_LAYOUT.size:
        raise ProtocolError(
            "truncated", f"imu payload is {len(payload)} bytes, need {_IMU_LAYOUT.size}"
        )
    seq, ts, ax, ay, az, gx, gy, gz = _IMU_LAYOUT.unpack(payload)
    return ImuSample(seq=seq, timestamp_us=ts, accel=(ax, ay, az), gyro=(gx, gy, gz))


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(stream) -> tuple[int, bytes] | None:
    """Read one framed message from a byte stream.

    Returns None on a clean end-of-stream (zero bytes available); raises
    ProtocolError for a partial or corrupt message.
    """
    header = _read_exact(stream, HEADER_LEN)
    if not header:
        return None
    if len(header) < HEADER_LEN:
        raise ProtocolError("truncated", "partial header at end of stream")
    (payload_len,) = struct.unpack(">I", header[4:8])
    rest = _read_exact(stream, payload_len + TRAILER_LEN)
    if len(rest) < payload_len + TRAILER_LEN:
        raise ProtocolError("truncated", "stream ended inside a message")
    return decode_message(header + rest)


def iter_messages(stream):
    """Yield (msg_type, payload) until end-of-stream marker or EOF."""
    while True:
        item = read_message(stream)
        if item is None:
            return
        msg_type, payload = item
        if msg_type == MSG_END_OF_STREAM:
            return
        yield msg_type, payload
