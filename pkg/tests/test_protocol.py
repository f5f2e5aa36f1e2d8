import io

import numpy as np
import pytest

from posepipe.protocol import (
    MSG_CAMERA,
    MSG_END_OF_STREAM,
    MSG_IMU,
    ImuSample,
    ProtocolError,
    SensorFrame,
    crc32,
    decode_frame,
    decode_imu,
    decode_message,
    encode_frame,
    encode_imu,
    encode_message,
    iter_messages,
    read_message,
)

from oracles import crc32_bitwise


class TestCrc32:
    def test_published_check_value(self):
        assert crc32(b"123456789") == 0xCBF43926
        assert crc32_bitwise(b"123456789") == 0xCBF43926

    def test_matches_bitwise_oracle_on_random_data(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            data = rng.integers(0, 256, size=int(rng.integers(0, 64))).astype(
                np.uint8
            ).tobytes()
            assert crc32(data) == crc32_bitwise(data)


class TestEncodeDecode:
    def test_end_of_stream_layout(self):
        msg = encode_message(MSG_END_OF_STREAM, b"")
        assert len(msg) == 12
        assert msg[:8] == bytes.fromhex("49 45 01 03 00 00 00 00".replace(" ", ""))
        stated = int.from_bytes(msg[8:], "big")
        assert stated == crc32_bitwise(msg[:8])

    def test_roundtrip_fuzzed_payloads(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            msg_type = int(rng.integers(1, 4))
            n = int(rng.integers(0, 200))
            payload = rng.integers(0, 256, size=n).astype(np.uint8).tobytes()
            encoded = encode_message(msg_type, payload)
            got_type, got_payload = decode_message(encoded)
            assert got_type == msg_type
            assert got_payload == payload

    def test_payload_bit_flip_detected_as_crc_mismatch(self):
        payload = bytes(range(32))
        msg = bytearray(encode_message(MSG_CAMERA, payload))
        for byte_idx in range(8, 8 + len(payload)):
            for bit in range(8):
                corrupted = bytearray(msg)
                corrupted[byte_idx] ^= 1 << bit
                with pytest.raises(ProtocolError) as exc:
                    decode_message(bytes(corrupted))
                assert exc.value.reason == "crc_mismatch"

    def test_truncated_last_byte(self):
        msg = encode_message(MSG_IMU, b"abc")
        with pytest.raises(ProtocolError) as exc:
            decode_message(msg[:-1])
        assert exc.value.reason == "truncated"

    def test_bad_magic_and_version(self):
        msg = bytearray(encode_message(MSG_CAMERA, b"xy"))
        wrong_magic = bytes(b"\x00" + msg[1:])
        with pytest.raises(ProtocolError) as exc:
            decode_message(wrong_magic)
        assert exc.value.reason == "bad_magic"
        wrong_version = bytes(msg[:2]) + b"\x02" + bytes(msg[3:])
        with pytest.raises(ProtocolError) as exc:
            decode_message(wrong_version)
        assert exc.value.reason == "bad_version"

    def test_exhaustive_single_bit_corruption_of_64_byte_message(self):
        payload = np.random.default_rng(7).integers(0, 256, size=52).astype(
            np.uint8
        ).tobytes()
        msg = encode_message(MSG_CAMERA, payload)
        assert len(msg) == 64
        detected = 0
        for byte_idx in range(64):
            for bit in range(8):
                corrupted = bytearray(msg)
                corrupted[byte_idx] ^= 1 << bit
                try:
                    decode_message(bytes(corrupted))
                except ProtocolError:
                    detected += 1
        assert detected == 64 * 8

    def test_oversized_payload_rejected(self):
        class FakeBytes(bytes):
            def __len__(self):
                return 2**32

        with pytest.raises(ValueError, match="u32"):
            encode_message(MSG_CAMERA, FakeBytes())


class TestSensorPayloads:
    def frame(self):
        pixels = bytes(range(12))
        return SensorFrame(
            seq=3, timestamp_us=1_000_000, width=4, height=3, channels=1,
            pixels=pixels,
        )

    def test_frame_roundtrip(self):
        f = self.frame()
        assert decode_frame(encode_frame(f)) == f

    def test_frame_pixel_count_validated(self):
        with pytest.raises(ValueError, match="pixel byte count"):
            SensorFrame(seq=0, timestamp_us=0, width=2, height=2, channels=1,
                        pixels=b"abc")

    def test_imu_roundtrip_float32_exact(self):
        vals = np.array([1.5, -2.25, 0.125, 9.81, -0.5, 3.0], dtype=np.float32)
        sample = ImuSample(
            seq=9,
            timestamp_us=123456,
            accel=tuple(float(v) for v in vals[:3]),
            gyro=tuple(float(v) for v in vals[3:]),
        )
        assert decode_imu(encode_imu(sample)) == sample

    def test_imu_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            ImuSample(seq=0, timestamp_us=0, accel=(float("nan"), 0, 0),
                      gyro=(0, 0, 0))

    def test_big_endian_layout(self):
        f = SensorFrame(seq=1, timestamp_us=2, width=3, height=1, channels=1,
                        pixels=b"\x00\x01\x02")
        payload = encode_frame(f)
        assert payload[:4] == b"\x00\x00\x00\x01"        # seq
        assert payload[4:12] == (2).to_bytes(8, "big")   # timestamp
        assert payload[12:14] == b"\x00\x03"             # width


class TestStreamReader:
    def test_iter_until_eos(self):
        buf = io.BytesIO(
            encode_message(MSG_CAMERA, b"frame0")
            + encode_message(MSG_IMU, b"imu0")
            + encode_message(MSG_END_OF_STREAM, b"")
            + b"garbage-after-eos-is-never-read"
        )
        messages = list(iter_messages(buf))
        assert messages == [(MSG_CAMERA, b"frame0"), (MSG_IMU, b"imu0")]

    def test_clean_eof_returns_none(self):
        assert read_message(io.BytesIO(b"")) is None

    def test_partial_message_raises(self):
        msg = encode_message(MSG_CAMERA, b"abcdef")
        with pytest.raises(ProtocolError) as exc:
            read_message(io.BytesIO(msg[:-3]))
        assert exc.value.reason == "truncated"
