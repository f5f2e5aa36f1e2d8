"""Edge preprocessing, stream synchronization, and the ingest service.

The service reads framed messages off a reliable byte stream (the
reference listener binds TCP; tests drive an in-process loopback), hands
frames and IMU samples over bounded queues, and applies back-pressure by
blocking the producer instead of dropping.
"""

from __future__ import annotations

import os
import queue
import socket
import threading
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from .protocol import (
    MSG_CAMERA,
    MSG_IMU,
    ImuSample,
    ProtocolError,
    SensorFrame,
    decode_frame,
    decode_imu,
    read_message,
    MSG_END_OF_STREAM,
)

PORT_ENV_VAR = "IE_INGEST_PORT"


@dataclass(frozen=True)
class SyncedRecord:
    """A frame paired with its nearest-in-time IMU sample, if close enough."""

    frame: SensorFrame
    imu: ImuSample | None
    skew_us: int | None

    def __post_init__(self):
        if (self.imu is None) != (self.skew_us is None):
            raise ValueError("imu and skew_us must be present together")


def edge_preprocess(imu_stream: list[ImuSample], window: int) -> list[ImuSample]:
    """Centered moving average over accel/gyro with edge truncation.

    Windows shrink near the boundaries; timestamps and sequence numbers
    pass through unchanged.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if not imu_stream:
        return []
    if window == 1:
        return list(imu_stream)
    values = np.array([s.accel + s.gyro for s in imu_stream], dtype=float)
    ones = np.ones(window)
    counts = np.convolve(np.ones(values.shape[0]), ones, mode="same")
    smoothed = np.empty_like(values)
    for col in range(values.shape[1]):
        smoothed[:, col] = np.convolve(values[:, col], ones, mode="same") / counts
    return [
        ImuSample(
            seq=s.seq,
            timestamp_us=s.timestamp_us,
            accel=tuple(smoothed[i, :3]),
            gyro=tuple(smoothed[i, 3:]),
        )
        for i, s in enumerate(imu_stream)
    ]


def _check_sorted(timestamps, label):
    for i in range(1, len(timestamps)):
        if timestamps[i] < timestamps[i - 1]:
            raise ValueError(f"{label} not sorted by timestamp at index {i}")


def synchronize_streams(
    frames: list[SensorFrame], imu: list[ImuSample], tolerance_us: int
) -> list[SyncedRecord]:
    """Pair each frame with the IMU sample of minimum |dt|.

    Pairs are kept only when |dt| <= tolerance; one IMU sample may serve
    several frames; ties resolve to the earlier sample. Output preserves
    frame order.
    """
    frame_ts = [f.timestamp_us for f in frames]
    imu_ts = [s.timestamp_us for s in imu]
    _check_sorted(frame_ts, "frames")
    _check_sorted(imu_ts, "imu stream")
    records = []
    for frame in frames:
        if not imu:
            records.append(SyncedRecord(frame=frame, imu=None, skew_us=None))
            continue
        pos = bisect_left(imu_ts, frame.timestamp_us)
        best = None
        for idx in (pos - 1, pos):
            if 0 <= idx < len(imu_ts):
                d = abs(imu_ts[idx] - frame.timestamp_us)
                if best is None or d < best[0]:
                    best = (d, idx)
        d, idx = best
        if d <= tolerance_us:
            records.append(
                SyncedRecord(
                    frame=frame,
                    imu=imu[idx],
                    skew_us=imu_ts[idx] - frame.timestamp_us,
                )
            )
        else:
            records.append(SyncedRecord(frame=frame, imu=None, skew_us=None))
    return records


def ingest_stream(stream, frame_queue: queue.Queue, imu_queue: queue.Queue) -> None:
    """Decode messages off a byte stream into the two bounded queues.

    Blocks on full queues (back-pressure). Puts a ``None`` sentinel on both
    queues at end-of-stream; protocol errors propagate after the sentinels
    are delivered.
    """
    error = None
    try:
        while True:
            item = read_message(stream)
            if item is None:
                break
            msg_type, payload = item
            if msg_type == MSG_END_OF_STREAM:
                break
            if msg_type == MSG_CAMERA:
                frame_queue.put(decode_frame(payload))
            elif msg_type == MSG_IMU:
                imu_queue.put(decode_imu(payload))
            else:
                raise ProtocolError("bad_type", f"unknown message type {msg_type}")
    except ProtocolError as exc:
        error = exc
    frame_queue.put(None)
    imu_queue.put(None)
    if error is not None:
        raise error


def drain_queue(q: queue.Queue) -> list:
    """Collect queue items until the ``None`` sentinel."""
    items = []
    while True:
        item = q.get()
        if item is None:
            return items
        items.append(item)


class IngestServer:
    """One-connection TCP listener feeding bounded frame/IMU queues.

    The port defaults to the IE_INGEST_PORT environment variable (0 picks
    an ephemeral port). ``accept_and_ingest`` runs the producer side; the
    caller consumes ``frames`` and ``imu`` until the ``None`` sentinels.
    """

    def __init__(self, host: str = "127.0.0.1", port: int | None = None,
                 queue_capacity: int = 64):
        if port is None:
            port = int(os.environ.get(PORT_ENV_VAR, "0"))
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)
        self.host, self.port = self._sock.getsockname()
        self.frames: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self.imu: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._error: ProtocolError | None = None

    def accept_and_ingest(self) -> None:
        conn, _ = self._sock.accept()
        try:
            with conn.makefile("rb") as stream:
                ingest_stream(stream, self.frames, self.imu)
        except ProtocolError as exc:
            self._error = exc
        finally:
            conn.close()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.accept_and_ingest, daemon=True)
        thread.start()
        return thread

    @property
    def error(self) -> ProtocolError | None:
        return self._error

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
