import queue
import socket
import threading

import numpy as np
import pytest

from posepipe.ingest import (
    IngestServer,
    SyncedRecord,
    drain_queue,
    edge_preprocess,
    ingest_stream,
    synchronize_streams,
)
from posepipe.protocol import (
    MSG_CAMERA,
    MSG_END_OF_STREAM,
    MSG_IMU,
    ImuSample,
    SensorFrame,
    encode_frame,
    encode_imu,
    encode_message,
)

from oracles import nearest_sample_ref


def imu(seq, t, ax=0.0):
    return ImuSample(seq=seq, timestamp_us=t, accel=(ax, 0.0, 0.0), gyro=(0.0, 0.0, 0.0))


def frame(seq, t, w=2, h=2):
    return SensorFrame(seq=seq, timestamp_us=t, width=w, height=h, channels=1,
                       pixels=bytes(w * h))


class TestEdgePreprocess:
    def test_window_one_is_identity(self):
        stream = [imu(i, i * 10, ax=float(i)) for i in range(5)]
        assert edge_preprocess(stream, 1) == stream

    def test_window_three_middle_mean(self):
        stream = [imu(0, 0, 1.0), imu(1, 10, 2.0), imu(2, 20, 3.0)]
        out = edge_preprocess(stream, 3)
        assert out[1].accel[0] == pytest.approx(2.0)
        # truncated edges: mean of the two in-range values
        assert out[0].accel[0] == pytest.approx(1.5)
        assert out[2].accel[0] == pytest.approx(2.5)
        assert [s.timestamp_us for s in out] == [0, 10, 20]
        assert [s.seq for s in out] == [0, 1, 2]

    def test_constant_stream_unchanged(self):
        stream = [imu(i, i, ax=4.25) for i in range(12)]
        out = edge_preprocess(stream, 5)
        assert all(s.accel[0] == pytest.approx(4.25) for s in out)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            edge_preprocess([imu(0, 0)], 2)

    def test_empty_stream(self):
        assert edge_preprocess([], 3) == []

    def test_mean_preserved_for_interior_dominated_streams(self):
        # Values at distance < window-1 from either end are zero, so every
        # nonzero sample carries total output weight exactly 1 and the sum
        # (hence the mean) is preserved to float precision.
        rng = np.random.default_rng(3)
        for window in (3, 5, 7):
            n = 12 * window
            pad = window - 1
            vals = np.zeros(n)
            vals[pad : n - pad] = rng.normal(size=n - 2 * pad)
            stream = [imu(i, i * 5, ax=float(v)) for i, v in enumerate(vals)]
            out = edge_preprocess(stream, window)
            got = np.mean([s.accel[0] for s in out])
            assert got == pytest.approx(float(vals.mean()), abs=1e-12)


class TestSynchronize:
    def test_identical_timestamps_zero_skew(self):
        frames = [frame(i, 100 * i) for i in range(4)]
        samples = [imu(i, 100 * i) for i in range(4)]
        records = synchronize_streams(frames, samples, tolerance_us=10)
        assert len(records) == 4
        assert all(r.skew_us == 0 for r in records)
        assert all(r.imu is samples[i] for i, r in enumerate(records))

    def test_no_imu_within_tolerance(self):
        records = synchronize_streams([frame(0, 1000)], [imu(0, 5000)], 100)
        assert records[0].imu is None
        assert records[0].skew_us is None

    def test_one_sample_can_serve_many_frames(self):
        frames = [frame(0, 90), frame(1, 100), frame(2, 110)]
        samples = [imu(0, 100)]
        records = synchronize_streams(frames, samples, 50)
        assert all(r.imu is samples[0] for r in records)
        assert [r.skew_us for r in records] == [10, 0, -10]

    def test_unsorted_input_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            synchronize_streams([frame(0, 100), frame(1, 50)], [], 10)
        with pytest.raises(ValueError, match="sorted"):
            synchronize_streams([], [imu(0, 100), imu(1, 50)], 10)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            frame_ts = np.sort(rng.integers(0, 10_000, size=8))
            imu_ts = np.sort(rng.integers(0, 10_000, size=13))
            frames = [frame(i, int(t)) for i, t in enumerate(frame_ts)]
            samples = [imu(i, int(t)) for i, t in enumerate(imu_ts)]
            tolerance = int(rng.integers(0, 2000))
            records = synchronize_streams(frames, samples, tolerance)
            assert len(records) == len(frames)
            for rec in records:
                best = nearest_sample_ref(rec.frame.timestamp_us, list(imu_ts))
                best_d = abs(int(imu_ts[best]) - rec.frame.timestamp_us)
                if best_d <= tolerance:
                    assert rec.imu is not None
                    got_d = abs(rec.imu.timestamp_us - rec.frame.timestamp_us)
                    assert got_d == best_d
                    assert abs(rec.skew_us) <= tolerance
                else:
                    assert rec.imu is None

    def test_record_invariant(self):
        with pytest.raises(ValueError):
            SyncedRecord(frame=frame(0, 0), imu=None, skew_us=5)


def scene_bytes():
    chunks = []
    for i in range(3):
        chunks.append(encode_message(MSG_CAMERA, encode_frame(frame(i, 100 * i))))
        chunks.append(encode_message(MSG_IMU, encode_imu(imu(i, 100 * i + 5))))
    chunks.append(encode_message(MSG_END_OF_STREAM, b""))
    return b"".join(chunks)


class TestIngestService:
    def test_in_process_stream(self):
        import io

        fq: queue.Queue = queue.Queue()
        iq: queue.Queue = queue.Queue()
        ingest_stream(io.BytesIO(scene_bytes()), fq, iq)
        frames = drain_queue(fq)
        samples = drain_queue(iq)
        assert [f.seq for f in frames] == [0, 1, 2]
        assert [s.seq for s in samples] == [0, 1, 2]

    def test_tcp_loopback(self):
        with IngestServer(port=0, queue_capacity=8) as server:
            thread = server.start_background()
            client = socket.create_connection((server.host, server.port))
            client.sendall(scene_bytes())
            client.close()
            frames = drain_queue(server.frames)
            samples = drain_queue(server.imu)
            thread.join(timeout=5)
            assert not thread.is_alive()
            assert server.error is None
            assert [f.seq for f in frames] == [0, 1, 2]
            assert [s.timestamp_us for s in samples] == [5, 105, 205]

    def test_port_env_override(self, monkeypatch):
        probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        probe.bind(("127.0.0.1", 0))
        free_port = probe.getsockname()[1]
        probe.close()
        monkeypatch.setenv("IE_INGEST_PORT", str(free_port))
        with IngestServer() as server:
            assert server.port == free_port

    def test_backpressure_blocks_producer(self):
        import io

        fq: queue.Queue = queue.Queue(maxsize=1)
        iq: queue.Queue = queue.Queue(maxsize=1)
        done = threading.Event()

        def producer():
            ingest_stream(io.BytesIO(scene_bytes()), fq, iq)
            done.set()

        thread = threading.Thread(target=producer, daemon=True)
        thread.start()
        # With capacity 1 and no consumer, the producer must stall.
        assert not done.wait(timeout=0.2)
        # Drain both queues concurrently; either alone would deadlock.
        frames_out: list = []
        drainer = threading.Thread(
            target=lambda: frames_out.extend(drain_queue(fq)), daemon=True
        )
        drainer.start()
        samples = drain_queue(iq)
        drainer.join(timeout=5)
        assert done.wait(timeout=5)
        assert len(frames_out) == 3
        assert len(samples) == 3
