"""Deterministic synthetic scene generator.

Renders 1-3 articulated stick figures (Gaussian joint blobs, anti-aliased
limb capsules) moving along seeded smooth trajectories, and emits the
matching ground-truth joints, depth maps, oracle heatmaps/PAFs, and IMU
traces tied to the tracked person's root joint. Stands in for real sensor
recordings at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import LimbTopology
from .protocol import (
    MSG_CAMERA,
    MSG_END_OF_STREAM,
    MSG_IMU,
    ImuSample,
    SensorFrame,
    decode_frame,
    decode_imu,
    encode_frame,
    encode_imu,
    encode_message,
    iter_messages,
)
from .tensor import Tensor, load_tensor_text, save_tensor_text

KP_HEAD, KP_NECK, KP_LHAND, KP_RHAND, KP_HIP, KP_LFOOT, KP_RFOOT = range(7)

DEFAULT_KEYPOINT_NAMES = (
    "head", "neck", "l_hand", "r_hand", "hip", "l_foot", "r_foot",
)
DEFAULT_LIMBS = (
    (KP_NECK, KP_HEAD),
    (KP_NECK, KP_LHAND),
    (KP_NECK, KP_RHAND),
    (KP_NECK, KP_HIP),
    (KP_HIP, KP_LFOOT),
    (KP_HIP, KP_RFOOT),
)


def default_topology() -> LimbTopology:
    return LimbTopology(keypoint_names=DEFAULT_KEYPOINT_NAMES, limbs=DEFAULT_LIMBS)


@dataclass(frozen=True)
class SceneSpec:
    """Scene parameters; margin 0 disables the separation constraint."""

    persons: int = 1
    frames: int = 8
    height: int = 64
    width: int = 64
    fps: float = 30.0
    heatmap_sigma: float = 1.5
    paf_width: float = 1.5
    margin: float = 4.0
    motion_scale: float = 1.0
    max_retries: int = 16

    def __post_init__(self):
        if not 1 <= self.persons <= 3:
            raise ValueError(f"persons must be 1..3, got {self.persons}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.height < 32 or self.width < 32:
            raise ValueError(
                f"frame size must be at least 32x32, got {self.height}x{self.width}"
            )
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.heatmap_sigma <= 0 or self.paf_width <= 0:
            raise ValueError("heatmap_sigma and paf_width must be positive")
        if self.motion_scale < 0 or self.margin < 0:
            raise ValueError("motion_scale and margin must be >= 0")

    @property
    def frame_interval_us(self) -> int:
        return round(1_000_000 / self.fps)


@dataclass
class SceneData:
    """A generated or loaded scene plus all of its oracle artifacts."""

    seed: int
    fps: float
    topology: LimbTopology
    frames: list[SensorFrame]
    imu: list[ImuSample]
    ground_truth: list[list[np.ndarray]]  # [frame][person] -> (K, 3) of x, y, z
    depth_maps: list[Tensor]              # (1,H,W) per frame
    heatmaps: list[Tensor]                # (K,H,W) per frame
    pafs: list[Tensor]                    # (2L,H,W) per frame
    heatmap_sigma: float

    @property
    def n_frames(self) -> int:
        return len(self.ground_truth)

    @property
    def n_persons(self) -> int:
        return len(self.ground_truth[0]) if self.ground_truth else 0

    @property
    def frame_size(self) -> tuple[int, int]:
        h = self.heatmaps[0].shape[1]
        w = self.heatmaps[0].shape[2]
        return h, w


def derive_seed(seed: int) -> int:
    """Deterministic follow-up seed for scene regeneration."""
    return (seed * 6364136223846793005 + 1442695040888963407) % 2**64


class _PersonPath:
    """Seeded smooth kinematics for one stick figure."""

    def __init__(self, rng: np.random.Generator, spec: SceneSpec, slot: int):
        h, w = spec.height, spec.width
        partitions = spec.persons if spec.margin > 0 else 1
        self.scale = min(h / 3.4, w / (spec.persons * 3.4)) * rng.uniform(0.8, 1.0)
        self.torso = self.scale
        self.head_len = 0.4 * self.scale
        self.arm = 0.75 * self.scale
        self.leg = 0.9 * self.scale
        reach_x = max(self.arm, self.leg) + 3.0
        reach_up = self.torso + self.head_len + 3.0
        reach_down = self.leg + 3.0
        if spec.margin > 0:
            lane_w = w / partitions
            x_lo = slot * lane_w + reach_x
            x_hi = (slot + 1) * lane_w - reach_x
        else:
            x_lo, x_hi = reach_x, w - reach_x
        x_lo = min(x_lo, x_hi)
        y_lo = reach_up
        y_hi = h - reach_down
        self.base_x = rng.uniform(x_lo, x_hi)
        self.base_y = rng.uniform(min(y_lo, y_hi), max(y_lo, y_hi))
        m = spec.motion_scale
        self.amp_x = m * rng.uniform(0.2, 0.6) * max(
            0.0, min(self.base_x - x_lo, x_hi - self.base_x)
        )
        self.amp_y = m * rng.uniform(0.2, 0.6) * max(
            0.0, min(self.base_y - y_lo, y_hi - self.base_y)
        )
        self.freq_x = rng.uniform(0.2, 0.6)
        self.freq_y = rng.uniform(0.2, 0.6)
        self.phase_x = rng.uniform(0, 2 * math.pi)
        self.phase_y = rng.uniform(0, 2 * math.pi)
        self.tilt_amp = m * rng.uniform(0.0, 0.12)
        self.tilt_freq = rng.uniform(0.2, 0.5)
        self.tilt_phase = rng.uniform(0, 2 * math.pi)
        self.arm_base = rng.uniform(0.4, 0.8, size=2)
        self.arm_amp = m * rng.uniform(0.1, 0.3, size=2)
        self.arm_freq = rng.uniform(0.3, 0.8, size=2)
        self.arm_phase = rng.uniform(0, 2 * math.pi, size=2)
        self.leg_base = rng.uniform(0.15, 0.4, size=2)
        self.leg_amp = m * rng.uniform(0.05, 0.2, size=2)
        self.leg_freq = rng.uniform(0.3, 0.8, size=2)
        self.leg_phase = rng.uniform(0, 2 * math.pi, size=2)

    def root(self, t: float) -> tuple[float, float]:
        x = self.base_x + self.amp_x * math.sin(2 * math.pi * self.freq_x * t + self.phase_x)
        y = self.base_y + self.amp_y * math.sin(2 * math.pi * self.freq_y * t + self.phase_y)
        return x, y

    def tilt(self, t: float) -> float:
        return self.tilt_amp * math.sin(2 * math.pi * self.tilt_freq * t + self.tilt_phase)

    def joints(self, t: float) -> np.ndarray:
        """(K, 2) x/y joint positions at time t seconds."""
        hip_x, hip_y = self.root(t)
        tilt = self.tilt(t)
        up = (math.sin(tilt), -math.cos(tilt))
        neck = (hip_x + self.torso * up[0], hip_y + self.torso * up[1])
        head = (neck[0] + self.head_len * up[0], neck[1] + self.head_len * up[1])
        out = np.zeros((7, 2))
        out[KP_HIP] = (hip_x, hip_y)
        out[KP_NECK] = neck
        out[KP_HEAD] = head
        for side, (kp, length, base, amp, freq, phase, origin) in enumerate(
            (
                (KP_LHAND, self.arm, self.arm_base[0], self.arm_amp[0],
                 self.arm_freq[0], self.arm_phase[0], neck),
                (KP_RHAND, self.arm, self.arm_base[1], self.arm_amp[1],
                 self.arm_freq[1], self.arm_phase[1], neck),
            )
        ):
            sign = -1.0 if side == 0 else 1.0
            angle = base + amp * math.sin(2 * math.pi * freq * t + phase)
            out[kp] = (
                origin[0] + sign * length * math.sin(angle),
                origin[1] + length * math.cos(angle),
            )
        for side, (kp, base, amp, freq, phase) in enumerate(
            (
                (KP_LFOOT, self.leg_base[0], self.leg_amp[0],
                 self.leg_freq[0], self.leg_phase[0]),
                (KP_RFOOT, self.leg_base[1], self.leg_amp[1],
                 self.leg_freq[1], self.leg_phase[1]),
            )
        ):
            sign = -1.0 if side == 0 else 1.0
            angle = base + amp * math.sin(2 * math.pi * freq * t + phase)
            out[kp] = (
                hip_x + sign * self.leg * math.sin(angle),
                hip_y + self.leg * math.cos(angle),
            )
        return out


def _render_frame(points_per_person, spec: SceneSpec, topo: LimbTopology) -> np.ndarray:
    """Grayscale uint8 canvas with joint blobs and limb capsules."""
    h, w = spec.height, spec.width
    canvas = np.zeros((h, w))
    blob_sigma = 1.2
    limb_sigma = 0.7
    for points in points_per_person:
        for a_idx, b_idx in topo.limbs:
            ax, ay = points[a_idx]
            bx, by = points[b_idx]
            x0 = max(0, int(math.floor(min(ax, bx) - 3)))
            x1 = min(w - 1, int(math.ceil(max(ax, bx) + 3)))
            y0 = max(0, int(math.floor(min(ay, by) - 3)))
            y1 = min(h - 1, int(math.ceil(max(ay, by) + 3)))
            if x0 > x1 or y0 > y1:
                continue
            ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
            dx, dy = bx - ax, by - ay
            seg_sq = dx * dx + dy * dy
            if seg_sq == 0:
                continue
            tproj = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg_sq, 0.0, 1.0)
            px = ax + tproj * dx
            py = ay + tproj * dy
            d2 = (xs - px) ** 2 + (ys - py) ** 2
            contrib = 0.8 * np.exp(-d2 / (2 * limb_sigma**2))
            region = canvas[y0 : y1 + 1, x0 : x1 + 1]
            np.maximum(region, contrib, out=region)
        for jx, jy in points:
            x0 = max(0, int(math.floor(jx - 4)))
            x1 = min(w - 1, int(math.ceil(jx + 4)))
            y0 = max(0, int(math.floor(jy - 4)))
            y1 = min(h - 1, int(math.ceil(jy + 4)))
            if x0 > x1 or y0 > y1:
                continue
            ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
            d2 = (xs - jx) ** 2 + (ys - jy) ** 2
            contrib = np.exp(-d2 / (2 * blob_sigma**2))
            region = canvas[y0 : y1 + 1, x0 : x1 + 1]
            np.maximum(region, contrib, out=region)
    return np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)


def render_heatmaps(points_per_person, h: int, w: int, sigma: float,
                    n_keypoints: int) -> np.ndarray:
    """Per-keypoint max-combined unit-peak Gaussians at the true joints."""
    heat = np.zeros((n_keypoints, h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    for points in points_per_person:
        for kp in range(n_keypoints):
            cx, cy = points[kp]
            blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
            np.maximum(heat[kp], blob, out=heat[kp])
    return heat


def render_pafs(points_per_person, h: int, w: int, width: float,
                topo: LimbTopology) -> np.ndarray:
    """Unit direction fields inside each limb corridor, averaged on overlap."""
    sums = np.zeros((topo.n_limbs, 2, h, w))
    counts = np.zeros((topo.n_limbs, h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    for points in points_per_person:
        for li, (a_idx, b_idx) in enumerate(topo.limbs):
            ax, ay = points[a_idx]
            bx, by = points[b_idx]
            dx, dy = bx - ax, by - ay
            norm = math.hypot(dx, dy)
            if norm == 0:
                continue
            ux, uy = dx / norm, dy / norm
            proj = (xs - ax) * ux + (ys - ay) * uy
            perp = np.abs((xs - ax) * (-uy) + (ys - ay) * ux)
            mask = (proj >= -width) & (proj <= norm + width) & (perp <= width)
            sums[li, 0][mask] += ux
            sums[li, 1][mask] += uy
            counts[li][mask] += 1.0
    pafs = np.zeros((2 * topo.n_limbs, h, w))
    for li in range(topo.n_limbs):
        nz = counts[li] > 0
        pafs[2 * li][nz] = sums[li, 0][nz] / counts[li][nz]
        pafs[2 * li + 1][nz] = sums[li, 1][nz] / counts[li][nz]
    return pafs


def _depth_plane(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(2.0, 4.0)
    gx = rng.uniform(-1.0, 1.0)
    gy = rng.uniform(-1.0, 1.0)
    ys, xs = np.mgrid[0:h, 0:w]
    return base + gx * xs / max(w - 1, 1) + gy * ys / max(h - 1, 1)


def _sample_plane(plane: np.ndarray, x: float, y: float) -> float:
    h, w = plane.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(x), int(y)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = plane[y0, x0] + fx * (plane[y0, x1] - plane[y0, x0])
    bot = plane[y1, x0] + fx * (plane[y1, x1] - plane[y1, x0])
    return float(top + fy * (bot - top))


def _generate(spec: SceneSpec, effective_seed: int, stated_seed: int) -> SceneData:
    rng = np.random.default_rng(effective_seed)
    topo = default_topology()
    persons = [_PersonPath(rng, spec, slot) for slot in range(spec.persons)]
    depth_plane = _depth_plane(rng, spec.height, spec.width)
    dt = 1.0 / spec.fps

    all_points = []  # [frame][person] -> (K,2)
    for i in range(spec.frames):
        t = i * dt
        all_points.append([p.joints(t) for p in persons])

    frames = []
    heatmaps = []
    pafs = []
    depth_maps = []
    ground_truth = []
    for i, points in enumerate(all_points):
        pixels = _render_frame(points, spec, topo)
        frames.append(
            SensorFrame(
                seq=i,
                timestamp_us=i * spec.frame_interval_us,
                width=spec.width,
                height=spec.height,
                channels=1,
                pixels=pixels.tobytes(),
            )
        )
        heatmaps.append(
            Tensor.from_array(
                render_heatmaps(
                    points, spec.height, spec.width, spec.heatmap_sigma,
                    topo.n_keypoints,
                )
            )
        )
        pafs.append(
            Tensor.from_array(
                render_pafs(points, spec.height, spec.width, spec.paf_width, topo)
            )
        )
        depth_maps.append(Tensor.from_array(depth_plane[None]))
        gt_frame = []
        for pts in points:
            gt = np.zeros((topo.n_keypoints, 3))
            gt[:, :2] = pts
            for kp in range(topo.n_keypoints):
                gt[kp, 2] = _sample_plane(depth_plane, pts[kp, 0], pts[kp, 1])
            gt_frame.append(gt)
        ground_truth.append(gt_frame)

    # IMU tied to the tracked (first) person's root joint.
    roots = np.array([pts[0][KP_HIP] for pts in all_points])
    tilts = np.array([persons[0].tilt(i * dt) for i in range(spec.frames)])
    imu = []
    for i in range(spec.frames):
        if spec.frames >= 3:
            j = min(max(i, 1), spec.frames - 2)
            accel_xy = (roots[j + 1] - 2 * roots[j] + roots[j - 1]) / dt**2
            gyro_z = (tilts[j + 1] - tilts[j - 1]) / (2 * dt)
        else:
            accel_xy = np.zeros(2)
            gyro_z = 0.0
        imu.append(
            ImuSample(
                seq=i,
                timestamp_us=i * spec.frame_interval_us,
                accel=(
                    float(np.float32(accel_xy[0])),
                    float(np.float32(accel_xy[1])),
                    0.0,
                ),
                gyro=(0.0, 0.0, float(np.float32(gyro_z))),
            )
        )

    return SceneData(
        seed=stated_seed,
        fps=spec.fps,
        topology=topo,
        frames=frames,
        imu=imu,
        ground_truth=ground_truth,
        depth_maps=depth_maps,
        heatmaps=heatmaps,
        pafs=pafs,
        heatmap_sigma=spec.heatmap_sigma,
    )


def _well_separated(scene: SceneData, margin: float) -> bool:
    for gt_frame in scene.ground_truth:
        boxes = []
        for gt in gt_frame:
            xs, ys = gt[:, 0], gt[:, 1]
            boxes.append(
                (
                    xs.min() - margin / 2, ys.min() - margin / 2,
                    xs.max() + margin / 2, ys.max() + margin / 2,
                )
            )
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                ax0, ay0, ax1, ay1 = boxes[i]
                bx0, by0, bx1, by1 = boxes[j]
                if ax0 <= bx1 and bx0 <= ax1 and ay0 <= by1 and by0 <= ay1:
                    return False
    return True


def simulate_scene(spec: SceneSpec, seed: int) -> SceneData:
    """Generate a deterministic scene; regenerates with a derived seed when
    persons violate the separation margin, with bounded retries."""
    effective = seed
    for _ in range(spec.max_retries + 1):
        scene = _generate(spec, effective, seed)
        if spec.margin <= 0 or spec.persons == 1 or _well_separated(scene, spec.margin):
            return scene
        effective = derive_seed(effective)
    raise RuntimeError(
        f"could not place {spec.persons} persons with margin {spec.margin} "
        f"after {spec.max_retries} retries (seed {seed})"
    )


# --- scene files -------------------------------------------------------------

def _stack_over_time(tensors: list[Tensor]) -> Tensor:
    # (C,H,W) per frame -> one (C,T,H,W) fixture tensor.
    arr = np.stack([t.array for t in tensors], axis=1)
    return Tensor.from_array(arr)


def _unstack_over_time(t: Tensor) -> list[Tensor]:
    return [Tensor.from_array(t.array[:, i]) for i in range(t.shape[1])]


def write_scene(scene: SceneData, outdir) -> Path:
    """Write scene fixture files and the manifest; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "frames.bin", "wb") as fh:
        for frame in scene.frames:
            fh.write(encode_message(MSG_CAMERA, encode_frame(frame)))
        fh.write(encode_message(MSG_END_OF_STREAM, b""))
    with open(outdir / "imu.bin", "wb") as fh:
        for sample in scene.imu:
            fh.write(encode_message(MSG_IMU, encode_imu(sample)))
        fh.write(encode_message(MSG_END_OF_STREAM, b""))

    gt_doc = {
        "keypoint_names": list(scene.topology.keypoint_names),
        "limbs": [list(limb) for limb in scene.topology.limbs],
        "heatmap_sigma": scene.heatmap_sigma,
        "frames": [
            {
                "frame": i,
                "persons": [
                    {
                        "id": p,
                        "joints": {
                            name: [float(v) for v in gt[kp]]
                            for kp, name in enumerate(scene.topology.keypoint_names)
                        },
                    }
                    for p, gt in enumerate(gt_frame)
                ],
            }
            for i, gt_frame in enumerate(scene.ground_truth)
        ],
    }
    (outdir / "ground_truth.json").write_text(
        json.dumps(gt_doc, sort_keys=True), encoding="utf-8"
    )
    files = {
        "frames": "frames.bin",
        "imu": "imu.bin",
        "ground_truth": "ground_truth.json",
    }
    # Tensor fixtures cannot hold a zero-length time axis; an empty scene
    # simply omits them.
    if scene.depth_maps:
        save_tensor_text(_stack_over_time(scene.depth_maps), outdir / "depth.txt")
        files["depth"] = "depth.txt"
    if scene.heatmaps:
        save_tensor_text(_stack_over_time(scene.heatmaps), outdir / "heatmaps.txt")
        files["heatmaps"] = "heatmaps.txt"
    if scene.pafs:
        save_tensor_text(_stack_over_time(scene.pafs), outdir / "pafs.txt")
        files["pafs"] = "pafs.txt"

    manifest = {
        "seed": scene.seed,
        "frames": len(scene.frames),
        "fps": scene.fps,
        "persons": scene.n_persons,
        "files": files,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_scene(manifest_path) -> SceneData:
    """Load a scene written by :func:`write_scene`."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    files = manifest["files"]

    frames = []
    with open(root / files["frames"], "rb") as fh:
        for msg_type, payload in iter_messages(fh):
            if msg_type != MSG_CAMERA:
                raise ValueError(f"unexpected message type {msg_type} in frame file")
            frames.append(decode_frame(payload))
    imu = []
    with open(root / files["imu"], "rb") as fh:
        for msg_type, payload in iter_messages(fh):
            if msg_type != MSG_IMU:
                raise ValueError(f"unexpected message type {msg_type} in imu file")
            imu.append(decode_imu(payload))

    gt_doc = json.loads((root / files["ground_truth"]).read_text(encoding="utf-8"))
    topo = LimbTopology(
        keypoint_names=tuple(gt_doc["keypoint_names"]),
        limbs=tuple(tuple(l) for l in gt_doc["limbs"]),
    )
    ground_truth = []
    for frame_doc in gt_doc["frames"]:
        gt_frame = []
        for person in frame_doc["persons"]:
            gt = np.zeros((topo.n_keypoints, 3))
            for kp, name in enumerate(topo.keypoint_names):
                gt[kp] = person["joints"][name]
            gt_frame.append(gt)
        ground_truth.append(gt_frame)

    depth_maps = []
    heatmaps = []
    pafs = []
    if "depth" in files:
        depth_maps = _unstack_over_time(load_tensor_text(root / files["depth"]))
    if "heatmaps" in files:
        heatmaps = _unstack_over_time(load_tensor_text(root / files["heatmaps"]))
    if "pafs" in files:
        pafs = _unstack_over_time(load_tensor_text(root / files["pafs"]))

    return SceneData(
        seed=manifest["seed"],
        fps=manifest["fps"],
        topology=topo,
        frames=frames,
        imu=imu,
        ground_truth=ground_truth,
        depth_maps=depth_maps,
        heatmaps=heatmaps,
        pafs=pafs,
        heatmap_sigma=gt_doc["heatmap_sigma"],
    )
