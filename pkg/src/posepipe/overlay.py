"""Skeleton overlay rendering onto camera frames as P6 pixmaps."""

from __future__ import annotations

import math

import numpy as np

from .decoder import LimbTopology, PoseSkeleton
from .protocol import SensorFrame

PALETTE = (
    (235, 80, 60),
    (70, 200, 90),
    (80, 120, 235),
    (230, 200, 60),
    (200, 80, 220),
    (60, 210, 210),
)


def _frame_rgb(frame: SensorFrame) -> np.ndarray:
    pixels = np.frombuffer(frame.pixels, dtype=np.uint8)
    if frame.channels == 1:
        gray = pixels.reshape(frame.height, frame.width)
        return np.repeat(gray[:, :, None], 3, axis=2).copy()
    if frame.channels == 3:
        return pixels.reshape(frame.height, frame.width, 3).copy()
    raise ValueError(f"unsupported channel count {frame.channels}")


def _draw_disc(rgb: np.ndarray, x: float, y: float, radius: int, color) -> None:
    h, w = rgb.shape[:2]
    x0 = max(0, int(math.floor(x - radius)))
    x1 = min(w - 1, int(math.ceil(x + radius)))
    y0 = max(0, int(math.floor(y - radius)))
    y1 = min(h - 1, int(math.ceil(y + radius)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    mask = (xs - x) ** 2 + (ys - y) ** 2 <= radius**2
    rgb[y0 : y1 + 1, x0 : x1 + 1][mask] = color


def _draw_segment(rgb: np.ndarray, a, b, thickness: float, color) -> None:
    h, w = rgb.shape[:2]
    x0 = max(0, int(math.floor(min(a[0], b[0]) - thickness)))
    x1 = min(w - 1, int(math.ceil(max(a[0], b[0]) + thickness)))
    y0 = max(0, int(math.floor(min(a[1], b[1]) - thickness)))
    y1 = min(h - 1, int(math.ceil(max(a[1], b[1]) + thickness)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0:
        return
    t = np.clip(((xs - a[0]) * dx + (ys - a[1]) * dy) / seg_sq, 0.0, 1.0)
    d_sq = (xs - (a[0] + t * dx)) ** 2 + (ys - (a[1] + t * dy)) ** 2
    mask = d_sq <= thickness**2
    rgb[y0 : y1 + 1, x0 : x1 + 1][mask] = color


def render_overlay(
    frame: SensorFrame,
    skeletons: list[PoseSkeleton],
    topology: LimbTopology,
    joint_radius: int = 2,
    limb_thickness: float = 1.0,
) -> bytes:
    """P6 pixmap of the frame with per-person colored joints and limbs.

    Pixels not covered by a drawing primitive pass through untouched;
    out-of-frame geometry is clipped silently.
    """
    rgb = _frame_rgb(frame)
    for sk in skeletons:
        color = PALETTE[sk.person_id % len(PALETTE)]
        for s_kp, d_kp in topology.limbs:
            a = sk.joints[s_kp]
            b = sk.joints[d_kp]
            if a is None or b is None:
                continue
            _draw_segment(rgb, a[:2], b[:2], limb_thickness, color)
        for joint in sk.joints:
            if joint is None:
                continue
            _draw_disc(rgb, joint[0], joint[1], joint_radius, color)
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + rgb.astype(np.uint8).tobytes()
