"""Multi-person keypoint decoding.

Heatmap/PAF heads with refinement stages, strict-local-maximum peak
picking, limb scoring by sampled vector-field line integrals, greedy
per-limb assembly into skeletons, and depth-map 3D lifting.

Coordinate convention: x = column, y = row, origin top-left, sub-pixel
positions allowed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import maximum_filter

from .tensor import ConvSpec, Tensor, conv3d


@dataclass(frozen=True)
class LimbTopology:
    """Keypoint names plus the (src, dst) limb pairs connecting them.

    The limb graph must be a forest covering every keypoint: grouping can
    only merge candidates along limbs, so an uncovered keypoint type could
    never join a skeleton.
    """

    keypoint_names: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "keypoint_names", tuple(self.keypoint_names))
        object.__setattr__(
            self, "limbs", tuple((int(a), int(b)) for a, b in self.limbs)
        )
        k = len(self.keypoint_names)
        if len(set(self.keypoint_names)) != k:
            raise ValueError("keypoint names must be unique")
        seen = set()
        parent = list(range(k))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        covered = set()
        for a, b in self.limbs:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"limb ({a}, {b}) out of range for {k} keypoints")
            if a == b:
                raise ValueError(f"self-loop limb ({a}, {b})")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate limb {key}")
            seen.add(key)
            ra, rb = find(a), find(b)
            if ra == rb:
                raise ValueError(f"limb ({a}, {b}) closes a cycle")
            parent[ra] = rb
            covered.update((a, b))
        if covered != set(range(k)):
            missing = sorted(set(range(k)) - covered)
            raise ValueError(f"keypoints {missing} appear in no limb")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_names)

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)


@dataclass(frozen=True)
class DecoderOutputs:
    """Final-stage heatmaps (K,H,W) in [0,1] and PAFs (2L,H,W)."""

    heatmaps: Tensor
    pafs: Tensor
    stages: int

    def __post_init__(self):
        if self.heatmaps.ndim != 3 or self.pafs.ndim != 3:
            raise ValueError("heatmaps and pafs must be 3-D (C,H,W)")
        if self.pafs.shape[0] % 2 != 0:
            raise ValueError(f"paf channel count {self.pafs.shape[0]} must be even")
        if self.heatmaps.shape[1:] != self.pafs.shape[1:]:
            raise ValueError(
                f"heatmap spatial {self.heatmaps.shape[1:]} differs from paf "
                f"spatial {self.pafs.shape[1:]}"
            )
        arr = self.heatmaps.array
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("heatmap values must lie in [0, 1]")


@dataclass(frozen=True)
class KeypointCandidate:
    kp_index: int
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class PoseSkeleton:
    """One person: per-keypoint optional (x, y, z, score) plus a total score."""

    person_id: int
    joints: tuple
    total_score: float
    clamped_joints: tuple[int, ...] = field(default=())

    def __post_init__(self):
        present = sum(1 for j in self.joints if j is not None)
        if present < 2:
            raise ValueError(f"skeleton needs at least 2 joints, has {present}")
        if self.total_score < 0:
            raise ValueError("total_score must be >= 0")

    @property
    def n_joints(self) -> int:
        return sum(1 for j in self.joints if j is not None)


def heads_forward(
    fused: Tensor,
    heat_head: ConvSpec,
    paf_head: ConvSpec,
    stages: int,
    topology: LimbTopology,
) -> DecoderOutputs:
    """Apply the heatmap/PAF heads with iterative refinement.

    Refinement heads consume the channel concatenation of (fused features,
    previous heatmaps, previous PAFs); the first stage sees zero-filled
    prior maps, which is identical to applying only the fused slice of the
    kernels. Heads whose input width equals the fused channel count are
    accepted for the degenerate single-stage case. Heatmaps always pass
    through a sigmoid; PAFs are left linear.
    """
    if stages < 1:
        raise ValueError("stages must be >= 1")
    if fused.ndim != 3:
        raise ValueError(f"fused input must be 3-D (C,H,W), got {fused.shape}")
    k = topology.n_keypoints
    two_l = 2 * topology.n_limbs
    if heat_head.out_channels != k:
        raise ValueError(
            f"heat head produces {heat_head.out_channels} channels, topology "
            f"has {k} keypoints"
        )
    if paf_head.out_channels != two_l:
        raise ValueError(
            f"paf head produces {paf_head.out_channels} channels, topology "
            f"needs {two_l}"
        )
    c = fused.shape[0]
    refined_width = c + k + two_l
    if heat_head.in_channels != paf_head.in_channels:
        raise ValueError("heat and paf heads must consume the same input width")
    if heat_head.in_channels == c and stages == 1:
        refinement = False
    elif heat_head.in_channels == refined_width:
        refinement = True
    else:
        raise ValueError(
            f"head input width {heat_head.in_channels} matches neither the "
            f"fused width {c} (stages=1) nor the refinement width {refined_width}"
        )

    heat_spec = replace(heat_head, activation="sigmoid")
    paf_spec = replace(paf_head, activation="none")
    h, w = fused.shape[1], fused.shape[2]
    base = fused.array
    heat = np.zeros((k, h, w))
    paf = np.zeros((two_l, h, w))
    for _ in range(stages):
        if refinement:
            inp = np.concatenate([base, heat, paf], axis=0)
        else:
            inp = base
        heat_t = conv3d(Tensor.from_array(inp[:, None]), heat_spec)
        paf_t = conv3d(Tensor.from_array(inp[:, None]), paf_spec)
        if heat_t.shape[2:] != (h, w) or paf_t.shape[2:] != (h, w):
            raise ValueError("refinement heads must preserve the spatial size")
        heat = heat_t.array[:, 0]
        paf = paf_t.array[:, 0]
    return DecoderOutputs(
        heatmaps=Tensor.from_array(heat),
        pafs=Tensor.from_array(paf),
        stages=stages,
    )


def _heatmap_plane(heatmap: Tensor) -> np.ndarray:
    if heatmap.ndim == 3:
        if heatmap.shape[0] != 1:
            raise ValueError(f"expected a single-channel heatmap, got {heatmap.shape}")
        return heatmap.array[0]
    if heatmap.ndim == 2:
        return heatmap.array
    raise ValueError(f"heatmap must be 2-D or (1,H,W), got {heatmap.shape}")


def detect_peaks(
    heatmap: Tensor,
    threshold: float,
    nms_radius: int,
    kp_index: int = 0,
) -> list[KeypointCandidate]:
    """Strict local maxima within a Chebyshev radius, at or above threshold.

    Returns candidates sorted by descending score, ties broken by
    (row, col) ascending.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if nms_radius < 1:
        raise ValueError(f"nms_radius must be >= 1, got {nms_radius}")
    plane = _heatmap_plane(heatmap)
    size = 2 * nms_radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[nms_radius, nms_radius] = False
    neighbor_max = maximum_filter(
        plane, footprint=footprint, mode="constant", cval=-np.inf
    )
    mask = (plane > neighbor_max) & (plane >= threshold)
    rows, cols = np.nonzero(mask)
    order = sorted(
        range(len(rows)),
        key=lambda i: (-plane[rows[i], cols[i]], rows[i], cols[i]),
    )
    return [
        KeypointCandidate(
            kp_index=kp_index,
            x=float(cols[i]),
            y=float(rows[i]),
            score=float(plane[rows[i], cols[i]]),
        )
        for i in order
    ]


def bilinear_sample(plane: np.ndarray, x: float, y: float) -> tuple[float, bool]:
    """Bilinear lookup at (x, y); coordinates outside are clamped to the border."""
    h, w = plane.shape
    clamped = not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1)
    x = min(max(x, 0.0), float(w - 1))
    y = min(max(y, 0.0), float(h - 1))
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = plane[y0, x0] + fx * (plane[y0, x1] - plane[y0, x0])
    bot = plane[y1, x0] + fx * (plane[y1, x1] - plane[y1, x0])
    return float(top + fy * (bot - top)), clamped


def _paf_plane(t: Tensor) -> np.ndarray:
    if t.ndim == 2:
        return t.array
    if t.ndim == 3 and t.shape[0] == 1:
        return t.array[0]
    raise ValueError(f"PAF component must be 2-D or (1,H,W), got {t.shape}")


def score_limb(
    paf_x: Tensor,
    paf_y: Tensor,
    a: KeypointCandidate,
    b: KeypointCandidate,
    samples: int,
) -> float:
    """Mean alignment of the PAF with the a->b direction along the segment."""
    if samples < 2:
        raise ValueError(f"samples must be >= 2, got {samples}")
    dx = b.x - a.x
    dy = b.y - a.y
    norm = float(np.hypot(dx, dy))
    if norm == 0.0:
        raise ValueError("zero-length segment")
    ux, uy = dx / norm, dy / norm
    px = _paf_plane(paf_x)
    py = _paf_plane(paf_y)
    total = 0.0
    for i in range(samples):
        t = i / (samples - 1)
        sx = a.x + t * dx
        sy = a.y + t * dy
        vx, _ = bilinear_sample(px, sx, sy)
        vy, _ = bilinear_sample(py, sx, sy)
        total += vx * ux + vy * uy
    return total / samples


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def add(self, key):
        self.parent.setdefault(key, key)

    def find(self, key):
        root = key
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[key] != root:
            self.parent[key], key = root, self.parent[key]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def group_poses(
    candidates: list[list[KeypointCandidate]],
    outputs: DecoderOutputs,
    topo: LimbTopology,
    limb_threshold: float,
    samples: int,
) -> list[PoseSkeleton]:
    """Assemble per-keypoint candidates into skeletons.

    Per limb, every candidate pair is scored; pairs at or above the limb
    threshold are sorted by descending score (ties by candidate indices)
    and greedily accepted while both endpoints are free for that limb.
    Accepted limbs are merged into skeletons through shared endpoints;
    skeletons with fewer than 2 joints are dropped.
    """
    if len(candidates) != topo.n_keypoints:
        raise ValueError(
            f"candidate lists ({len(candidates)}) must match keypoint count "
            f"({topo.n_keypoints})"
        )
    pafs = outputs.pafs.array
    uf = _UnionFind()
    accepted_limb_scores: dict = {}

    for limb_idx, (src_kp, dst_kp) in enumerate(topo.limbs):
        px = Tensor.from_array(pafs[2 * limb_idx])
        py = Tensor.from_array(pafs[2 * limb_idx + 1])
        scored = []
        for i, ca in enumerate(candidates[src_kp]):
            for j, cb in enumerate(candidates[dst_kp]):
                if ca.x == cb.x and ca.y == cb.y:
                    continue
                s = score_limb(px, py, ca, cb, samples)
                if s >= limb_threshold:
                    scored.append((s, i, j))
        scored.sort(key=lambda e: (-e[0], e[1], e[2]))
        used_src: set[int] = set()
        used_dst: set[int] = set()
        for s, i, j in scored:
            if i in used_src or j in used_dst:
                continue
            used_src.add(i)
            used_dst.add(j)
            a_key = (src_kp, i)
            b_key = (dst_kp, j)
            uf.add(a_key)
            uf.add(b_key)
            uf.union(a_key, b_key)
            accepted_limb_scores[(limb_idx, i, j)] = s

    # Collect connected components into skeletons.
    members: dict = {}
    for key in uf.parent:
        members.setdefault(uf.find(key), []).append(key)
    limb_score_by_root: dict = {}
    for (limb_idx, i, j), s in accepted_limb_scores.items():
        src_kp, dst_kp = topo.limbs[limb_idx]
        root = uf.find((src_kp, i))
        limb_score_by_root[root] = limb_score_by_root.get(root, 0.0) + s

    skeletons = []
    for root in sorted(members, key=lambda r: min(members[r])):
        joints: list = [None] * topo.n_keypoints
        joint_score_sum = 0.0
        ok = True
        for kp, idx in sorted(members[root]):
            cand = candidates[kp][idx]
            if joints[kp] is not None:
                ok = False  # forest topology should make this unreachable
                break
            joints[kp] = (cand.x, cand.y, 0.0, cand.score)
            joint_score_sum += cand.score
        if not ok:
            continue
        present = sum(1 for j in joints if j is not None)
        if present < 2:
            continue
        total = joint_score_sum + limb_score_by_root.get(root, 0.0)
        skeletons.append(
            PoseSkeleton(
                person_id=len(skeletons),
                joints=tuple(joints),
                total_score=total,
            )
        )
    return skeletons


def lift_to_3d(skeletons: list[PoseSkeleton], depth_map: Tensor) -> list[PoseSkeleton]:
    """Set each joint's z to the bilinear depth sample at its (x, y).

    Joints outside the depth extent are clamped to the border and flagged
    in the skeleton's ``clamped_joints``.
    """
    plane = _heatmap_plane(depth_map)
    lifted = []
    for sk in skeletons:
        joints = []
        clamped_ids = []
        for kp, joint in enumerate(sk.joints):
            if joint is None:
                joints.append(None)
                continue
            x, y, _, score = joint
            z, clamped = bilinear_sample(plane, x, y)
            if clamped:
                clamped_ids.append(kp)
            joints.append((x, y, z, score))
        lifted.append(
            PoseSkeleton(
                person_id=sk.person_id,
                joints=tuple(joints),
                total_score=sk.total_score,
                clamped_joints=tuple(clamped_ids),
            )
        )
    return lifted


def skeletons_to_record(frame: int, skeletons, topo: LimbTopology) -> dict:
    """JSON-lines record for one frame: {frame, persons:[...]}, stable order."""
    persons = []
    for sk in skeletons:
        joints = {}
        for kp, name in enumerate(topo.keypoint_names):
            j = sk.joints[kp]
            joints[name] = None if j is None else [j[0], j[1], j[2], j[3]]
        persons.append({"id": sk.person_id, "score": sk.total_score, "joints": joints})
    return {"frame": frame, "persons": persons}


def write_skeletons_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
