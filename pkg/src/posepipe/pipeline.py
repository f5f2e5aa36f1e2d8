"""End-to-end orchestration: ingest -> features -> decode -> lift -> classify,
plus evaluation against scene ground truth and pipeline-level tuning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bayesopt import AcquisitionSpec, TuneResult, tune_loop
from .c3d import (
    C3dConfig,
    FeatureBundle,
    VideoClip,
    c3d_forward,
    load_weights,
    preprocess_clip,
    random_conv,
    synthesize_config,
)
from .config import PipelineConfig, read_field, substitute
from .decoder import (
    DecoderOutputs,
    LimbTopology,
    PoseSkeleton,
    detect_peaks,
    group_poses,
    heads_forward,
    lift_to_3d,
    skeletons_to_record,
    write_skeletons_jsonl,
)
from .metrics import (
    ClassMatches,
    MetricsReport,
    RankedDetection,
    compute_metrics,
    match_detections,
)
from .overlay import render_overlay
from .protocol import SensorFrame
from .simulate import SceneData
from .tensor import Tensor


@dataclass(frozen=True)
class ActionLabel:
    class_index: int
    class_name: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")


@dataclass(frozen=True)
class ClassifierHead:
    """Single linear layer + softmax over the flat feature output."""

    weights: Tensor  # (classes, feature_dim)
    bias: Tensor     # (classes,)
    classes: tuple[str, ...]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != len(self.classes) or (
            self.bias.shape[0] != len(self.classes)
        ):
            raise ValueError("weights/bias rows must match the class count")


def synthesize_classifier(seed: int, classes, input_dim: int) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    classes = tuple(classes)
    w = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(len(classes), input_dim))
    return ClassifierHead(
        weights=Tensor.from_array(w),
        bias=Tensor.from_array(np.zeros(len(classes))),
        classes=classes,
    )


def action_distribution(bundle: FeatureBundle, head: ClassifierHead) -> np.ndarray:
    x = bundle.output.array
    if head.weights.shape[1] != x.size:
        raise ValueError(
            f"classifier expects {head.weights.shape[1]} features, "
            f"bundle provides {x.size}"
        )
    logits = head.weights.array @ x + head.bias.array
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    return ex / ex.sum()


def classify_action(bundle: FeatureBundle, head: ClassifierHead) -> ActionLabel:
    """Argmax of the linear+softmax head; ties resolve to the lowest index."""
    probs = action_distribution(bundle, head)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise AssertionError("softmax does not sum to 1")
    idx = int(np.argmax(probs))
    return ActionLabel(
        class_index=idx,
        class_name=head.classes[idx],
        confidence=float(probs[idx]),
    )


@dataclass
class RunResult:
    skeletons: list  # (frame_index, [PoseSkeleton])
    labels: list[dict]
    records: list[dict]
    errors: list[str]


def _frames_to_clip(frames: list[SensorFrame], fps: float) -> VideoClip:
    h, w = frames[0].height, frames[0].width
    stack = np.stack(
        [
            np.frombuffer(f.pixels, dtype=np.uint8).reshape(h, w).astype(float)
            for f in frames
        ],
        axis=0,
    )
    return VideoClip(
        frames=Tensor.from_array(stack[None]),
        pixel_range=(0.0, 255.0),
        frame_interval_us=max(1, round(1_000_000 / fps)),
    )


def _build_c3d(config: PipelineConfig) -> C3dConfig:
    if config.c3d.weights is not None:
        return load_weights(config.c3d.weights)
    return synthesize_config(
        seed=config.seed + config.c3d.synthesize_seed,
        in_channels=1,
        layer_channels=config.c3d.layer_channels,
        attention_channels=config.c3d.attention_channels,
        st_channels=config.c3d.st_channels,
        input_size=config.preprocess.target_size,
    )


def _build_heads(config: PipelineConfig, fused_channels: int, topo: LimbTopology):
    k = topo.n_keypoints
    two_l = 2 * topo.n_limbs
    width = fused_channels if config.decoder.stages == 1 else (
        fused_channels + k + two_l
    )
    rng = np.random.default_rng(config.seed + 101)
    heat = random_conv(rng, k, width, (1, 1, 1), activation="sigmoid")
    paf = random_conv(rng, two_l, width, (1, 1, 1), activation="none")
    return heat, paf


def _decode_maps(
    heatmaps: Tensor,
    pafs: Tensor,
    config: PipelineConfig,
    topo: LimbTopology,
    stages: int,
) -> list[PoseSkeleton]:
    outputs = DecoderOutputs(heatmaps=heatmaps, pafs=pafs, stages=stages)
    dec = config.decoder
    candidates = [
        detect_peaks(
            Tensor.from_array(heatmaps.array[kp]), dec.threshold, dec.nms_radius, kp
        )
        for kp in range(topo.n_keypoints)
    ]
    return group_poses(candidates, outputs, topo, dec.limb_threshold, dec.samples)


def _scale_skeletons(
    skeletons: list[PoseSkeleton], from_hw, to_hw
) -> list[PoseSkeleton]:
    fh, fw = from_hw
    th, tw = to_hw
    sx = (tw - 1) / (fw - 1) if fw > 1 else 0.0
    sy = (th - 1) / (fh - 1) if fh > 1 else 0.0
    out = []
    for sk in skeletons:
        joints = tuple(
            None if j is None else (j[0] * sx, j[1] * sy, j[2], j[3])
            for j in sk.joints
        )
        out.append(
            PoseSkeleton(
                person_id=sk.person_id,
                joints=joints,
                total_score=sk.total_score,
                clamped_joints=sk.clamped_joints,
            )
        )
    return out


def run_pipeline(
    config: PipelineConfig,
    scene: SceneData,
    output_dir=None,
    overlay: bool = False,
) -> RunResult:
    """Process a scene through the full pipeline.

    Frames are consumed in clip windows. With ``decoder.source="oracle"``
    the planted per-frame heatmaps/PAFs are decoded directly; with
    ``"heads"`` the convolutional heads run on the fused features and the
    window's skeletons are emitted for each frame in it. A decode failure
    aborts its clip window, not the run.
    """
    topo = config.decoder.topology()
    use_oracle = config.decoder.source == "oracle"
    if use_oracle and scene.frames:
        if not scene.heatmaps or not scene.pafs:
            raise ValueError("oracle decoding needs scene heatmaps and pafs")
        if scene.topology.keypoint_names != topo.keypoint_names or (
            scene.topology.limbs != topo.limbs
        ):
            raise ValueError("decoder topology differs from the scene topology")

    c3d_cfg = _build_c3d(config)
    classifier: ClassifierHead | None = None
    heads = None

    frames = scene.frames
    window = config.decoder.window
    per_frame: list = []
    labels: list[dict] = []
    errors: list[str] = []

    for w_start in range(0, len(frames), window):
        chunk = frames[w_start : w_start + window]
        w_idx = w_start // window
        try:
            clip = _frames_to_clip(chunk, scene.fps)
            x = preprocess_clip(clip, config.preprocess.target_size)
            bundle = c3d_forward(x, c3d_cfg)
            if classifier is None:
                classifier = synthesize_classifier(
                    config.seed + config.classifier.synthesize_seed,
                    config.classifier.classes,
                    bundle.output.size,
                )
            label = classify_action(bundle, classifier)
            labels.append(
                {
                    "window": w_idx,
                    "frame_start": w_start,
                    "frame_end": w_start + len(chunk) - 1,
                    "class_index": label.class_index,
                    "class_name": label.class_name,
                    "confidence": label.confidence,
                }
            )
            if use_oracle:
                for offset in range(len(chunk)):
                    frame_idx = w_start + offset
                    skeletons = _decode_maps(
                        scene.heatmaps[frame_idx],
                        scene.pafs[frame_idx],
                        config,
                        topo,
                        stages=0,
                    )
                    if scene.depth_maps:
                        skeletons = lift_to_3d(
                            skeletons, scene.depth_maps[frame_idx]
                        )
                    per_frame.append((frame_idx, skeletons))
            else:
                if heads is None:
                    heads = _build_heads(config, bundle.fused.shape[0], topo)
                outputs = heads_forward(
                    bundle.fused, heads[0], heads[1], config.decoder.stages, topo
                )
                skeletons = _decode_maps(
                    outputs.heatmaps, outputs.pafs, config, topo,
                    stages=outputs.stages,
                )
                skeletons = _scale_skeletons(
                    skeletons,
                    outputs.heatmaps.shape[1:],
                    (chunk[0].height, chunk[0].width),
                )
                for offset in range(len(chunk)):
                    frame_idx = w_start + offset
                    lifted = skeletons
                    if scene.depth_maps:
                        lifted = lift_to_3d(skeletons, scene.depth_maps[frame_idx])
                    per_frame.append((frame_idx, lifted))
        except Exception as exc:  # clip-scoped failure, run continues
            errors.append(f"window {w_idx} (frames {w_start}..): {exc}")
            for offset in range(len(chunk)):
                per_frame.append((w_start + offset, []))

    records = [
        skeletons_to_record(frame_idx, skeletons, topo)
        for frame_idx, skeletons in per_frame
    ]
    result = RunResult(
        skeletons=per_frame, labels=labels, records=records, errors=errors
    )
    if output_dir is not None:
        write_run_outputs(result, scene, topo, output_dir, overlay=overlay)
    return result


def write_run_outputs(
    result: RunResult,
    scene: SceneData,
    topo: LimbTopology,
    output_dir,
    overlay: bool = False,
) -> None:
    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_skeletons_jsonl(outdir / "skeletons.jsonl", result.records)
    with open(outdir / "labels.jsonl", "w", encoding="utf-8") as fh:
        for label in result.labels:
            fh.write(json.dumps(label, sort_keys=True) + "\n")
    if overlay:
        ov_dir = outdir / "overlays"
        ov_dir.mkdir(exist_ok=True)
        for frame_idx, skeletons in result.skeletons:
            data = render_overlay(scene.frames[frame_idx], skeletons, topo)
            (ov_dir / f"frame_{frame_idx:04d}.ppm").write_bytes(data)


def _gt_skeletons(scene: SceneData, frame_idx: int) -> list[PoseSkeleton]:
    out = []
    for p, gt in enumerate(scene.ground_truth[frame_idx]):
        joints = tuple(
            (float(gt[kp, 0]), float(gt[kp, 1]), float(gt[kp, 2]), 1.0)
            for kp in range(scene.topology.n_keypoints)
        )
        out.append(PoseSkeleton(person_id=p, joints=joints, total_score=1.0))
    return out


def evaluate_run(
    config: PipelineConfig, scene: SceneData, result: RunResult
) -> MetricsReport:
    """Match per-frame predictions against scene ground truth and compute
    AP/mAP/AR at each configured threshold (single detection class)."""
    matches: dict = {}
    for threshold in config.metrics.thresholds:
        cm = ClassMatches()
        for frame_idx, skeletons in result.skeletons:
            truths = _gt_skeletons(scene, frame_idx)
            cm.gt_count += len(truths)
            ranked = match_detections(
                skeletons, truths, threshold, kappa=config.metrics.kappa
            )
            for rank_pos, mr in enumerate(ranked):
                cm.detections.append(
                    RankedDetection(
                        score=mr.score,
                        is_tp=mr.is_tp,
                        det_id=(frame_idx, rank_pos),
                    )
                )
        matches[threshold] = {"person": cm}
    return compute_metrics(matches, ["person"])


def joint_error_stats(scene: SceneData, result: RunResult,
                      threshold: float = 0.5, kappa: float = 0.1):
    """Mean pixel error over matched joints, for diagnostics and tests."""
    errors = []
    for frame_idx, skeletons in result.skeletons:
        truths = _gt_skeletons(scene, frame_idx)
        for mr in match_detections(skeletons, truths, threshold, kappa):
            if not mr.is_tp:
                continue
            pred = skeletons[mr.pred_index]
            truth = truths[mr.truth_index]
            for pj, tj in zip(pred.joints, truth.joints):
                if pj is None or tj is None:
                    continue
                errors.append(
                    float(np.hypot(pj[0] - tj[0], pj[1] - tj[1]))
                )
    return (float(np.mean(errors)) if errors else float("nan"), len(errors))


@dataclass
class TuneOutcome:
    best_config: PipelineConfig
    result: TuneResult


def tune_pipeline(
    config: PipelineConfig,
    scene: SceneData,
    budget: int | None = None,
    acq: AcquisitionSpec | None = None,
) -> TuneOutcome:
    """Tune the configured dims against the scene's overall mAP.

    The current config values are seeded into the initial design, so the
    incumbent can never fall below the default configuration's objective.
    """
    space = config.tuner.space()
    names = [d.name for d in space.dims]

    def objective(values):
        trial = substitute(config, dict(zip(names, values)))
        result = run_pipeline(trial, scene)
        report = evaluate_run(trial, scene, result)
        return report.overall_map

    current = [read_field(config, name) for name in names]
    start_unit = tuple(
        min(max(u, 0.0), 1.0) for u in space.to_unit(current)
    )
    result = tune_loop(
        space,
        objective,
        acq or config.tuner.acquisition,
        budget or config.tuner.budget,
        patience=config.tuner.patience,
        initial_points=[start_unit],
    )
    best = substitute(config, dict(zip(names, result.x_star)))
    return TuneOutcome(best_config=best, result=result)
