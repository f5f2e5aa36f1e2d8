import numpy as np
import pytest

from posepipe.config import (
    ConfigError,
    default_config,
    parse_config,
    read_field,
    substitute,
)
from posepipe.pipeline import (
    ClassifierHead,
    action_distribution,
    classify_action,
    evaluate_run,
    joint_error_stats,
    run_pipeline,
    synthesize_classifier,
    tune_pipeline,
)
from posepipe.c3d import c3d_forward, synthesize_config
from posepipe.overlay import render_overlay
from posepipe.simulate import SceneData, SceneSpec, default_topology, simulate_scene
from posepipe.tensor import Tensor
from posepipe.decoder import PoseSkeleton

from dataclasses import replace


def make_bundle(seed=0):
    rng = np.random.default_rng(seed)
    cfg = synthesize_config(seed=3, input_size=(32, 32))
    x = Tensor.from_array(rng.uniform(0, 1, size=(1, 2, 32, 32)))
    return c3d_forward(x, cfg)


def oracle_config(**decoder_overrides):
    config = default_config()
    decoder = replace(config.decoder, source="oracle", **decoder_overrides)
    return replace(config, decoder=decoder)


class TestClassifier:
    def test_zero_weights_uniform(self):
        bundle = make_bundle()
        dim = bundle.output.size
        head = ClassifierHead(
            weights=Tensor.from_array(np.zeros((4, dim))),
            bias=Tensor.from_array(np.zeros(4)),
            classes=("a", "b", "c", "d"),
        )
        label = classify_action(bundle, head)
        assert label.class_index == 0
        assert label.confidence == pytest.approx(0.25)

    def test_one_hot_confidence_grows_with_gap(self):
        bundle = make_bundle()
        dim = bundle.output.size
        confidences = []
        for gain in (0.0, 5.0, 50.0):
            w = np.zeros((2, dim))
            b = np.array([gain, 0.0])
            head = ClassifierHead(
                weights=Tensor.from_array(w),
                bias=Tensor.from_array(b),
                classes=("hot", "cold"),
            )
            label = classify_action(bundle, head)
            assert label.class_index == 0
            confidences.append(label.confidence)
        assert confidences[0] < confidences[1] < confidences[2]
        assert confidences[2] > 1.0 - 1e-9

    def test_matches_dense_oracle(self):
        bundle = make_bundle(seed=4)
        dim = bundle.output.size
        rng = np.random.default_rng(9)
        w = rng.normal(size=(3, dim))
        b = rng.normal(size=3)
        head = ClassifierHead(
            weights=Tensor.from_array(w),
            bias=Tensor.from_array(b),
            classes=("x", "y", "z"),
        )
        probs = action_distribution(bundle, head)
        logits = w @ bundle.output.array + b
        ex = np.exp(logits - logits.max())
        want = ex / ex.sum()
        np.testing.assert_allclose(probs, want, rtol=1e-12, atol=1e-15)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_dimension_mismatch_rejected(self):
        bundle = make_bundle()
        head = synthesize_classifier(0, ("a", "b"), input_dim=bundle.output.size + 1)
        with pytest.raises(ValueError, match="features"):
            classify_action(bundle, head)


class TestConfig:
    def test_defaults_roundtrip(self):
        config = default_config()
        from posepipe.config import config_to_dict

        doc = config_to_dict(config)
        back = parse_config(doc)
        assert back == config

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            parse_config({"bogus": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="decoder"):
            parse_config({"decoder": {"not_a_field": 2}})

    def test_tuner_dim_must_name_tunable_field(self):
        with pytest.raises(ConfigError, match="tunable"):
            parse_config(
                {
                    "tuner": {
                        "dims": [
                            {"name": "decoder.bogus", "lower": 0.0, "upper": 1.0}
                        ]
                    }
                }
            )

    def test_substitute_and_read(self):
        config = default_config()
        updated = substitute(
            config, {"decoder.threshold": 0.42, "decoder.nms_radius": 3.6}
        )
        assert read_field(updated, "decoder.threshold") == pytest.approx(0.42)
        assert read_field(updated, "decoder.nms_radius") == 4
        # imu window coerces to an odd integer
        updated = substitute(config, {"preprocess.imu_window": 4.2})
        assert read_field(updated, "preprocess.imu_window") % 2 == 1


class TestRunPipelineOracle:
    def test_recovers_planted_ground_truth(self):
        scene = simulate_scene(SceneSpec(persons=1, frames=6), seed=31)
        config = oracle_config()
        result = run_pipeline(config, scene)
        assert not result.errors
        assert len(result.skeletons) == 6
        for frame_idx, skeletons in result.skeletons:
            assert len(skeletons) == 1
            gt = scene.ground_truth[frame_idx][0]
            sk = skeletons[0]
            for kp in range(scene.topology.n_keypoints):
                joint = sk.joints[kp]
                assert joint is not None
                err = np.hypot(joint[0] - gt[kp, 0], joint[1] - gt[kp, 1])
                assert err <= 1.0

    def test_lifted_z_matches_depth(self):
        scene = simulate_scene(SceneSpec(persons=1, frames=2), seed=8)
        result = run_pipeline(oracle_config(), scene)
        for frame_idx, skeletons in result.skeletons:
            plane = scene.depth_maps[frame_idx].array[0]
            for sk in skeletons:
                for joint in sk.joints:
                    if joint is None:
                        continue
                    x, y = int(round(joint[0])), int(round(joint[1]))
                    assert joint[2] == pytest.approx(
                        plane[y, x], abs=0.1
                    )

    def test_empty_scene_is_vacuous_success(self):
        scene = SceneData(
            seed=0,
            fps=30.0,
            topology=default_topology(),
            frames=[],
            imu=[],
            ground_truth=[],
            depth_maps=[],
            heatmaps=[],
            pafs=[],
            heatmap_sigma=1.5,
        )
        config = oracle_config()
        result = run_pipeline(config, scene)
        assert result.skeletons == []
        assert result.labels == []
        assert result.errors == []

    def test_deterministic(self, tmp_path):
        scene = simulate_scene(SceneSpec(persons=2, frames=4, width=96), seed=12)
        config = oracle_config()
        r1 = run_pipeline(config, scene, output_dir=tmp_path / "a")
        r2 = run_pipeline(config, scene, output_dir=tmp_path / "b")
        assert r1.records == r2.records
        for name in ("skeletons.jsonl", "labels.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_evaluation_perfect_on_noiseless(self):
        scene = simulate_scene(SceneSpec(persons=2, frames=4, width=96), seed=23)
        config = oracle_config()
        result = run_pipeline(config, scene)
        report = evaluate_run(config, scene, result)
        for threshold in config.metrics.thresholds:
            assert report.mean_ap[threshold] == pytest.approx(1.0)
        mean_err, count = joint_error_stats(scene, result)
        assert count > 0
        assert mean_err <= 1.0


class TestRunPipelineHeads:
    def test_runs_and_is_deterministic(self):
        scene = simulate_scene(SceneSpec(persons=1, frames=8), seed=3)
        config = default_config()
        config = replace(
            config, decoder=replace(config.decoder, source="heads", threshold=0.05)
        )
        r1 = run_pipeline(config, scene)
        r2 = run_pipeline(config, scene)
        assert r1.records == r2.records
        assert len(r1.labels) == 2  # 8 frames / window 4
        assert not r1.errors

    def test_stage_refinement_runs(self):
        scene = simulate_scene(SceneSpec(persons=1, frames=4), seed=5)
        config = default_config()
        config = replace(
            config,
            decoder=replace(config.decoder, source="heads", stages=2, threshold=0.05),
        )
        result = run_pipeline(config, scene)
        assert not result.errors


class TestTunePipeline:
    def scene(self):
        return simulate_scene(SceneSpec(persons=1, frames=2), seed=41)

    def tuned_config(self, dims, budget=6):
        from posepipe.bayesopt import AcquisitionSpec, DimSpec
        from posepipe.config import TunerConfig

        config = oracle_config()
        tuner = TunerConfig(
            dims=tuple(DimSpec(**d) for d in dims),
            acquisition=AcquisitionSpec(seed=2, candidate_count=16),
            budget=budget,
            patience=10,
        )
        return replace(config, tuner=tuner)

    def test_tuned_at_least_default(self):
        scene = self.scene()
        config = self.tuned_config(
            [{"name": "decoder.threshold", "lower": 0.05, "upper": 0.95}], budget=6
        )
        default_result = run_pipeline(config, scene)
        default_map = evaluate_run(config, scene, default_result).overall_map
        outcome = tune_pipeline(config, scene)
        assert outcome.result.f_star >= default_map - 1e-12
        assert outcome.result.history[0].values[0] == pytest.approx(
            config.decoder.threshold
        )
        # Incumbent never falls below the initial design's own maximum.
        init_best = max(
            e.y for e in outcome.result.history
            if e.acq_value is None and not e.rejected
        )
        assert outcome.result.f_star >= init_best

    def test_budget_two_uses_initial_design_only(self):
        scene = self.scene()
        config = self.tuned_config(
            [{"name": "decoder.threshold", "lower": 0.05, "upper": 0.95}], budget=2
        )
        outcome = tune_pipeline(config, scene)
        assert len(outcome.result.history) == 2
        assert all(e.acq_value is None for e in outcome.result.history)

    def test_two_dim_deterministic(self):
        scene = self.scene()
        dims = [
            {"name": "decoder.threshold", "lower": 0.05, "upper": 0.95},
            {"name": "decoder.limb_threshold", "lower": 0.05, "upper": 0.8},
        ]
        config = self.tuned_config(dims, budget=8)
        a = tune_pipeline(config, scene)
        b = tune_pipeline(config, scene)
        assert a.result.history == b.result.history
        assert a.best_config == b.best_config


class TestOverlay:
    def test_no_skeletons_preserves_pixels(self):
        scene = simulate_scene(SceneSpec(persons=1, frames=1), seed=2)
        frame = scene.frames[0]
        data = render_overlay(frame, [], scene.topology)
        header, rest = data.split(b"\n", 1)
        assert header == b"P6"
        dims, rest = rest.split(b"\n", 1)
        assert dims.decode() == f"{frame.width} {frame.height}"
        _, rgb = rest.split(b"\n", 1)
        arr = np.frombuffer(rgb, dtype=np.uint8).reshape(frame.height, frame.width, 3)
        gray = np.frombuffer(frame.pixels, dtype=np.uint8).reshape(
            frame.height, frame.width
        )
        for c in range(3):
            assert np.array_equal(arr[:, :, c], gray)

    def test_joint_disc_drawn(self):
        frame = simulate_scene(SceneSpec(persons=1, frames=1), seed=2).frames[0]
        topo = default_topology()
        joints = [None] * 7
        joints[0] = (32.0, 32.0, 0.0, 1.0)
        joints[1] = (40.0, 40.0, 0.0, 1.0)
        sk = PoseSkeleton(person_id=0, joints=tuple(joints), total_score=2.0)
        data = render_overlay(frame, [sk], topo, joint_radius=2)
        rgb = data.split(b"\n", 3)[3]
        arr = np.frombuffer(rgb, dtype=np.uint8).reshape(frame.height, frame.width, 3)
        # center pixel takes the person-0 palette color
        assert tuple(arr[32, 32]) == (235, 80, 60)

    def test_out_of_frame_joint_clipped_silently(self):
        frame = simulate_scene(SceneSpec(persons=1, frames=1), seed=2).frames[0]
        topo = default_topology()
        joints = [None] * 7
        joints[0] = (-50.0, -50.0, 0.0, 1.0)
        joints[1] = (500.0, 500.0, 0.0, 1.0)
        sk = PoseSkeleton(person_id=0, joints=tuple(joints), total_score=2.0)
        data = render_overlay(frame, [sk], topo)
        assert len(data.split(b"\n", 3)[3]) == frame.width * frame.height * 3
