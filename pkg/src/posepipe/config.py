"""Pipeline configuration: strict JSON parsing and tuner substitution.

Top-level keys are preprocess, c3d, decoder, classifier, tuner, metrics,
and seed; unknown keys anywhere are rejected. Tuner dimensions name config
fields through dotted paths (e.g. ``decoder.threshold``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .bayesopt import AcquisitionSpec, DimSpec, HyperparamSpace
from .decoder import LimbTopology
from .simulate import DEFAULT_KEYPOINT_NAMES, DEFAULT_LIMBS


class ConfigError(ValueError):
    """Configuration file or value problem; maps to exit code 2."""


def _require_keys(doc: dict, allowed: set[str], required: set[str], where: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: tuple[int, int] = (32, 32)
    imu_window: int = 3

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(int(v) for v in self.target_size))
        if len(self.target_size) != 2 or any(v < 1 for v in self.target_size):
            raise ConfigError(f"preprocess.target_size invalid: {self.target_size}")
        if self.imu_window < 1 or self.imu_window % 2 == 0:
            raise ConfigError(
                f"preprocess.imu_window must be odd and >= 1, got {self.imu_window}"
            )


@dataclass(frozen=True)
class C3dSource:
    """Either a weight-bundle manifest path or seeded synthesis parameters."""

    weights: str | None = None
    synthesize_seed: int = 0
    layer_channels: tuple[int, ...] = (4, 6)
    attention_channels: tuple[int, ...] = (4,)
    st_channels: int = 8

    def __post_init__(self):
        object.__setattr__(
            self, "layer_channels", tuple(int(v) for v in self.layer_channels)
        )
        object.__setattr__(
            self, "attention_channels", tuple(int(v) for v in self.attention_channels)
        )
        if not self.layer_channels or not self.attention_channels:
            raise ConfigError("c3d channel lists must be non-empty")


@dataclass(frozen=True)
class DecoderConfig:
    threshold: float = 0.3
    nms_radius: int = 2
    limb_threshold: float = 0.2
    samples: int = 10
    stages: int = 1
    source: str = "oracle"  # "oracle" decodes planted maps; "heads" runs convs
    window: int = 4
    keypoint_names: tuple[str, ...] = DEFAULT_KEYPOINT_NAMES
    limbs: tuple[tuple[int, int], ...] = DEFAULT_LIMBS

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"decoder.threshold must be in [0,1], got {self.threshold}")
        if self.nms_radius < 1:
            raise ConfigError("decoder.nms_radius must be >= 1")
        if self.samples < 2:
            raise ConfigError("decoder.samples must be >= 2")
        if self.stages < 1:
            raise ConfigError("decoder.stages must be >= 1")
        if self.source not in ("oracle", "heads"):
            raise ConfigError(f"decoder.source must be oracle|heads, got {self.source}")
        if self.window < 1:
            raise ConfigError("decoder.window must be >= 1")

    def topology(self) -> LimbTopology:
        return LimbTopology(keypoint_names=self.keypoint_names, limbs=self.limbs)


@dataclass(frozen=True)
class ClassifierConfig:
    classes: tuple[str, ...] = ("run", "jump", "throw")
    synthesize_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ConfigError("classifier.classes must be non-empty")


@dataclass(frozen=True)
class TunerConfig:
    dims: tuple[DimSpec, ...] = ()
    acquisition: AcquisitionSpec = AcquisitionSpec()
    budget: int = 20
    patience: int = 10

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if self.budget < 2:
            raise ConfigError("tuner.budget must be >= 2")
        if self.patience < 1:
            raise ConfigError("tuner.patience must be >= 1")

    def space(self) -> HyperparamSpace:
        if not self.dims:
            raise ConfigError("tuner.dims is empty")
        return HyperparamSpace(dims=self.dims)


@dataclass(frozen=True)
class MetricsConfig:
    thresholds: tuple[float, ...] = (0.5, 0.75)
    kappa: float = 0.1

    def __post_init__(self):
        object.__setattr__(
            self, "thresholds", tuple(float(t) for t in self.thresholds)
        )
        if not self.thresholds or any(not 0 < t < 1 for t in self.thresholds):
            raise ConfigError(f"metrics.thresholds invalid: {self.thresholds}")
        if self.kappa <= 0:
            raise ConfigError("metrics.kappa must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    preprocess: PreprocessConfig = PreprocessConfig()
    c3d: C3dSource = C3dSource()
    decoder: DecoderConfig = DecoderConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    tuner: TunerConfig = TunerConfig()
    metrics: MetricsConfig = MetricsConfig()

    def __post_init__(self):
        for dim in self.tuner.dims:
            read_field(self, dim.name)  # must resolve


# Dotted paths the tuner may touch, with coercion applied on substitution.
TUNABLE_FIELDS = {
    "decoder.threshold": float,
    "decoder.limb_threshold": float,
    "decoder.nms_radius": lambda v: max(1, round(v)),
    "decoder.samples": lambda v: max(2, round(v)),
    "decoder.stages": lambda v: max(1, round(v)),
    "preprocess.imu_window": lambda v: max(1, round(v)) | 1,
    "metrics.kappa": float,
}


def read_field(config: PipelineConfig, path: str):
    if path not in TUNABLE_FIELDS:
        raise ConfigError(
            f"tuner dim {path!r} is not a tunable field; "
            f"choose from {sorted(TUNABLE_FIELDS)}"
        )
    section, name = path.split(".", 1)
    return getattr(getattr(config, section), name)


def substitute(config: PipelineConfig, assignments: dict[str, float]) -> PipelineConfig:
    """Return a new config with the dotted-path assignments applied."""
    by_section: dict[str, dict] = {}
    for path, value in assignments.items():
        if path not in TUNABLE_FIELDS:
            raise ConfigError(f"cannot substitute unknown field {path!r}")
        section, name = path.split(".", 1)
        by_section.setdefault(section, {})[name] = TUNABLE_FIELDS[path](value)
    updates = {}
    for section, fields in by_section.items():
        updates[section] = replace(getattr(config, section), **fields)
    return replace(config, **updates)


def _parse_preprocess(doc: dict) -> PreprocessConfig:
    _require_keys(doc, {"target_size", "imu_window"}, set(), "preprocess")
    kwargs = {}
    if "target_size" in doc:
        kwargs["target_size"] = tuple(doc["target_size"])
    if "imu_window" in doc:
        kwargs["imu_window"] = int(doc["imu_window"])
    return PreprocessConfig(**kwargs)


def _parse_c3d(doc: dict) -> C3dSource:
    _require_keys(
        doc,
        {"weights", "synthesize_seed", "layer_channels", "attention_channels",
         "st_channels"},
        set(),
        "c3d",
    )
    kwargs = dict(doc)
    if "layer_channels" in kwargs:
        kwargs["layer_channels"] = tuple(kwargs["layer_channels"])
    if "attention_channels" in kwargs:
        kwargs["attention_channels"] = tuple(kwargs["attention_channels"])
    return C3dSource(**kwargs)


def _parse_decoder(doc: dict) -> DecoderConfig:
    allowed = {
        "threshold", "nms_radius", "limb_threshold", "samples", "stages",
        "source", "window", "topology",
    }
    _require_keys(doc, allowed, set(), "decoder")
    kwargs = {k: v for k, v in doc.items() if k != "topology"}
    if "topology" in doc:
        topo_doc = doc["topology"]
        _require_keys(
            topo_doc, {"keypoint_names", "limbs"},
            {"keypoint_names", "limbs"}, "decoder.topology",
        )
        kwargs["keypoint_names"] = tuple(topo_doc["keypoint_names"])
        kwargs["limbs"] = tuple(tuple(l) for l in topo_doc["limbs"])
    return DecoderConfig(**kwargs)


def _parse_classifier(doc: dict) -> ClassifierConfig:
    _require_keys(doc, {"classes", "synthesize_seed"}, set(), "classifier")
    kwargs = dict(doc)
    if "classes" in kwargs:
        kwargs["classes"] = tuple(kwargs["classes"])
    return ClassifierConfig(**kwargs)


def _parse_tuner(doc: dict) -> TunerConfig:
    _require_keys(doc, {"dims", "acquisition", "budget", "patience"}, set(), "tuner")
    dims = []
    for entry in doc.get("dims", []):
        _require_keys(
            entry, {"name", "lower", "upper", "scale"},
            {"name", "lower", "upper"}, "tuner.dims entry",
        )
        dims.append(
            DimSpec(
                name=entry["name"],
                lower=float(entry["lower"]),
                upper=float(entry["upper"]),
                scale=entry.get("scale", "linear"),
            )
        )
    acq = AcquisitionSpec()
    if "acquisition" in doc:
        acq_doc = doc["acquisition"]
        _require_keys(
            acq_doc, {"kind", "lambda", "candidates", "seed"}, set(),
            "tuner.acquisition",
        )
        acq = AcquisitionSpec(
            kind=acq_doc.get("kind", "expected_improvement"),
            lam=float(acq_doc.get("lambda", 1.0)),
            candidate_count=int(acq_doc.get("candidates", 64)),
            seed=int(acq_doc.get("seed", 0)),
        )
    return TunerConfig(
        dims=tuple(dims),
        acquisition=acq,
        budget=int(doc.get("budget", 20)),
        patience=int(doc.get("patience", 10)),
    )


def _parse_metrics(doc: dict) -> MetricsConfig:
    _require_keys(doc, {"thresholds", "kappa"}, set(), "metrics")
    kwargs = {}
    if "thresholds" in doc:
        kwargs["thresholds"] = tuple(doc["thresholds"])
    if "kappa" in doc:
        kwargs["kappa"] = float(doc["kappa"])
    return MetricsConfig(**kwargs)


def parse_config(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"preprocess", "c3d", "decoder", "classifier", "tuner", "metrics",
               "seed"}
    _require_keys(doc, allowed, set(), "config")
    try:
        return PipelineConfig(
            seed=int(doc.get("seed", 0)),
            preprocess=_parse_preprocess(doc.get("preprocess", {})),
            c3d=_parse_c3d(doc.get("c3d", {})),
            decoder=_parse_decoder(doc.get("decoder", {})),
            classifier=_parse_classifier(doc.get("classifier", {})),
            tuner=_parse_tuner(doc.get("tuner", {})),
            metrics=_parse_metrics(doc.get("metrics", {})),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc)


def config_to_dict(config: PipelineConfig) -> dict:
    return {
        "seed": config.seed,
        "preprocess": {
            "target_size": list(config.preprocess.target_size),
            "imu_window": config.preprocess.imu_window,
        },
        "c3d": {
            "weights": config.c3d.weights,
            "synthesize_seed": config.c3d.synthesize_seed,
            "layer_channels": list(config.c3d.layer_channels),
            "attention_channels": list(config.c3d.attention_channels),
            "st_channels": config.c3d.st_channels,
        },
        "decoder": {
            "threshold": config.decoder.threshold,
            "nms_radius": config.decoder.nms_radius,
            "limb_threshold": config.decoder.limb_threshold,
            "samples": config.decoder.samples,
            "stages": config.decoder.stages,
            "source": config.decoder.source,
            "window": config.decoder.window,
            "topology": {
                "keypoint_names": list(config.decoder.keypoint_names),
                "limbs": [list(l) for l in config.decoder.limbs],
            },
        },
        "classifier": {
            "classes": list(config.classifier.classes),
            "synthesize_seed": config.classifier.synthesize_seed,
        },
        "tuner": {
            "dims": [
                {"name": d.name, "lower": d.lower, "upper": d.upper, "scale": d.scale}
                for d in config.tuner.dims
            ],
            "acquisition": {
                "kind": config.tuner.acquisition.kind,
                "lambda": config.tuner.acquisition.lam,
                "candidates": config.tuner.acquisition.candidate_count,
                "seed": config.tuner.acquisition.seed,
            },
            "budget": config.tuner.budget,
            "patience": config.tuner.patience,
        },
        "metrics": {
            "thresholds": list(config.metrics.thresholds),
            "kappa": config.metrics.kappa,
        },
    }


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True),
        encoding="utf-8",
    )


def default_config() -> PipelineConfig:
    return PipelineConfig()
