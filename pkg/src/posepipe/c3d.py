"""Spatiotemporal feature branch.

Clip preprocessing, a stacked 3D conv/pool backbone, a parallel attention
branch with a spatial softmax, and outer-product fusion of the two into a
flat feature vector. Weights are loadable from a JSON manifest of tensor
fixtures or synthesized from a seeded generator; there is no training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import (
    ConvSpec,
    PoolSpec,
    Tensor,
    _resize_plane_stack,
    bilinear_pool,
    conv3d,
    conv_output_extent,
    fuse_concat,
    load_tensor_text,
    pool3d,
    save_tensor_text,
)


@dataclass(frozen=True)
class VideoClip:
    """A stack of frames with pixel semantics.

    ``frames`` is (C,T,H,W); ``pixel_range`` gives the raw value range the
    pixels live in (e.g. 0..255).
    """

    frames: Tensor
    pixel_range: tuple[float, float]
    frame_interval_us: int = 33333

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be 4-D (C,T,H,W), got {self.frames.shape}")
        lo, hi = self.pixel_range
        arr = self.frames.array
        if arr.min() < lo or arr.max() > hi:
            raise ValueError(
                f"pixel values [{arr.min()}, {arr.max()}] outside range ({lo}, {hi})"
            )
        if self.frame_interval_us <= 0:
            raise ValueError("frame_interval_us must be positive")


@dataclass(frozen=True)
class C3dConfig:
    """Backbone layout: main conv/pool stack, spatiotemporal head, attention stack."""

    layers: tuple[tuple[ConvSpec, PoolSpec], ...]
    st_head: ConvSpec
    attention_layers: tuple[tuple[ConvSpec, PoolSpec], ...]
    input_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(p) for p in self.layers))
        object.__setattr__(
            self, "attention_layers", tuple(tuple(p) for p in self.attention_layers)
        )
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not self.layers:
            raise ValueError("at least one (conv, pool) layer is required")
        if not self.attention_layers:
            raise ValueError("at least one attention layer is required")
        _check_chaining(self.layers, "layer")
        _check_chaining(self.attention_layers, "attention layer")
        if self.attention_layers[0][0].in_channels != self.layers[0][0].in_channels:
            raise ValueError(
                "attention branch input channels "
                f"{self.attention_layers[0][0].in_channels} differ from main branch "
                f"{self.layers[0][0].in_channels}"
            )
        fused_channels = sum(conv.out_channels for conv, _ in self.layers)
        if self.st_head.in_channels != fused_channels:
            raise ValueError(
                f"st_head expects {self.st_head.in_channels} channels but fused "
                f"maps provide {fused_channels}"
            )
        if any(v < 1 for v in self.input_size):
            raise ValueError(f"input_size must be positive, got {self.input_size}")

    @property
    def in_channels(self) -> int:
        return self.layers[0][0].in_channels


def _check_chaining(layers, label):
    for i in range(1, len(layers)):
        prev_out = layers[i - 1][0].out_channels
        cur_in = layers[i][0].in_channels
        if prev_out != cur_in:
            raise ValueError(
                f"{label} {i} expects {cur_in} input channels but {label} "
                f"{i - 1} produces {prev_out}"
            )


@dataclass(frozen=True)
class FeatureBundle:
    """Everything the backbone produces for one clip window."""

    per_layer_pools: tuple[Tensor, ...]
    fused: Tensor
    spatiotemporal: Tensor
    bilinear: Tensor
    output: Tensor

    def __post_init__(self):
        total = sum(t.shape[0] for t in self.per_layer_pools)
        if self.fused.shape[0] != total:
            raise ValueError(
                f"fused has {self.fused.shape[0]} channels, pooled maps "
                f"provide {total}"
            )


def preprocess_clip(clip: VideoClip, target: tuple[int, int]) -> Tensor:
    """Map pixels affinely into [0,1] and resize every frame to ``target``."""
    lo, hi = clip.pixel_range
    if hi <= lo:
        raise ValueError(f"degenerate pixel range ({lo}, {hi})")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    arr = (clip.frames.array - lo) / (hi - lo)
    c, t, h, w = arr.shape
    resized = _resize_plane_stack(arr.reshape(c * t, h, w), th, tw)
    return Tensor.from_array(resized.reshape(c, t, th, tw))


def _layer_output_shape(shape, conv: ConvSpec, pool: PoolSpec, index: int, label: str):
    """Dry-run one (conv, pool) pair on a (C,T,H,W) shape tuple."""
    c, t, h, w = shape
    if c != conv.in_channels:
        raise ValueError(
            f"{label} {index}: input has {c} channels, conv expects "
            f"{conv.in_channels}"
        )
    kt, kh, kw = conv.kernel.shape[2:]
    dims = (t, h, w)
    kdims = (kt, kh, kw)
    for ax in range(3):
        if dims[ax] + 2 * conv.padding[ax] < kdims[ax]:
            raise ValueError(
                f"{label} {index}: kernel extent {kdims[ax]} exceeds padded "
                f"input extent {dims[ax] + 2 * conv.padding[ax]} on axis {ax}"
            )
    conv_dims = tuple(
        conv_output_extent(dims[ax], kdims[ax], conv.stride[ax], conv.padding[ax])
        for ax in range(3)
    )
    for ax in range(3):
        if conv_dims[ax] < pool.window[ax]:
            raise ValueError(
                f"{label} {index}: pool window {pool.window[ax]} exceeds conv "
                f"output extent {conv_dims[ax]} on axis {ax}"
            )
    pool_dims = tuple(
        (conv_dims[ax] - pool.window[ax]) // pool.stride[ax] + 1 for ax in range(3)
    )
    return (conv.out_channels,) + pool_dims


def _validate_forward_shapes(x_shape, cfg: C3dConfig):
    shape = x_shape
    for i, (conv, pool) in enumerate(cfg.layers):
        shape = _layer_output_shape(shape, conv, pool, i, "layer")
    shape = x_shape
    for i, (conv, pool) in enumerate(cfg.attention_layers):
        shape = _layer_output_shape(shape, conv, pool, i, "attention layer")


def _run_branch(x: Tensor, layers) -> list[Tensor]:
    pooled = []
    cur = x
    for conv, pool in layers:
        cur = pool3d(conv3d(cur, conv), pool)
        pooled.append(cur)
    return pooled


def _collapse_time(t: Tensor) -> Tensor:
    return Tensor.from_array(t.array.mean(axis=1))


def _conv_on_plane(t: Tensor, spec: ConvSpec) -> Tensor:
    """Apply a 3D conv to a (C,H,W) map by lifting it to unit time extent."""
    lifted = Tensor.from_array(t.array[:, None, :, :])
    out = conv3d(lifted, spec)
    if out.shape[1] != 1:
        raise ValueError(
            f"head conv must preserve unit time extent, produced {out.shape[1]}"
        )
    return Tensor.from_array(out.array[:, 0, :, :])


def spatial_softmax(t: Tensor) -> Tensor:
    """Per-channel softmax over the spatial positions of a (C,H,W) map."""
    arr = t.array
    flat = arr.reshape(arr.shape[0], -1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    ex /= ex.sum(axis=1, keepdims=True)
    return Tensor.from_array(ex.reshape(arr.shape))


def c3d_forward(x: Tensor, cfg: C3dConfig) -> FeatureBundle:
    """Run the two-branch backbone on a preprocessed (C,T,H,W) clip.

    The main stack records each pooled map, collapses time by mean, fuses
    the maps at the deepest spatial size, and applies the spatiotemporal
    head. The attention stack is softmax-normalized per channel and fused
    with the head output through bilinear pooling; the flat bilinear
    matrix is the feature output.
    """
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (C,T,H,W), got {x.shape}")
    if x.shape[0] != cfg.in_channels:
        raise ValueError(
            f"input has {x.shape[0]} channels, config expects {cfg.in_channels}"
        )
    _validate_forward_shapes(x.shape, cfg)

    pooled = _run_branch(x, cfg.layers)
    collapsed = [_collapse_time(p) for p in pooled]
    target_h, target_w = collapsed[-1].shape[1], collapsed[-1].shape[2]
    fused = fuse_concat(collapsed, target_h, target_w)
    spatiotemporal = _conv_on_plane(fused, cfg.st_head)

    att_pooled = _run_branch(x, cfg.attention_layers)
    att = _collapse_time(att_pooled[-1])
    att = Tensor.from_array(
        _resize_plane_stack(
            att.array, spatiotemporal.shape[1], spatiotemporal.shape[2]
        )
    )
    attention = spatial_softmax(att)

    bilinear = bilinear_pool(spatiotemporal, attention)
    output = Tensor.from_array(bilinear.array.reshape(-1))
    return FeatureBundle(
        per_layer_pools=tuple(pooled),
        fused=fused,
        spatiotemporal=spatiotemporal,
        bilinear=bilinear,
        output=output,
    )


# --- weight bundle manifest ------------------------------------------------

def _conv_to_manifest(spec: ConvSpec, name: str, dirpath: Path) -> dict:
    kernel_file = f"{name}_kernel.txt"
    bias_file = f"{name}_bias.txt"
    save_tensor_text(spec.kernel, dirpath / kernel_file)
    save_tensor_text(spec.bias, dirpath / bias_file)
    return {
        "kernel": kernel_file,
        "bias": bias_file,
        "stride": list(spec.stride),
        "padding": list(spec.padding),
        "activation": spec.activation,
    }


def _conv_from_manifest(entry: dict, dirpath: Path) -> ConvSpec:
    return ConvSpec(
        kernel=load_tensor_text(dirpath / entry["kernel"]),
        bias=load_tensor_text(dirpath / entry["bias"]),
        stride=tuple(entry["stride"]),
        padding=tuple(entry["padding"]),
        activation=entry["activation"],
    )


def _pool_to_manifest(spec: PoolSpec) -> dict:
    return {
        "mode": spec.mode,
        "window": list(spec.window),
        "stride": list(spec.stride),
    }


def _pool_from_manifest(entry: dict) -> PoolSpec:
    return PoolSpec(
        mode=entry["mode"],
        window=tuple(entry["window"]),
        stride=tuple(entry["stride"]),
    )


def save_weights(cfg: C3dConfig, dirpath) -> Path:
    """Write a weight bundle directory; returns the manifest path."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    manifest = {
        "input_size": list(cfg.input_size),
        "layers": [
            {
                "conv": _conv_to_manifest(conv, f"layer{i}", dirpath),
                "pool": _pool_to_manifest(pool),
            }
            for i, (conv, pool) in enumerate(cfg.layers)
        ],
        "st_head": _conv_to_manifest(cfg.st_head, "st_head", dirpath),
        "attention_layers": [
            {
                "conv": _conv_to_manifest(conv, f"attention{i}", dirpath),
                "pool": _pool_to_manifest(pool),
            }
            for i, (conv, pool) in enumerate(cfg.attention_layers)
        ],
    }
    path = dirpath / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_weights(manifest_path) -> C3dConfig:
    """Load a weight bundle from its JSON manifest."""
    manifest_path = Path(manifest_path)
    dirpath = manifest_path.parent
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return C3dConfig(
        layers=tuple(
            (_conv_from_manifest(e["conv"], dirpath), _pool_from_manifest(e["pool"]))
            for e in manifest["layers"]
        ),
        st_head=_conv_from_manifest(manifest["st_head"], dirpath),
        attention_layers=tuple(
            (_conv_from_manifest(e["conv"], dirpath), _pool_from_manifest(e["pool"]))
            for e in manifest["attention_layers"]
        ),
        input_size=tuple(manifest["input_size"]),
    )


def random_conv(
    rng: np.random.Generator,
    out_channels: int,
    in_channels: int,
    kernel_dims: tuple[int, int, int],
    stride=(1, 1, 1),
    padding=None,
    activation="relu",
) -> ConvSpec:
    """Seeded conv spec with fan-in scaled weights and zero bias."""
    kt, kh, kw = kernel_dims
    if padding is None:
        padding = (kt // 2, kh // 2, kw // 2)
    fan_in = in_channels * kt * kh * kw
    kernel = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out_channels, in_channels, kt, kh, kw))
    return ConvSpec(
        kernel=Tensor.from_array(kernel),
        bias=Tensor.from_array(np.zeros(out_channels)),
        stride=stride,
        padding=padding,
        activation=activation,
    )


def synthesize_config(
    seed: int,
    in_channels: int = 1,
    layer_channels: tuple[int, ...] = (4, 6),
    attention_channels: tuple[int, ...] = (4,),
    st_channels: int = 8,
    input_size: tuple[int, int] = (32, 32),
) -> C3dConfig:
    """Build a small seeded backbone with no training involved."""
    rng = np.random.default_rng(seed)
    layers = []
    prev = in_channels
    for i, ch in enumerate(layer_channels):
        kt = 1 if i == 0 else 3
        conv = random_conv(rng, ch, prev, (kt, 3, 3))
        pool = PoolSpec("max", (1, 2, 2), (1, 2, 2))
        layers.append((conv, pool))
        prev = ch
    st_head = random_conv(rng, st_channels, sum(layer_channels), (1, 3, 3))
    att_layers = []
    prev = in_channels
    for ch in attention_channels:
        conv = random_conv(rng, ch, prev, (1, 3, 3))
        pool = PoolSpec("avg", (1, 4, 4), (1, 4, 4))
        att_layers.append((conv, pool))
        prev = ch
    return C3dConfig(
        layers=tuple(layers),
        st_head=st_head,
        attention_layers=tuple(att_layers),
        input_size=input_size,
    )
