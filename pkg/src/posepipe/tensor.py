"""Dense float64 tensor kernel.

Provides the 3D convolution, pooling, bilinear resize, multi-scale fusion,
and outer-product (bilinear) pooling primitives that the feature extractor
and keypoint heads are built from. Everything here is a pure function over
immutable ``Tensor`` values.

Axis order convention: 4-D tensors are (channels, time, height, width),
3-D tensors are (channels, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("relu", "sigmoid", "none")
POOL_MODES = ("max", "avg")


class Tensor:
    """Immutable dense N-d array of 64-bit reals, row-major."""

    __slots__ = ("_array",)

    def __init__(self, shape, data):
        shape = tuple(int(d) for d in shape)
        if len(shape) == 0:
            raise ValueError("tensor must have at least one dimension")
        if any(d < 1 for d in shape):
            raise ValueError(f"tensor dimensions must all be >= 1, got {shape}")
        arr = np.asarray(data, dtype=np.float64).reshape(-1)
        expected = int(np.prod(shape))
        if arr.size != expected:
            raise ValueError(
                f"data length {arr.size} does not match shape {shape} "
                f"(expected {expected})"
            )
        arr = arr.reshape(shape).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "_array", arr)

    @classmethod
    def from_array(cls, array) -> "Tensor":
        arr = np.asarray(array, dtype=np.float64)
        return cls(arr.shape, arr.reshape(-1))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the contents."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Read-only flat view in row-major order."""
        return self._array.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._array, other._array)
        )

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))


@dataclass(frozen=True)
class ConvSpec:
    """3D convolution parameters.

    ``kernel`` has shape (out_channels, in_channels, kt, kh, kw); ``bias``
    is a 1-D tensor of length out_channels.
    """

    kernel: Tensor
    bias: Tensor
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    activation: str = "none"

    def __post_init__(self):
        if self.kernel.ndim != 5:
            raise ValueError(f"kernel must be 5-D, got shape {self.kernel.shape}")
        if self.bias.ndim != 1:
            raise ValueError(f"bias must be 1-D, got shape {self.bias.shape}")
        if self.bias.shape[0] != self.kernel.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"out_channels {self.kernel.shape[0]}"
            )
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ValueError(f"stride components must be >= 1, got {self.stride}")
        if len(self.padding) != 3 or any(p < 0 for p in self.padding):
            raise ValueError(f"padding components must be >= 0, got {self.padding}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


@dataclass(frozen=True)
class PoolSpec:
    """3D pooling parameters; ``mode`` is "max" or "avg"."""

    mode: str
    window: tuple[int, int, int]
    stride: tuple[int, int, int]

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise ValueError(f"mode must be one of {POOL_MODES}, got {self.mode!r}")
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if len(self.window) != 3 or any(w < 1 for w in self.window):
            raise ValueError(f"window components must be >= 1, got {self.window}")
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ValueError(f"stride components must be >= 1, got {self.stride}")


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of one axis: floor((in + 2*pad - k) / stride) + 1."""
    return (extent + 2 * padding - kernel) // stride + 1


def _apply_activation(arr: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return arr
    if activation == "relu":
        return np.maximum(arr, 0.0)
    if activation == "sigmoid":
        out = np.empty_like(arr)
        pos = arr >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
        ex = np.exp(arr[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    raise ValueError(f"unknown activation {activation!r}")


def conv3d(input: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded strided 3D convolution over a (C,T,H,W) tensor.

    Each output element is the kernel-weighted sum over the input window
    plus the channel bias, passed through the spec's activation.
    """
    if input.ndim != 4:
        raise ValueError(f"conv3d input must be 4-D (C,T,H,W), got {input.shape}")
    x = input.array
    k = spec.kernel.array
    out_c, in_c, kt, kh, kw = k.shape
    if x.shape[0] != in_c:
        raise ValueError(
            f"input has {x.shape[0]} channels but kernel expects {in_c}"
        )
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride
    padded = (x.shape[1] + 2 * pt, x.shape[2] + 2 * ph, x.shape[3] + 2 * pw)
    if padded[0] < kt or padded[1] < kh or padded[2] < kw:
        raise ValueError(
            f"kernel {(kt, kh, kw)} larger than padded input {padded}"
        )
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw]
    out = np.einsum("cthwijk,ocijk->othw", win, k, optimize=True)
    out += spec.bias.array[:, None, None, None]
    return Tensor.from_array(_apply_activation(out, spec.activation))


def pool3d(input: Tensor, spec: PoolSpec) -> Tensor:
    """Per-channel max/avg pooling over a (C,T,H,W) tensor, no padding."""
    if input.ndim != 4:
        raise ValueError(f"pool3d input must be 4-D (C,T,H,W), got {input.shape}")
    x = input.array
    wt, wh, ww = spec.window
    if x.shape[1] < wt or x.shape[2] < wh or x.shape[3] < ww:
        raise ValueError(
            f"pool window {spec.window} larger than input extents {x.shape[1:]}"
        )
    st, sh, sw = spec.stride
    win = sliding_window_view(x, (wt, wh, ww), axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw]
    if spec.mode == "max":
        out = win.max(axis=(-3, -2, -1))
    else:
        out = win.mean(axis=(-3, -2, -1))
    return Tensor.from_array(out)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # Corner-aligned sampling: endpoints of the output grid hit the input
    # corners exactly; a single output sample maps to coordinate 0.
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def _resize_plane_stack(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (N,H,W) array to (N,out_h,out_w)."""
    h, w = x.shape[1], x.shape[2]
    ys = _axis_coords(h, out_h)
    y0 = np.floor(ys).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    wy = (ys - y0)[None, :, None]
    # Lerp form a + w*(b-a) keeps every intermediate inside [min, max].
    rows = x[:, y0, :] + wy * (x[:, y1, :] - x[:, y0, :])
    xs = _axis_coords(w, out_w)
    x0 = np.floor(xs).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    wx = (xs - x0)[None, None, :]
    return rows[:, :, x0] + wx * (rows[:, :, x1] - rows[:, :, x0])


def resize_bilinear(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Per-channel bilinear resize of a (C,H,W) tensor, corner-aligned."""
    if input.ndim != 3:
        raise ValueError(f"resize_bilinear input must be 3-D, got {input.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got ({out_h}, {out_w})")
    return Tensor.from_array(_resize_plane_stack(input.array, out_h, out_w))


def fuse_concat(maps: list[Tensor], target_h: int, target_w: int) -> Tensor:
    """Resize every map to a common spatial size and concatenate channels.

    Accepts all-3-D maps, or all-4-D maps sharing the time extent; the
    output channel count is the sum of the input channel counts.
    """
    if not maps:
        raise ValueError("fuse_concat requires at least one map")
    ndims = {m.ndim for m in maps}
    if ndims == {3}:
        parts = [_resize_plane_stack(m.array, target_h, target_w) for m in maps]
        return Tensor.from_array(np.concatenate(parts, axis=0))
    if ndims == {4}:
        times = {m.shape[1] for m in maps}
        if len(times) != 1:
            raise ValueError(f"4-D maps must share the time extent, got {times}")
        t = times.pop()
        parts = []
        for m in maps:
            c = m.shape[0]
            flat = m.array.reshape(c * t, m.shape[2], m.shape[3])
            resized = _resize_plane_stack(flat, target_h, target_w)
            parts.append(resized.reshape(c, t, target_h, target_w))
        return Tensor.from_array(np.concatenate(parts, axis=0))
    raise ValueError(f"maps must be all 3-D or all 4-D, got ndims {sorted(ndims)}")


def bilinear_pool(feature: Tensor, attention: Tensor) -> Tensor:
    """Sum of per-location outer products, then signed sqrt and L2 norm.

    output[i][j] = sum_p feature[i, p] * attention[j, p] over spatial
    positions p, post-processed by the signed square root and a global L2
    normalization (skipped when the matrix is all-zero).
    """
    if feature.ndim != 3 or attention.ndim != 3:
        raise ValueError("bilinear_pool expects 3-D (C,H,W) tensors")
    if feature.shape[1:] != attention.shape[1:]:
        raise ValueError(
            f"spatial shapes differ: {feature.shape[1:]} vs {attention.shape[1:]}"
        )
    f = feature.array.reshape(feature.shape[0], -1)
    a = attention.array.reshape(attention.shape[0], -1)
    m = f @ a.T
    m = np.sign(m) * np.sqrt(np.abs(m))
    norm = np.linalg.norm(m)
    if norm > 0.0:
        m = m / norm
    return Tensor.from_array(m)


def save_tensor_text(tensor: Tensor, path) -> None:
    """Write a tensor fixture: `shape: d0 d1 ...` then row-major values."""
    flat = tensor.data
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("shape: " + " ".join(str(d) for d in tensor.shape) + "\n")
        for off in range(0, flat.size, 8):
            chunk = flat[off : off + 8]
            fh.write(" ".join(repr(float(v)) for v in chunk) + "\n")


def load_tensor_text(path) -> Tensor:
    """Read a tensor fixture written by :func:`save_tensor_text`."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("shape:"):
            raise ValueError(f"{path}: missing 'shape:' header line")
        shape = tuple(int(tok) for tok in header[len("shape:") :].split())
        values = np.array(fh.read().split(), dtype=np.float64)
    return Tensor(shape, values)
