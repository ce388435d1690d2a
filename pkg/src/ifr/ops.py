"""Dense float64 feature-map primitives and their vector-Jacobian products.

Feature maps are plain numpy arrays in channels-first layout (C, H, W).
Every operation here is pure, validates shapes and finiteness on entry,
and has an exact hand-derived adjoint so that block- and head-level
backward passes can be composed without an autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NonFiniteError(ValueError):
    """An operand (or function evaluation) contains NaN or Inf."""


def as_tensor(values) -> np.ndarray:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(values, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "input") -> np.ndarray:
    # a single sum is finite iff every entry is (inf - inf gives nan)
    if not np.isfinite(x.sum()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def _check_3d(x: np.ndarray, what: str) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"{what} must be (channels, height, width), got shape {x.shape}")
    return check_finite(x, what)


# ---------------------------------------------------------------------------
# parameter records


@dataclass
class ConvParams:
    """Convolution kernel stored as weight-norm direction/gain plus bias.

    direction: (out_channels, in_channels, kh, kw)
    gain, bias: (out_channels,)
    When weight_norm_enabled, the effective kernel of output channel c is
    gain[c] * direction[c] / ||direction[c]||_2; otherwise direction is used
    as-is and gain is inert.
    """

    direction: np.ndarray
    gain: np.ndarray
    bias: np.ndarray
    weight_norm_enabled: bool = False

    def __post_init__(self):
        self.direction = as_tensor(self.direction)
        self.gain = as_tensor(self.gain)
        self.bias = as_tensor(self.bias)
        if self.direction.ndim != 4:
            raise ShapeError(f"conv direction must be 4-d, got shape {self.direction.shape}")
        out_c = self.direction.shape[0]
        if self.gain.shape != (out_c,) or self.bias.shape != (out_c,):
            raise ShapeError("gain and bias must have one entry per output channel")
        floor_direction_norms(self.direction)

    @property
    def out_channels(self) -> int:
        return self.direction.shape[0]

    @property
    def in_channels(self) -> int:
        return self.direction.shape[1]

    def leaf_items(self, prefix: str = ""):
        """Learnable leaves; gain participates only under weight norm."""
        yield prefix + "direction", self.direction
        if self.weight_norm_enabled:
            yield prefix + "gain", self.gain
        yield prefix + "bias", self.bias


@dataclass
class ConvGrads:
    direction: np.ndarray
    gain: np.ndarray | None
    bias: np.ndarray

    def leaf_items(self, prefix: str = ""):
        yield prefix + "direction", self.direction
        if self.gain is not None:
            yield prefix + "gain", self.gain
        yield prefix + "bias", self.bias

    def iadd(self, other: "ConvGrads") -> None:
        self.direction += other.direction
        if self.gain is not None and other.gain is not None:
            self.gain += other.gain
        self.bias += other.bias


@dataclass
class GroupNormParams:
    """Per-group normalization with a per-channel affine."""

    num_groups: int
    scale: np.ndarray
    shift: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        self.scale = as_tensor(self.scale)
        self.shift = as_tensor(self.shift)
        channels = self.scale.shape[0]
        if self.shift.shape != (channels,):
            raise ShapeError("scale and shift must have matching channel counts")
        if self.num_groups < 1 or channels % self.num_groups != 0:
            raise ShapeError(
                f"{channels} channels not divisible into {self.num_groups} groups"
            )
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def leaf_items(self, prefix: str = ""):
        yield prefix + "scale", self.scale
        yield prefix + "shift", self.shift


@dataclass
class GroupNormGrads:
    scale: np.ndarray
    shift: np.ndarray

    def leaf_items(self, prefix: str = ""):
        yield prefix + "scale", self.scale
        yield prefix + "shift", self.shift

    def iadd(self, other: "GroupNormGrads") -> None:
        self.scale += other.scale
        self.shift += other.shift


def default_group_count(channels: int, cap: int = 32) -> int:
    """Largest divisor of `channels` that is <= cap."""
    for g in range(min(cap, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def floor_direction_norms(direction: np.ndarray, floor: float = _NORM_FLOOR) -> None:
    """Ensure no output channel of a direction tensor has (near-)zero norm.

    Zero-norm channels are nudged to a deterministic stencil of norm
    `floor` so the weight-norm quotient stays defined after any update.
    """
    flat = direction.reshape(direction.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    for c in np.nonzero(norms < floor)[0]:
        flat[c] = 0.0
        flat[c, 0] = floor


def effective_kernel(p: ConvParams) -> np.ndarray:
    """Kernel actually applied by conv ops (weight-norm quotient when enabled)."""
    if not p.weight_norm_enabled:
        return p.direction
    flat = p.direction.reshape(p.out_channels, -1)
    norms = np.maximum(np.linalg.norm(flat, axis=1), _NORM_FLOOR)
    return (p.direction * (p.gain / norms)[:, None, None, None])


def _kernel_vjp(p: ConvParams, d_kernel: np.ndarray) -> ConvGrads:
    """Chain a gradient w.r.t. the effective kernel onto direction/gain/bias."""
    bias_grad = np.zeros_like(p.bias)
    if not p.weight_norm_enabled:
        return ConvGrads(d_kernel.copy(), None, bias_grad)
    flat_v = p.direction.reshape(p.out_channels, -1)
    flat_d = d_kernel.reshape(p.out_channels, -1)
    norms = np.maximum(np.linalg.norm(flat_v, axis=1), _NORM_FLOOR)
    inner = np.einsum("ck,ck->c", flat_d, flat_v)
    d_gain = inner / norms
    coeff = p.gain / norms
    d_dir_flat = coeff[:, None] * flat_d - (coeff * inner / norms**2)[:, None] * flat_v
    return ConvGrads(d_dir_flat.reshape(p.direction.shape), d_gain, bias_grad)


# ---------------------------------------------------------------------------
# convolution


def _conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} with stride {stride}, padding {padding} "
            f"does not fit input {h}x{w}"
        )
    return oh, ow


def _patches(x_pad: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Strided view (C, kh, kw, oh, ow) over the padded input."""
    sc, sh, sw = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(x_pad.shape[0], kh, kw, oh, ow),
        strides=(sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )


def _conv2d_core(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Unchecked cross-correlation on a raw kernel (hot path)."""
    c, h, w = x.shape
    out_c, _, kh, kw = kernel.shape
    oh, ow = _conv_output_hw(h, w, kh, kw, stride, padding)
    if padding:
        x_pad = np.zeros((c, h + 2 * padding, w + 2 * padding))
        x_pad[:, padding : padding + h, padding : padding + w] = x
    else:
        x_pad = x
    cols = _patches(x_pad, kh, kw, stride, oh, ow).reshape(c * kh * kw, -1)
    out = (kernel.reshape(out_c, -1) @ cols).reshape(out_c, oh, ow)
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d(x: np.ndarray, p: ConvParams, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding, effective kernel, per-channel bias."""
    x = _check_3d(x, "conv2d input")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.shape[0] != p.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {p.in_channels}")
    return _conv2d_core(x, effective_kernel(p), p.bias, stride, padding)


def conv2d_vjp(
    x: np.ndarray,
    p: ConvParams,
    stride: int,
    padding: int,
    cotangent: np.ndarray,
) -> tuple[np.ndarray, ConvGrads]:
    """Adjoints of conv2d w.r.t. input and every parameter leaf."""
    x = _check_3d(x, "conv2d input")
    cotangent = _check_3d(cotangent, "conv2d cotangent")
    kernel = effective_kernel(p)
    out_c, in_c, kh, kw = kernel.shape
    c, h, w = x.shape
    if c != in_c:
        raise ShapeError(f"input has {c} channels, kernel expects {in_c}")
    oh, ow = _conv_output_hw(h, w, kh, kw, stride, padding)
    if cotangent.shape != (out_c, oh, ow):
        raise ShapeError(
            f"cotangent shape {cotangent.shape} does not match output ({out_c}, {oh}, {ow})"
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding:
        x_pad = np.zeros((c, hp, wp))
        x_pad[:, padding : padding + h, padding : padding + w] = x
    else:
        x_pad = x

    cot_flat = cotangent.reshape(out_c, -1)
    cols = _patches(x_pad, kh, kw, stride, oh, ow).reshape(c * kh * kw, -1)
    d_kernel = (cot_flat @ cols.T).reshape(kernel.shape)

    dx = conv2d_input_vjp(kernel, (c, h, w), stride, padding, cotangent)
    grads = _kernel_vjp(p, d_kernel)
    grads.bias = cotangent.sum(axis=(1, 2))
    return dx, grads


def conv2d_input_vjp(
    kernel: np.ndarray,
    in_shape: tuple[int, int, int],
    stride: int,
    padding: int,
    cotangent: np.ndarray,
) -> np.ndarray:
    """Adjoint of conv2d w.r.t. the input only (no parameter gradients)."""
    c, h, w = in_shape
    out_c, _, kh, kw = kernel.shape
    oh, ow = cotangent.shape[1:]
    if stride == 1 and kh == kw and padding <= kh - 1:
        # stride-1 input adjoint is itself a correlation with the spatially
        # flipped, channel-transposed kernel
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv2d_core(cotangent, flipped, None, 1, kh - 1 - padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    # scatter cotangent back through each kernel tap
    d_cols = (kernel.reshape(out_c, -1).T @ cotangent.reshape(out_c, -1)).reshape(
        c, kh, kw, oh, ow
    )
    dx_pad = np.zeros((c, hp, wp))
    for a in range(kh):
        for b in range(kw):
            dx_pad[:, a : a + stride * oh : stride, b : b + stride * ow : stride] += d_cols[
                :, a, b
            ]
    dx = dx_pad[:, padding : padding + h, padding : padding + w] if padding else dx_pad
    return np.ascontiguousarray(dx)


def conv1x1(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Channel-mixing convolution (kernel 1x1, stride 1, no padding)."""
    if p.direction.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 kernel must be 1x1, got {p.direction.shape[2:]}")
    return conv2d(x, p, stride=1, padding=0)


def conv1x1_vjp(x: np.ndarray, p: ConvParams, cotangent: np.ndarray):
    if p.direction.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 kernel must be 1x1, got {p.direction.shape[2:]}")
    return conv2d_vjp(x, p, 1, 0, cotangent)


def deconv2x2(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Transposed convolution, 2x2 kernel, stride 2: doubles spatial extent.

    With stride equal to the kernel size the output blocks do not overlap:
    out[o, 2i+a, 2j+b] = sum_c k[o, c, a, b] * x[c, i, j] + bias[o].
    """
    x = _check_3d(x, "deconv2x2 input")
    kernel = effective_kernel(p)
    out_c, in_c, kh, kw = kernel.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"deconv2x2 kernel must be 2x2, got {kh}x{kw}")
    c, h, w = x.shape
    if c != in_c:
        raise ShapeError(f"input has {c} channels, kernel expects {in_c}")
    out = np.einsum("ocab,chw->ohawb", kernel, x).reshape(out_c, 2 * h, 2 * w)
    out += p.bias[:, None, None]
    return np.ascontiguousarray(out)


def deconv2x2_vjp(x: np.ndarray, p: ConvParams, cotangent: np.ndarray):
    x = _check_3d(x, "deconv2x2 input")
    cotangent = _check_3d(cotangent, "deconv2x2 cotangent")
    kernel = effective_kernel(p)
    out_c, in_c, _, _ = kernel.shape
    c, h, w = x.shape
    if cotangent.shape != (out_c, 2 * h, 2 * w):
        raise ShapeError(
            f"cotangent shape {cotangent.shape} does not match output ({out_c}, {2*h}, {2*w})"
        )
    cot_blocks = cotangent.reshape(out_c, h, 2, w, 2)
    d_kernel = np.einsum("ohawb,chw->ocab", cot_blocks, x)
    dx = np.einsum("ohawb,ocab->chw", cot_blocks, kernel)
    grads = _kernel_vjp(p, d_kernel)
    grads.bias = cotangent.sum(axis=(1, 2))
    return np.ascontiguousarray(dx), grads


# ---------------------------------------------------------------------------
# normalization and pointwise ops


def _group_stats(x: np.ndarray, p: GroupNormParams):
    c, h, w = x.shape
    grouped = x.reshape(p.num_groups, -1)
    mean = grouped.mean(axis=1)
    var = grouped.var(axis=1)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = ((grouped - mean[:, None]) * inv_std[:, None]).reshape(c, h, w)
    return xhat, inv_std


def group_norm(x: np.ndarray, p: GroupNormParams) -> np.ndarray:
    """Mean-zero/unit-variance per group, then per-channel affine."""
    x = _check_3d(x, "group_norm input")
    if x.shape[0] != p.channels:
        raise ShapeError(f"input has {x.shape[0]} channels, params expect {p.channels}")
    xhat, _ = _group_stats(x, p)
    return xhat * p.scale[:, None, None] + p.shift[:, None, None]


def group_norm_input_vjp(
    xhat: np.ndarray, inv_std: np.ndarray, p: GroupNormParams, cotangent: np.ndarray
) -> np.ndarray:
    """Adjoint w.r.t. the input given the saved normalization statistics."""
    d_xhat = (cotangent * p.scale[:, None, None]).reshape(p.num_groups, -1)
    xhat_g = xhat.reshape(p.num_groups, -1)
    mean_d = d_xhat.mean(axis=1, keepdims=True)
    mean_dx = (d_xhat * xhat_g).mean(axis=1, keepdims=True)
    dx = inv_std[:, None] * (d_xhat - mean_d - xhat_g * mean_dx)
    return dx.reshape(xhat.shape)


def group_norm_vjp(
    x: np.ndarray, p: GroupNormParams, cotangent: np.ndarray
) -> tuple[np.ndarray, GroupNormGrads]:
    x = _check_3d(x, "group_norm input")
    cotangent = _check_3d(cotangent, "group_norm cotangent")
    if cotangent.shape != x.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} != input shape {x.shape}")
    xhat, inv_std = _group_stats(x, p)
    d_scale = (cotangent * xhat).sum(axis=(1, 2))
    d_shift = cotangent.sum(axis=(1, 2))
    dx = group_norm_input_vjp(xhat, inv_std, p, cotangent)
    return dx, GroupNormGrads(d_scale, d_shift)


def relu(x: np.ndarray) -> np.ndarray:
    check_finite(x, "relu input")
    return np.maximum(x, 0.0)


def relu_vjp(x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Masks the cotangent where input <= 0 (subgradient 0 at the tie)."""
    check_finite(x, "relu input")
    check_finite(cotangent, "relu cotangent")
    if cotangent.shape != x.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} != input shape {x.shape}")
    return np.where(x > 0.0, cotangent, 0.0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_finite(a, "add lhs")
    check_finite(b, "add rhs")
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b


def add_vjp(a: np.ndarray, b: np.ndarray, cotangent: np.ndarray):
    if cotangent.shape != a.shape or a.shape != b.shape:
        raise ShapeError("add cotangent/operand shapes differ")
    return cotangent.copy(), cotangent.copy()


# ---------------------------------------------------------------------------
# numerical gradient oracle


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"function evaluation non-finite at coordinate {i}")
        gflat[i] = (up - down) / (2.0 * eps)
    return grad
