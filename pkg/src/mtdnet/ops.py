"""Forward and backward kernels for the differentiable operator set.

Every operator comes as a pair of pure functions on numpy arrays. Backward
functions take the upstream gradient plus whatever the forward consumed
(inputs and parameters) and return exact analytic gradients. The tape in
:mod:`mtdnet.autodiff` wires these pairs together.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import channel_bands

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected a (t, h, w) triple, got {v!r}")
    return t


def out_extent(n: int, kernel: int, stride: int, pad: int) -> int:
    """Output length along one axis: floor((n + 2p - k) / s) + 1."""
    return (n + 2 * pad - kernel) // stride + 1


def _out_shape(spatial: Sequence[int], kernel: Triple, stride: Triple, pad: Triple) -> Triple:
    dims = []
    for axis, n, k, s, p in zip("thw", spatial, kernel, stride, pad):
        if n + 2 * p < k:
            raise ShapeError(
                f"kernel extent {k} exceeds padded input {n + 2 * p} on axis {axis}")
        dims.append(out_extent(n, k, s, p))
    return tuple(dims)


def _pad(x: np.ndarray, pad: Triple) -> np.ndarray:
    if pad == (0, 0, 0):
        return x
    pt, ph, pw = pad
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _unpad(x: np.ndarray, pad: Triple) -> np.ndarray:
    pt, ph, pw = pad
    _, _, T, H, W = x.shape
    return x[:, :, pt:T - pt, ph:H - ph, pw:W - pw]


def _window(a: int, b: int, c: int, out: Triple, stride: Triple):
    """Index of the input positions touched by kernel offset (a, b, c)."""
    (To, Ho, Wo), (st, sh, sw) = out, stride
    return (slice(None), slice(None),
            slice(a, a + st * (To - 1) + 1, st),
            slice(b, b + sh * (Ho - 1) + 1, sh),
            slice(c, c + sw * (Wo - 1) + 1, sw))


# -- conv3d ------------------------------------------------------------------

@dataclass
class Conv3dParams:
    """Weights (out, in, d, h, w), bias (out,), stride and zero padding."""

    weights: np.ndarray
    bias: np.ndarray
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weights.ndim != 5:
            raise ShapeError(f"conv weights must be rank 5, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        if min(self.weights.shape) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("kernel and stride extents must be >= 1, padding >= 0")

    out_channels = property(lambda self: self.weights.shape[0])
    in_channels = property(lambda self: self.weights.shape[1])
    kernel = property(lambda self: tuple(self.weights.shape[2:]))
    kernel_d = property(lambda self: self.weights.shape[2])
    kernel_h = property(lambda self: self.weights.shape[3])
    kernel_w = property(lambda self: self.weights.shape[4])


def conv3d_output_shape(x_shape, p: Conv3dParams) -> tuple[int, ...]:
    if x_shape[1] != p.in_channels:
        raise ShapeError(f"input has {x_shape[1]} channels, kernel expects {p.in_channels}")
    return (x_shape[0], p.out_channels) + _out_shape(x_shape[2:], p.kernel, p.stride, p.padding)


def _patches(xp: np.ndarray, kernel: Triple, stride: Triple) -> np.ndarray:
    """Strided view (B, C, To, Ho, Wo, kd, kh, kw) of every receptive window."""
    st, sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, ::st, ::sh, ::sw]


def conv3d_forward(x: np.ndarray, p: Conv3dParams) -> np.ndarray:
    conv3d_output_shape(x.shape, p)
    cols = _patches(_pad(x, p.padding), p.kernel, p.stride)
    y = np.tensordot(p.weights, cols, axes=([1, 2, 3, 4], [1, 5, 6, 7]))  # (O, B, To, Ho, Wo)
    y += p.bias[:, None, None, None, None]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4))


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, p: Conv3dParams):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    expected = conv3d_output_shape(x.shape, p)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    out = expected[2:]
    xp = _pad(x, p.padding)
    grad_w = np.tensordot(grad_out, _patches(xp, p.kernel, p.stride), axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    # scatter the per-offset input gradients back (col2im), channels-first layout
    gcols = np.tensordot(p.weights, grad_out, axes=([0], [1]))  # (C, kd, kh, kw, B, To, Ho, Wo)
    grad_xp = np.zeros((xp.shape[1], xp.shape[0]) + xp.shape[2:])
    for a, b, c in np.ndindex(*p.kernel):
        grad_xp[_window(a, b, c, out, p.stride)] += gcols[:, a, b, c]
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    grad_x = _unpad(grad_xp, p.padding).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


# -- relu --------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, 0.0)


# -- average pooling -----------------------------------------------------------

def avg_pool3d(x: np.ndarray, kernel, stride=None, padding=0) -> np.ndarray:
    """Mean over each window; padded zeros count toward the divisor."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    padding = _triple(padding)
    out = _out_shape(x.shape[2:], kernel, stride, padding)
    xp = _pad(x, padding)
    y = np.zeros(x.shape[:2] + out)
    for a, b, c in np.ndindex(*kernel):
        y += xp[_window(a, b, c, out, stride)]
    return y / np.prod(kernel)


def avg_pool3d_backward(grad_out: np.ndarray, x_shape, kernel, stride=None, padding=0) -> np.ndarray:
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    padding = _triple(padding)
    out = _out_shape(x_shape[2:], kernel, stride, padding)
    if grad_out.shape != tuple(x_shape[:2]) + out:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled output")
    pt, ph, pw = padding
    T, H, W = x_shape[2:]
    grad_xp = np.zeros(tuple(x_shape[:2]) + (T + 2 * pt, H + 2 * ph, W + 2 * pw))
    g = grad_out / np.prod(kernel)
    for a, b, c in np.ndindex(*kernel):
        grad_xp[_window(a, b, c, out, stride)] += g
    return np.ascontiguousarray(_unpad(grad_xp, padding))


# -- fully connected -----------------------------------------------------------

def linear(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x`` is (batch, features); ``weights`` is (out, features)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear: features {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} for {weights.shape[0]} outputs")
    return x @ weights.T + bias


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


# -- loss ----------------------------------------------------------------------

def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss needs at least one prediction")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over the K predictions of the squared residual."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    _check_pair(pred, target)
    r = pred - target
    return float(np.dot(r.ravel(), r.ravel()) / r.size)


def mse_loss_backward(pred: np.ndarray, target: np.ndarray, grad_out: float = 1.0) -> np.ndarray:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    _check_pair(pred, target)
    return grad_out * 2.0 * (pred - target) / pred.size


# -- concatenation -------------------------------------------------------------

def concat_backward(grad_out: np.ndarray, channels: Sequence[int]) -> list[np.ndarray]:
    return [np.ascontiguousarray(grad_out[:, band]) for band in channel_bands(channels)]

