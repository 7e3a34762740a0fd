"""Differentiable primitives: dilated convolution, dense, batch norm, pooling.

All image tensors are channels-last, (batch, height, width, channels).
Convolution is the cross-correlation reading: no kernel flip, taps spaced by
the dilation rate.  Every op records itself on the active ComputationRecord
so a single reverse sweep yields all gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import FloatArray, Tensor, record_op


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-d convolution layer.

    The dilated kernel spans d*(k-1)+1 input pixels per axis and the output
    size is floor((in + 2*pad - (d*(k-1)+1)) / stride) + 1.
    """

    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1, got in={self.in_channels} "
                             f"out={self.out_channels}")

    @property
    def extent(self) -> int:
        """Span of the dilated kernel in input pixels: d*(k-1)+1."""
        return self.dilation * (self.kernel_size - 1) + 1

    def out_size(self, in_size: int) -> int:
        padded = in_size + 2 * self.padding
        if self.extent > padded:
            raise ValueError(f"dilated kernel extent {self.extent} exceeds padded "
                             f"input size {padded} (in={in_size}, pad={self.padding})")
        return (padded - self.extent) // self.stride + 1

    @classmethod
    def same(cls, kernel_size: int, in_channels: int, out_channels: int,
             dilation: int = 1, stride: int = 1) -> "ConvSpec":
        """Symmetric zero padding d*(k-1)/2, size-preserving at stride 1."""
        return cls(kernel_size, in_channels, out_channels, stride=stride,
                   dilation=dilation, padding=dilation * (kernel_size - 1) // 2)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_size, self.kernel_size, self.in_channels, self.out_channels)


def _conv2d_forward(x: FloatArray, w: FloatArray, b: FloatArray,
                    spec: ConvSpec) -> FloatArray:
    """Tap-loop convolution: one matmul per kernel tap over strided slices."""
    batch, h, _w, cin = x.shape
    oh, ow = spec.out_size(h), spec.out_size(x.shape[2])
    s, d, p = spec.stride, spec.dilation, spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    out = np.zeros((batch, oh, ow, spec.out_channels), dtype=x.dtype)
    flat = out.reshape(batch * oh * ow, spec.out_channels)
    for i in range(spec.kernel_size):
        rows = slice(i * d, i * d + (oh - 1) * s + 1, s)
        for j in range(spec.kernel_size):
            cols = slice(j * d, j * d + (ow - 1) * s + 1, s)
            patch = xp[:, rows, cols, :].reshape(batch * oh * ow, cin)
            flat += patch @ w[i, j]
    flat += b
    return out


def _conv2d_backward(x: FloatArray, w: FloatArray, spec: ConvSpec,
                     gout: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Gradients of the tap-loop convolution for (input, weights, bias)."""
    batch, h, wdt, cin = x.shape
    _, oh, ow, cout = gout.shape
    s, d, p = spec.stride, spec.dilation, spec.padding
    gmat = np.ascontiguousarray(gout).reshape(batch * oh * ow, cout)
    db = gout.sum(axis=(0, 1, 2))
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for i in range(spec.kernel_size):
        rows = slice(i * d, i * d + (oh - 1) * s + 1, s)
        for j in range(spec.kernel_size):
            cols = slice(j * d, j * d + (ow - 1) * s + 1, s)
            patch = xp[:, rows, cols, :].reshape(batch * oh * ow, cin)
            dw[i, j] = patch.T @ gmat
            dxp[:, rows, cols, :] += (gmat @ w[i, j].T).reshape(batch, oh, ow, cin)
    dx = np.ascontiguousarray(dxp[:, p:p + h, p:p + wdt, :]) if p else dxp
    return dx, dw, db


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Dilated 2-d convolution (cross-correlation) with zero padding."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (batch, height, width, channels) input, "
                         f"got {x.ndim}-d tensor of shape {x.shape}")
    if x.shape[3] != spec.in_channels:
        raise ValueError(f"conv2d: input has {x.shape[3]} channels, spec expects "
                         f"in_channels={spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ValueError(f"conv2d: weight shape {weights.shape} does not match "
                         f"spec shape {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match "
                         f"out_channels={spec.out_channels}")
    xd, wd = x.data, weights.data
    out = Tensor(_conv2d_forward(xd, wd, bias.data, spec), dtype=xd.dtype)

    def grad_fn(gout: FloatArray):
        return _conv2d_backward(xd, wd, spec, gout)

    record_op("conv2d", (x, weights, bias), out, grad_fn)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)
    mask = x.data > 0

    def grad_fn(gout: FloatArray):
        return (gout * mask,)

    record_op("relu", (x,), out, grad_fn)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, clamped to the open interval (0, 1).

    The clamp moves saturated values by at most one ulp so that outputs are
    strictly inside (0, 1) for every finite input.
    """
    xd = x.data
    pos = xd >= 0
    z = np.exp(np.where(pos, -xd, xd))  # exp of a non-positive number, never overflows
    sig = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype)
    one = xd.dtype.type(1)
    zero = xd.dtype.type(0)
    np.clip(sig, np.nextafter(zero, one), np.nextafter(one, zero), out=sig)
    out = Tensor(sig, dtype=xd.dtype)

    def grad_fn(gout: FloatArray):
        return (gout * sig * (1 - sig),)

    record_op("sigmoid", (x,), out, grad_fn)
    return out


class BatchNormState:
    """Exponential moving averages of per-channel moments for inference mode."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(self.channels, self.momentum, self.eps,
                             dtype=self.running_mean.dtype)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Per-channel batch normalization over the (batch, height, width) axes.

    Training mode normalizes by the batch moments and folds them into the
    running averages; inference mode normalizes by the stored averages only.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_norm expects a 4-d (batch, height, width, channels) "
                         f"tensor, got shape {x.shape}")
    c = xd.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"do not match channel count {c}")
    if state.channels != c:
        raise ValueError(f"batch_norm: state tracks {state.channels} channels, "
                         f"input has {c}")
    gd, bd = gamma.data, beta.data
    if training:
        mu = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mu) * inv
        m = state.momentum
        state.running_mean += (1 - m) * (mu.astype(state.running_mean.dtype)
                                         - state.running_mean)
        state.running_var += (1 - m) * (var.astype(state.running_var.dtype)
                                        - state.running_var)
        out = Tensor(gd * xhat + bd, dtype=xd.dtype)
        n = xd.shape[0] * xd.shape[1] * xd.shape[2]

        def grad_fn(gout: FloatArray):
            xh = (xd - mu) * inv  # recomputed to avoid holding an extra activation
            dbeta = gout.sum(axis=(0, 1, 2))
            dgamma = (gout * xh).sum(axis=(0, 1, 2))
            dxhat = gout * gd
            sum_dxhat = dxhat.sum(axis=(0, 1, 2))
            sum_dxhat_xh = (dxhat * xh).sum(axis=(0, 1, 2))
            dx = (inv / n) * (n * dxhat - sum_dxhat - xh * sum_dxhat_xh)
            return dx, dgamma, dbeta

    else:
        mu = state.running_mean.astype(xd.dtype)
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)
        xhat = (xd - mu) * inv
        out = Tensor(gd * xhat + bd, dtype=xd.dtype)

        def grad_fn(gout: FloatArray):
            xh = (xd - mu) * inv
            dbeta = gout.sum(axis=(0, 1, 2))
            dgamma = (gout * xh).sum(axis=(0, 1, 2))
            dx = gout * (gd * inv)
            return dx, dgamma, dbeta

    record_op("batch_norm", (x, gamma, beta), out, grad_fn)
    return out


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of same-shaped tensors."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.shape != shape:
            raise ValueError(f"add_n: tensor {i} has shape {t.shape}, expected {shape}")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor(acc, dtype=acc.dtype)

    def grad_fn(gout: FloatArray):
        return tuple(gout for _ in tensors)

    record_op("add_n", tuple(tensors), out, grad_fn)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (batch, h, w, c) -> (batch, c)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-d tensor, got shape {x.shape}")
    xd = x.data
    area = xd.shape[1] * xd.shape[2]
    out = Tensor(xd.mean(axis=(1, 2)), dtype=xd.dtype)

    def grad_fn(gout: FloatArray):
        g = np.broadcast_to(gout[:, None, None, :] / area, xd.shape)
        return (np.ascontiguousarray(g),)

    record_op("global_avg_pool", (x,), out, grad_fn)
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (batch, in) @ (in, out) + (out,)."""
    if x.ndim != 2:
        raise ValueError(f"dense expects a 2-d (batch, features) tensor, got {x.shape}")
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense: input features {x.shape[1]} do not match weight "
                         f"rows {weights.shape[0] if weights.ndim == 2 else weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} does not match weight "
                         f"columns {weights.shape[1]}")
    xd, wd = x.data, weights.data
    out = Tensor(xd @ wd + bias.data, dtype=xd.dtype)

    def grad_fn(gout: FloatArray):
        return gout @ wd.T, xd.T @ gout, gout.sum(axis=0)

    record_op("dense", (x, weights, bias), out, grad_fn)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along one axis; all other dimensions must agree."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    first = tensors[0]
    if not -first.ndim <= axis < first.ndim:
        raise ValueError(f"concat: axis {axis} out of range for {first.ndim}-d tensors")
    ax = axis % first.ndim
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != first.ndim:
            raise ValueError(f"concat: tensor {i} has rank {t.ndim}, expected {first.ndim}")
        for dim in range(first.ndim):
            if dim != ax and t.shape[dim] != first.shape[dim]:
                raise ValueError(f"concat: tensor {i} dimension {dim} is "
                                 f"{t.shape[dim]}, expected {first.shape[dim]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax),
                 dtype=first.dtype)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(gout: FloatArray):
        return tuple(np.ascontiguousarray(g) for g in np.split(gout, offsets, axis=ax))

    record_op("concat", tuple(tensors), out, grad_fn)
    return out
