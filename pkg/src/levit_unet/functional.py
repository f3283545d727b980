"""
Differentiable building blocks: convolution, batch norm, linear maps,
activations, softmax and bilinear resizing.

Every op that contributes multiply-accumulates reports them to the active
MAC recorder (see `record_macs`), which is how the profiler counts FLOPs
without a separate analytic formula per layer.
"""

import logging
import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, _accumulate

logger = logging.getLogger(__name__)

_recorder_state = threading.local()


# ----------------------------------------------------------------------
# MAC recording
# ----------------------------------------------------------------------
class MacRecorder:
    """Collects (layer name, MACs per image) pairs during a forward pass."""

    def __init__(self) -> None:
        self.entries: List[Tuple[str, int]] = []

    def add(self, name: str, macs: int) -> None:
        self.entries.append((name, int(macs)))

    @property
    def total(self) -> int:
        return sum(m for _, m in self.entries)

    def by_layer(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for name, macs in self.entries:
            out[name] = out.get(name, 0) + macs
        return out


@contextmanager
def recording_macs() -> Iterator[MacRecorder]:
    """Record MACs of every op run on this thread inside the block."""
    recorder = MacRecorder()
    previous = getattr(_recorder_state, "recorder", None)
    _recorder_state.recorder = recorder
    try:
        yield recorder
    finally:
        _recorder_state.recorder = previous


def record_macs(name: str, macs: int) -> None:
    recorder = getattr(_recorder_state, "recorder", None)
    if recorder is not None:
        recorder.add(name, macs)


# ----------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------
def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        i_end = i + stride * (oh - 1) + 1
        for j in range(k):
            j_end = j + stride * (ow - 1) + 1
            cols[:, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(gcols: np.ndarray, padded_shape: Tuple[int, ...], k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = padded_shape[0], padded_shape[1]
    gx = np.zeros(padded_shape, dtype=gcols.dtype)
    gc = gcols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        i_end = i + stride * (oh - 1) + 1
        for j in range(k):
            j_end = j + stride * (ow - 1) + 1
            gx[:, :, i:i_end:stride, j:j_end:stride] += gc[:, :, i, j]
    return gx


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    name: str = "conv2d",
) -> Tensor:
    """2-D cross-correlation. x: [n, c_in, h, w], weight: [c_out, c_in, k, k]."""
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: expected a 4-D feature map, got shape {x.shape}")
    n, c_in, h, w = x.shape
    c_out, w_in, k, _ = weight.shape
    if w_in != c_in:
        raise ConfigurationError(f"{name}: input has {c_in} channels but the kernel expects {w_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigurationError(f"{name}: spatial size {h}x{w} too small for kernel {k} with padding {padding}")

    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if k == 1 and stride == 1:
        cols = xp.reshape(n, c_in, oh * ow)
    else:
        cols = _im2col(xp, k, stride, oh, ow)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, c_out, oh, ow)
    record_macs(name, oh * ow * c_out * c_in * k * k)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, c_out, oh * ow)
        if weight.requires_grad:
            gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if k == 1 and stride == 1:
                gx = gcols.reshape(xp.shape)
            else:
                gx = _col2im(gcols, xp.shape, k, stride, oh, ow)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


# ----------------------------------------------------------------------
# Batch normalization
# ----------------------------------------------------------------------
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channel_axis: int = 1,
) -> Tuple[Tensor, Optional[np.ndarray], Optional[np.ndarray]]:
    """Normalize per channel.

    Training mode uses batch statistics (biased variance) and returns the
    updated running statistics (unbiased variance); eval mode uses the
    running statistics and returns (out, None, None).
    """
    ndim = x.ndim
    axis = channel_axis % ndim
    channels = x.shape[axis]
    if gamma.shape != (channels,):
        raise ConfigurationError(f"batch_norm: input has {channels} channels but gamma has shape {gamma.shape}")
    reduce_axes = tuple(a for a in range(ndim) if a != axis)
    bshape = [1] * ndim
    bshape[axis] = channels
    g_b = gamma.data.reshape(bshape)
    b_b = beta.data.reshape(bshape)
    count = int(np.prod([x.shape[a] for a in reduce_axes]))

    if training:
        if count == 0:
            raise ConfigurationError("batch_norm: training mode needs at least one sample per channel")
        mean = x.data.mean(axis=reduce_axes)
        var = x.data.var(axis=reduce_axes)
    else:
        mean = running_mean
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(bshape).astype(x.dtype, copy=False)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype, copy=False)) * inv_std
    out = xhat * g_b + b_b

    new_mean = new_var = None
    if training:
        unbiased = var * (count / (count - 1)) if count > 1 else var
        new_mean = ((1.0 - momentum) * running_mean + momentum * mean).astype(np.float32)
        new_var = ((1.0 - momentum) * running_var + momentum * unbiased).astype(np.float32)

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=reduce_axes))
        if x.requires_grad:
            gxhat = g * g_b
            if training:
                s1 = gxhat.sum(axis=reduce_axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=reduce_axes, keepdims=True)
                gx = inv_std / count * (count * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std
            _accumulate(x, gx)

    return Tensor.from_op(out, (x, gamma, beta), backward), new_mean, new_var


# ----------------------------------------------------------------------
# Linear
# ----------------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, name: str = "linear") -> Tensor:
    """y = x Wᵀ + b over the last axis. weight: [d_out, d_in]."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ConfigurationError(f"{name}: input width {x.shape[-1]} does not match weight width {d_in}")
    lead = x.shape[:-1]
    rows = int(np.prod(lead))
    x2 = x.data.reshape(rows, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    tokens_per_image = int(np.prod(lead[1:])) if len(lead) > 1 else 1
    record_macs(name, tokens_per_image * d_in * d_out)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(rows, d_out)
        if weight.requires_grad:
            _accumulate(weight, g2.T @ x2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data).reshape(x.shape))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out.reshape(lead + (d_out,)), parents, backward)


# ----------------------------------------------------------------------
# Activations and softmax
# ----------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: _accumulate(x, g * mask))


def hardswish(x: Tensor) -> Tensor:
    """x · clip(x + 3, 0, 6) / 6."""
    xd = x.data
    out = xd * np.clip(xd + 3.0, 0.0, 6.0) / 6.0

    def backward(g: np.ndarray) -> None:
        slope = np.where(xd < -3.0, 0.0, np.where(xd > 3.0, 1.0, (2.0 * xd + 3.0) / 6.0)).astype(xd.dtype)
        _accumulate(x, g * slope)

    return Tensor.from_op(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor.from_op(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> None:
        y = np.exp(out)
        _accumulate(x, g - y * g.sum(axis=axis, keepdims=True))

    return Tensor.from_op(out, (x,), backward)


# ----------------------------------------------------------------------
# Resizing and concatenation
# ----------------------------------------------------------------------
@lru_cache(maxsize=64)
def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """[out_size, in_size] bilinear weights with half-pixel centers (align_corners=False)."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, i0), 1.0 - lam)
    np.add.at(matrix, (rows, i1), lam)
    matrix.setflags(write=False)
    return matrix


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize [n, c, h, w] to [n, c, out_h, out_w]; identity at equal size."""
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    if min(h, w, out_h, out_w) < 1:
        raise ConfigurationError(f"bilinear_resize: invalid sizes {h}x{w} -> {out_h}x{out_w}")
    rh = resize_matrix(h, out_h)
    rw = resize_matrix(w, out_w)
    out = np.matmul(np.matmul(rh, x.data.astype(np.float64)), rw.T).astype(x.dtype)

    def backward(g: np.ndarray) -> None:
        gx = np.matmul(np.matmul(rh.T, g.astype(np.float64)), rw)
        _accumulate(x, gx.astype(g.dtype))

    return Tensor.from_op(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis`; every other dimension must agree."""
    if not tensors:
        raise ConfigurationError("concat: nothing to concatenate")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ConfigurationError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g: np.ndarray) -> None:
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(int(start), int(stop))
                _accumulate(t, g[tuple(index)])

    return Tensor.from_op(out, tuple(tensors), backward)
