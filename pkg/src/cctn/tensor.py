"""Dense tensor operations with forward and backward passes.

Tensors are float64 numpy arrays in (channels, height, width) layout.  Every
op is a pure function: inputs are never modified in place.
"""
from dataclasses import dataclass

import numpy as np

from cctn import kernels

# Upper bound on im2col buffer size (elements); larger convolutions are
# processed in bands of output rows.
BAND_ELEMS = 1 << 23


class ShapeError(ValueError):
    """Raised when tensor extents do not agree with an operation's contract."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    pad_h: int
    pad_w: int
    stride: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "stride", "in_channels", "out_channels"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        for name in ("pad_h", "pad_w"):
            if int(getattr(self, name)) < 0:
                raise ShapeError(f"ConvSpec.{name} must be non-negative, got {getattr(self, name)}")

    def out_size(self, h, w):
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv {self.kernel_h}x{self.kernel_w} pad ({self.pad_h},{self.pad_w}) "
                f"stride {self.stride} gives empty output for input {h}x{w}"
            )
        return oh, ow

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def as_tensor(x, ndim=3):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"expected a rank-{ndim} tensor, got shape {x.shape}")
    return x


def _check_conv(x, weights, spec):
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input channels: got {x.shape[0]}, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        names = ("out_channels", "in_channels", "kernel_h", "kernel_w")
        for name, got, want in zip(names, weights.shape, spec.weight_shape):
            if got != want:
                raise ShapeError(f"weights {name}: got {got}, spec expects {want}")
        raise ShapeError(f"weights rank: got shape {weights.shape}, expected {spec.weight_shape}")


def _bands(oh, cols_per_row):
    rows = max(1, BAND_ELEMS // max(1, cols_per_row))
    return [(r, min(oh, r + rows)) for r in range(0, oh, rows)]


def conv2d_forward(x, weights, bias, spec):
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _check_conv(x, weights, spec)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias out_channels: got shape {bias.shape}, expected ({spec.out_channels},)")
    oh, ow = spec.out_size(x.shape[1], x.shape[2])
    s, kh, kw = spec.stride, spec.kernel_h, spec.kernel_w
    xp = np.pad(x, ((0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    wmat = weights.reshape(spec.out_channels, -1)
    out = np.empty((spec.out_channels, oh, ow), dtype=np.float64)
    for r0, r1 in _bands(oh, wmat.shape[1] * ow):
        sub = np.ascontiguousarray(xp[:, r0 * s:(r1 - 1) * s + kh, :])
        cols = kernels.im2col(sub, kh, kw, s)
        out[:, r0:r1, :] = (wmat @ cols).reshape(spec.out_channels, r1 - r0, ow)
    out += bias[:, None, None]
    return out


def conv2d_backward(x, weights, spec, upstream_grad):
    """Return ``(input_grad, weight_grad, bias_grad)`` for one convolution."""
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=np.float64)
    g = as_tensor(upstream_grad)
    _check_conv(x, weights, spec)
    oh, ow = spec.out_size(x.shape[1], x.shape[2])
    if g.shape != (spec.out_channels, oh, ow):
        raise ShapeError(f"upstream gradient: got shape {g.shape}, expected {(spec.out_channels, oh, ow)}")
    s, kh, kw, c = spec.stride, spec.kernel_h, spec.kernel_w, spec.in_channels
    xp = np.pad(x, ((0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    wmat = weights.reshape(spec.out_channels, -1)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(wmat)
    for r0, r1 in _bands(oh, wmat.shape[1] * ow):
        top, bottom = r0 * s, (r1 - 1) * s + kh
        sub = np.ascontiguousarray(xp[:, top:bottom, :])
        cols = kernels.im2col(sub, kh, kw, s)
        gmat = g[:, r0:r1, :].reshape(spec.out_channels, -1)
        dw += gmat @ cols.T
        dcols = np.ascontiguousarray(wmat.T @ gmat)
        dxp[:, top:bottom, :] += kernels.col2im(dcols, c, bottom - top, xp.shape[2], kh, kw, s)
    dx = dxp[:, spec.pad_h:spec.pad_h + x.shape[1], spec.pad_w:spec.pad_w + x.shape[2]]
    return np.ascontiguousarray(dx), dw.reshape(weights.shape), g.sum(axis=(1, 2))


def maxpool2(x):
    """2x2 / stride-2 max pooling; returns ``(output, argmax)``.

    Odd trailing rows/columns are dropped.  Ties go to the first element of
    the window in raster order.
    """
    x = as_tensor(x)
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"maxpool2 needs spatial extents >= 2, got {x.shape[1]}x{x.shape[2]}")
    return kernels.maxpool2_forward(x)


def maxpool2_backward(grad, argmax, in_shape, distribute=False):
    """Route ``grad`` back through a 2x2 pool.

    With ``distribute=True`` every element of each window receives the full
    gradient, i.e. no path is masked; used for receptive-field measurement.
    """
    c, h, w = in_shape
    grad = as_tensor(grad)
    if distribute:
        ho, wo = grad.shape[1:]
        dx = np.zeros(in_shape, dtype=np.float64)
        block = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2)
        dx[:, :2 * ho, :2 * wo] = block
        return dx
    return kernels.maxpool2_backward(grad, np.ascontiguousarray(argmax, dtype=np.int64), h, w)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad):
    return np.where(x > 0, grad, 0.0)


def eltwise_sum(inputs):
    """Element-wise sum, accumulated strictly in the order given."""
    if not inputs:
        raise ShapeError("eltwise_sum needs at least one input")
    shape = np.shape(inputs[0])
    for i, t in enumerate(inputs[1:], 1):
        if np.shape(t) != shape:
            raise ShapeError(f"eltwise_sum input {i}: shape {np.shape(t)} differs from {shape}")
    out = np.array(inputs[0], dtype=np.float64, copy=True)
    for t in inputs[1:]:
        out += t
    return out


def interp_matrix(n_in, n_out, scale, offset=0.0):
    """1-D bilinear interpolation weights as an (n_out, n_in) matrix.

    Output sample ``i`` reads the input at ``(i + 0.5) / scale - 0.5 - offset``
    (half-pixel convention), clamped to the valid range.
    """
    a = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) / scale - 0.5 - offset
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def resize_bilinear(x, out_h, out_w, scale_h, scale_w, offset_h=0.0, offset_w=0.0):
    x = as_tensor(x)
    ah = interp_matrix(x.shape[1], out_h, scale_h, offset_h)
    aw = interp_matrix(x.shape[2], out_w, scale_w, offset_w)
    return np.ascontiguousarray(np.matmul(np.matmul(ah, x), aw.T))


def resize_bilinear_backward(grad, in_shape, scale_h, scale_w, offset_h=0.0, offset_w=0.0):
    grad = as_tensor(grad)
    ah = interp_matrix(in_shape[1], grad.shape[1], scale_h, offset_h)
    aw = interp_matrix(in_shape[2], grad.shape[2], scale_w, offset_w)
    return np.ascontiguousarray(np.matmul(np.matmul(ah.T, grad), aw))


def upsample2x_bilinear(x):
    x = as_tensor(x)
    return resize_bilinear(x, 2 * x.shape[1], 2 * x.shape[2], 2.0, 2.0)


def upsample2x_bilinear_backward(grad, in_shape):
    return resize_bilinear_backward(grad, in_shape, 2.0, 2.0)


def crop_offsets(h, w, target_h, target_w):
    """Top/left offsets of a centred crop; odd surplus leaves the bottom/right."""
    if target_h > h or target_w > w or target_h < 1 or target_w < 1:
        raise ShapeError(f"crop target {target_h}x{target_w} does not fit input {h}x{w}")
    return (h - target_h) // 2, (w - target_w) // 2


def crop_center(x, target_h, target_w):
    x = as_tensor(x)
    top, left = crop_offsets(x.shape[1], x.shape[2], target_h, target_w)
    return np.ascontiguousarray(x[:, top:top + target_h, left:left + target_w])


def crop_center_backward(grad, in_shape):
    grad = as_tensor(grad)
    top, left = crop_offsets(in_shape[1], in_shape[2], grad.shape[1], grad.shape[2])
    dx = np.zeros(in_shape, dtype=np.float64)
    dx[:, top:top + grad.shape[1], left:left + grad.shape[2]] = grad
    return dx


def softmax2(logits):
    """Per-pixel softmax over a 2-channel map; returns both channels."""
    logits = as_tensor(logits)
    if logits.shape[0] != 2:
        raise ShapeError(f"softmax2 expects 2 channels, got {logits.shape[0]}")
    d = logits[1] - logits[0]
    p1 = _sigmoid(d)
    p0 = _sigmoid(-d)
    return np.stack([p0, p1])


def softmax2_map(logits):
    """Text-class probability map from 2-channel logits."""
    return softmax2(logits)[1]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_map(logits):
    logits = as_tensor(logits)
    if logits.shape[0] != 1:
        raise ShapeError(f"sigmoid_map expects 1 channel, got {logits.shape[0]}")
    return _sigmoid(logits[0])


def _log_sigmoid(z):
    # log(sigmoid(z)) without overflow
    return -np.logaddexp(0.0, -z)


def softmax_xent_loss(logits, target, class_weights=None):
    """Mean per-pixel softmax cross-entropy against a {0,1} target mask.

    ``class_weights=(w_background, w_text)`` rescales each pixel's term; the
    sum is still divided by the pixel count.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape[0] != 2 or target.shape != logits.shape[1:]:
        raise ShapeError(f"softmax loss: logits {logits.shape} vs target {target.shape}")
    n = target.size
    d = logits[1] - logits[0]
    # -log p(target): target 1 -> -log sigmoid(d), target 0 -> -log sigmoid(-d)
    per_pixel = -(target * _log_sigmoid(d) + (1.0 - target) * _log_sigmoid(-d))
    p1 = _sigmoid(d)
    g1 = p1 - target
    if class_weights is not None:
        wpix = np.where(target > 0.5, class_weights[1], class_weights[0])
        per_pixel = per_pixel * wpix
        g1 = g1 * wpix
    g1 = g1 / n
    grad = np.stack([-g1, g1])
    return float(per_pixel.sum() / n), grad


def bce_loss(logits, target):
    """Mean binary cross-entropy of sigmoid(logits) against soft targets in [0,1]."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape[0] != 1 or target.shape != logits.shape[1:]:
        raise ShapeError(f"bce loss: logits {logits.shape} vs target {target.shape}")
    z = logits[0]
    n = target.size
    per_pixel = -(target * _log_sigmoid(z) + (1.0 - target) * _log_sigmoid(-z))
    grad = ((_sigmoid(z) - target) / n)[None]
    return float(per_pixel.sum() / n), grad


def sgd_momentum_step(params, grads, state, lr, momentum):
    """One SGD-with-momentum update: ``v <- momentum*v - lr*g; p <- p + v``.

    All arguments are dicts keyed by parameter name; ``state`` holds the
    velocities (missing entries start at zero).  Returns new
    ``(params, state)`` dicts; the inputs are left untouched.
    """
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        v = state.get(name)
        if g is None:
            new_params[name] = p
            if v is not None:
                new_state[name] = v
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name}: shape {g.shape} vs parameter {p.shape}")
        v = -lr * g if v is None else momentum * v - lr * g
        new_state[name] = v
        new_params[name] = p + v
    return new_params, new_state
