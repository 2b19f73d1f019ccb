"""Layers and losses with analytic backward rules.

Feature maps are ``(batch, channels, height, width)``.  Convolutions are
stride-1 cross-correlations with "same" zero padding ``d * (k - 1) / 2``, so a
``k x k`` kernel with dilation ``d`` covers ``k + (k - 1)(d - 1)`` pixels per
axis while keeping the spatial resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, add, as_tensor, forward_record, mul, note_decision

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd number, got {self.kernel_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")

    @property
    def stride(self):
        return 1

    @property
    def padding(self):
        return self.dilation * (self.kernel_size - 1) // 2

    @property
    def effective_kernel_size(self):
        k, d = self.kernel_size, self.dilation
        return k + (k - 1) * (d - 1)


def _check_feature_map(op, x):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a (batch, channels, H, W) feature map, got shape {x.shape}")


def _conv_columns(xp, k, d, h, w):
    # (N, C, k*k, H, W): one shifted view of the padded input per kernel tap
    return np.stack(
        [xp[:, :, i * d:i * d + h, j * d:j * d + w] for i in range(k) for j in range(k)],
        axis=2,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Dilated "same" convolution.

    ``y[n, o, m, q] = b[o] + sum_{c,i,j} w[o, c, i, j] * x[n, c, m + d*(i - r), q + d*(j - r)]``
    with ``r = (k - 1) / 2`` and zeros outside the image.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_feature_map("conv2d", x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (out, in, k, k), got {weight.shape}")
    out_c, in_c, k, _ = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d: even kernel size {k} is not supported")
    if in_c != x.shape[1]:
        raise ShapeError(f"conv2d: weight expects {in_c} input channels, input has {x.shape[1]}")
    if bias.shape != (out_c,):
        raise ShapeError(f"conv2d: bias must have shape ({out_c},), got {bias.shape}")
    if dilation < 1:
        raise ValueError("conv2d: dilation must be positive")

    n, _, h, w = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _conv_columns(xp, k, dilation, h, w).reshape(n, in_c * k * k, h * w)
    wmat = weight.data.reshape(out_c, in_c * k * k)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(n, out_c, h, w)

    def grad_fn(g):
        g = g.reshape(n, out_c, h * w)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g).reshape(n, in_c, k * k, h, w)
            gxp = np.zeros_like(xp)
            for t in range(k * k):
                i, j = divmod(t, k)
                gxp[:, :, i * dilation:i * dilation + h, j * dilation:j * dilation + w] += gcols[:, :, t]
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        return gx, gw, gb

    return forward_record("conv2d", (x, weight, bias), out, grad_fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_decision(mask)

    def grad_fn(g):
        return (g * mask,)

    return forward_record("relu", (x,), np.where(mask, x.data, 0.0), grad_fn)


def _route_max(windows):
    # windows: (..., window_size); first occurrence wins on ties
    arg = np.argmax(windows, axis=-1)
    note_decision(arg)
    return np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0], arg


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping ``window x window`` max pooling with stride ``window``."""
    x = as_tensor(x)
    _check_feature_map("maxpool2d", x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} is not divisible by {window}")
    oh, ow = h // window, w // window
    blocks = (x.data.reshape(n, c, oh, window, ow, window)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, oh, ow, window * window))
    out, arg = _route_max(blocks)

    def grad_fn(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
        gx = (gblocks.reshape(n, c, oh, ow, window, window)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (gx,)

    return forward_record("maxpool2d", (x,), out, grad_fn)


def adaptive_bins(size, target):
    """Half-open ranges ``[floor(i*size/target), ceil((i+1)*size/target))``."""
    return [((i * size) // target, -((-(i + 1) * size) // target)) for i in range(target)]


def adaptive_maxpool2d(x: Tensor, target) -> Tensor:
    x = as_tensor(x)
    _check_feature_map("adaptive_maxpool2d", x)
    th, tw = target
    n, c, h, w = x.shape
    if h < th or w < tw:
        raise ShapeError(
            f"adaptive_maxpool2d: input {h}x{w} is smaller than pool target {th}x{tw}; "
            "increase input size or shrink pool target"
        )
    if (h, w) == (th, tw):
        def identity_grad(g):
            return (g,)
        return forward_record("adaptive_maxpool2d", (x,), x.data.copy(), identity_grad)

    rows, cols = adaptive_bins(h, th), adaptive_bins(w, tw)
    out = np.empty((n, c, th, tw))
    # flat (row, col) index of the winning input pixel per output bin
    winners = np.empty((n, c, th, tw), dtype=np.int64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            win = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            val, arg = _route_max(win)
            out[:, :, i, j] = val
            bw = c1 - c0
            winners[:, :, i, j] = (r0 + arg // bw) * w + (c0 + arg % bw)

    def grad_fn(g):
        gx = np.zeros((n, c, h * w))
        np.add.at(gx, (np.arange(n)[:, None, None], np.arange(c)[None, :, None],
                       winners.reshape(n, c, -1)), g.reshape(n, c, -1))
        return (gx.reshape(n, c, h, w),)

    return forward_record("adaptive_maxpool2d", (x,), out, grad_fn)


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        return (g.reshape(shape),)

    return forward_record("flatten", (x,), x.data.reshape(shape[0], -1), grad_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``(batch, in_dim)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: weight {weight.shape} does not accept input of width {x.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    xd, wd = x.data, weight.data

    def grad_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return forward_record("dense", (x, weight, bias), xd @ wd.T + bias.data, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_feature_map("concat_channels", a)
    _check_feature_map("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return forward_record("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=1), grad_fn)


def _softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected (batch, classes), got {logits.shape}")
    p = _softmax_rows(logits.data)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return forward_record("softmax", (logits,), p, grad_fn)


def _check_labels(labels, batch, classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"got {labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes - 1}], got {labels.tolist()}")
    return labels


def mse_density_loss(pred: Tensor, gt) -> Tensor:
    """``1/(2N) * sum_i ||pred_i - gt_i||^2`` with N the batch size."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mse_density_loss: prediction {pred.shape} vs ground truth {gt.shape}")
    n = pred.shape[0]
    diff = pred.data - gt.data
    value = np.asarray(0.5 * np.sum(diff * diff) / n)

    def grad_fn(g):
        scaled = (g / n) * diff
        return scaled, -scaled

    return forward_record("mse_density_loss", (pred, gt), value, grad_fn)


def cross_entropy_loss(probs: Tensor, labels, reduction="sum") -> Tensor:
    """Negative log-likelihood of ``labels`` under row-stochastic ``probs``.

    Probabilities are clamped below at 1e-12 before the log.
    """
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: expected (batch, classes), got {probs.shape}")
    n, m = probs.shape
    labels = _check_labels(labels, n, m)
    picked = probs.data[np.arange(n), labels]
    clamped = np.maximum(picked, LOG_CLAMP)
    scale = _reduction_scale(reduction, n)
    value = np.asarray(-np.sum(np.log(clamped)) * scale)

    def grad_fn(g):
        gp = np.zeros_like(probs.data)
        live = picked > LOG_CLAMP
        gp[np.arange(n), labels] = np.where(live, -g * scale / clamped, 0.0)
        return (gp,)

    return forward_record("cross_entropy_loss", (probs,), value, grad_fn)


def softmax_cross_entropy(logits: Tensor, labels, reduction="sum") -> Tensor:
    """Cross-entropy of ``softmax(logits)`` evaluated through log-softmax."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (batch, classes), got {logits.shape}")
    n, m = logits.shape
    labels = _check_labels(labels, n, m)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), labels] - log_norm
    scale = _reduction_scale(reduction, n)
    value = np.asarray(-np.sum(log_p) * scale)
    p = _softmax_rows(logits.data)

    def grad_fn(g):
        gz = p.copy()
        gz[np.arange(n), labels] -= 1.0
        return (gz * (g * scale),)

    return forward_record("softmax_cross_entropy", (logits,), value, grad_fn)


def _reduction_scale(reduction, n):
    if reduction == "sum":
        return 1.0
    if reduction == "mean":
        return 1.0 / n
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def combined_loss(l1: Tensor, l2: Tensor, lam: float) -> Tensor:
    """Main loss plus ``lam`` times the auxiliary loss."""
    if not math.isfinite(lam) or lam < 0:
        raise ValueError(f"loss weight must be a finite non-negative number, got {lam}")
    return add(l1, mul(l2, float(lam)))
