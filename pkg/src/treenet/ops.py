"""Differentiable NCHW ops.

Every op takes and returns :class:`Tensor`.  Backward closures return one
gradient (or ``None``) per parent, in parent order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from treenet.tensor import Tensor, is_grad_enabled, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_dtype(*ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise TypeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}")


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Geometry plus weights of one 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: int = 1
    padding: int = 0
    groups: int = 1
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        self.kernel = tuple(self.kernel)
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho <= 0 or wo <= 0 or h + 2 * self.padding < kh or w + 2 * self.padding < kw:
            raise ValueError(f"non-positive output extent for input {h}x{w} and kernel {self.kernel}")
        return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return dxp


def _conv_single(x, w, stride, padding, ho, wo, need_cols):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh == kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = xs.reshape(n, c, ho * wo) if stride == 1 else np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return out, (cols if need_cols else None)


def _conv_single_backward(g, x_shape, w, cols, stride, padding, ho, wo):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    g2 = g.reshape(n, o, ho * wo)
    dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    dcols = np.matmul(w.reshape(o, -1).T, g2)
    if kh == kw == 1 and padding == 0:
        if stride == 1:
            return dcols.reshape(x_shape), dw
        dx = np.zeros(x_shape, dtype=g.dtype)
        dx[:, :, ::stride, ::stride][:, :, :ho, :wo] = dcols.reshape(n, c, ho, wo)
        return dx, dw
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = _col2im(dcols, (n, c, hp, wp), kh, kw, stride, ho, wo)
    if padding:
        dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(dxp), dw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation via patch gather + matmul."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    _check_same_dtype(x, weight, *([bias] if bias is not None else []))
    n, c, h, wd = x.shape
    o, cg, kh, kw = weight.shape
    geom = ConvParams(c, o, (kh, kw), stride, padding, groups)
    if cg != c // groups:
        raise ValueError(f"input has {c} channels but weight expects {cg * groups} (groups={groups})")
    ho, wo = geom.output_hw(h, wd)
    need = is_grad_enabled() and (x.requires_grad or weight.requires_grad)

    xd, wdat = x.data, weight.data
    if groups == 1:
        out, cols = _conv_single(xd, wdat, stride, padding, ho, wo, need)
        cols_list = [cols]
    else:
        cin, cout = c // groups, o // groups
        outs, cols_list = [], []
        for gi in range(groups):
            og, cl = _conv_single(
                xd[:, gi * cin : (gi + 1) * cin], wdat[gi * cout : (gi + 1) * cout], stride, padding, ho, wo, need
            )
            outs.append(og)
            cols_list.append(cl)
        out = np.concatenate(outs, axis=1)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        if groups == 1:
            dx, dw = _conv_single_backward(g, xd.shape, wdat, cols_list[0], stride, padding, ho, wo)
        else:
            cin, cout = c // groups, o // groups
            dxs, dws = [], []
            for gi in range(groups):
                dxg, dwg = _conv_single_backward(
                    g[:, gi * cout : (gi + 1) * cout],
                    (n, cin, h, wd),
                    wdat[gi * cout : (gi + 1) * cout],
                    cols_list[gi],
                    stride,
                    padding,
                    ho,
                    wo,
                )
                dxs.append(dxg)
                dws.append(dwg)
            dx, dw = np.concatenate(dxs, axis=1), np.concatenate(dws, axis=0)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, "conv2d", bwd)


def conv2d_params(x: Tensor, params: ConvParams) -> Tensor:
    if x.shape[1] != params.in_channels:
        raise ValueError(f"expected {params.in_channels} input channels, got {x.shape[1]}")
    return conv2d(x, params.weight, params.bias, params.stride, params.padding, params.groups)


# --------------------------------------------------------------------------
# normalization and activations


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance, as is customary).
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm channel mismatch: input {x.shape}, state {gamma.shape[0]} channels")
    _check_same_dtype(x, gamma, beta)
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1) if m > 1 else 1.0)
    else:
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, -1, 1, 1)
        if training:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            dx = (
                inv_std.reshape(1, -1, 1, 1)
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            dx = dxhat * inv_std.reshape(1, -1, 1, 1)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), "batch_norm", bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return make_result(out, (x,), "relu", bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)

    def bwd(g):
        return (g * out * (1 - out),)

    return make_result(out, (x,), "sigmoid", bwd)


# --------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("max_pool2d on empty spatial extent")
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho <= 0 or wo <= 0 or padding >= kernel:
        raise ValueError(f"degenerate pooling geometry for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            sel = arg == idx
            if sel.any():
                dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g * sel
        return (np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w]),)

    return make_result(np.ascontiguousarray(out), (x,), "max_pool2d", bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result(out, (x,), "global_avg_pool", bwd)


# --------------------------------------------------------------------------
# structural / elementwise


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0]
    for t in inputs[1:]:
        if t.ndim != ref.ndim or t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ValueError(f"concat shape mismatch: {ref.shape} vs {t.shape}")
    _check_same_dtype(*inputs)
    widths = [t.shape[1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(np.ascontiguousarray(g[:, bounds[i] : bounds[i + 1]]) for i in range(len(widths)))

    return make_result(out, tuple(inputs), "concat_channels", bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[:, start:stop])

    def bwd(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return make_result(out, (x,), "slice_channels", bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)

    def bwd(g):
        return g, g

    return make_result(a.data + b.data, (a, b), "add", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return make_result(ad * bd, (a, b), "mul", bwd)


def multiply_channelwise(x: Tensor, w: Tensor) -> Tensor:
    """x[N,C,H,W] * w[N,C,1,1], broadcasting over H and W only."""
    if x.ndim != 4 or w.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError(f"channelwise multiply needs w of shape {(x.shape[0], x.shape[1], 1, 1)}, got {w.shape}")
    _check_same_dtype(x, w)
    xd, wd = x.data, w.data

    def bwd(g):
        return g * wd, (g * xd).sum(axis=(2, 3), keepdims=True)

    return make_result(xd * wd, (x, w), "multiply_channelwise", bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape

    def bwd(g):
        return (g.reshape(src),)

    return make_result(x.data.reshape(shape), (x,), "reshape", bwd, check_finite=False)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", bwd)


# --------------------------------------------------------------------------
# channel attention primitive


def conv1d_channels(v: Tensor, weight: Tensor) -> Tensor:
    """Shared-kernel 1-D cross-correlation along the channel axis of v[N,C], zero padded."""
    ksize = weight.shape[0]
    if weight.ndim != 1 or ksize % 2 == 0:
        raise ValueError(f"conv1d_channels needs an odd 1-D kernel, got shape {weight.shape}")
    if v.ndim != 2:
        raise ValueError(f"conv1d_channels expects (N, C), got {v.shape}")
    _check_same_dtype(v, weight)
    pad = (ksize - 1) // 2
    n, c = v.shape
    vp = np.pad(v.data, ((0, 0), (pad, pad)))
    wd = weight.data
    out = np.zeros_like(v.data)
    for j in range(ksize):
        out += wd[j] * vp[:, j : j + c]

    def bwd(g):
        dvp = np.zeros_like(vp)
        dw = np.empty_like(wd)
        for j in range(ksize):
            dvp[:, j : j + c] += wd[j] * g
            dw[j] = (g * vp[:, j : j + c]).sum()
        return dvp[:, pad : pad + c], dw

    return make_result(out, (v, weight), "conv1d_channels", bwd)


# --------------------------------------------------------------------------
# classifier


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"fully_connected dimension mismatch: x {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    _check_same_dtype(x, weight, *([bias] if bias is not None else []))
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        grads = (g @ wd.T, xd.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, "fully_connected", bwd)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> tuple:
    """Mean negative log-likelihood; returns ``(loss, probabilities)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    probs = np.exp(logp)
    n = logits.shape[0]
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return (d * (g.reshape(()) / n),)

    return make_result(loss, (logits,), "softmax_cross_entropy", bwd), probs
