"""Differentiable numeric primitives on NC(D)HW tensors.

Convolutions are cross-correlations evaluated as a sum over kernel offsets:
for each offset the strided input view is gathered once and contracted with
the corresponding weight slice, so peak memory stays at one input copy
instead of a full im2col buffer.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or a triple, got {v}")
    return v  # type: ignore[return-value]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# -- convolution kernels (plain numpy) -----------------------------------
def _pad(x, padding):
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


_CHUNK_BYTES = 1 << 21


def _chunks(out_sp, voxel_bytes):
    """Output boxes (d0, d1, h0, h1) whose column buffers stay near ``_CHUNK_BYTES``."""
    row = out_sp[2] * voxel_bytes
    rows = max(1, _CHUNK_BYTES // max(row, 1))
    if rows >= out_sp[1]:
        step = max(1, rows // out_sp[1])
        for d0 in range(0, out_sp[0], step):
            yield d0, min(out_sp[0], d0 + step), 0, out_sp[1]
    else:
        for d0 in range(out_sp[0]):
            for h0 in range(0, out_sp[1], rows):
                yield d0, d0 + 1, h0, min(out_sp[1], h0 + rows)


def _box_slices(a, b, c, box, stride, out_sp):
    d0, d1, h0, h1 = box
    sd, sh, sw = stride
    return (
        slice(a + d0 * sd, a + sd * (d1 - 1) + 1, sd),
        slice(b + h0 * sh, b + sh * (h1 - 1) + 1, sh),
        slice(c, c + sw * (out_sp[2] - 1) + 1, sw),
    )


def _gather_cols(xp_n, ks, stride, out_sp, box, buf):
    """im2col for one output box: fills buf (C, K, s) from xp_n (C, D, H, W)."""
    d0, d1, h0, h1 = box
    view = buf.reshape(xp_n.shape[0], -1, d1 - d0, h1 - h0, out_sp[2])
    k = 0
    for a in range(ks[0]):
        for b in range(ks[1]):
            for c in range(ks[2]):
                view[:, k] = xp_n[(slice(None),) + _box_slices(a, b, c, box, stride, out_sp)]
                k += 1


def _scatter_cols(gxp_n, cols, ks, stride, out_sp, box):
    """Adjoint of :func:`_gather_cols`: accumulates cols (C, K, s) into gxp_n."""
    d0, d1, h0, h1 = box
    view = cols.reshape(gxp_n.shape[0], -1, d1 - d0, h1 - h0, out_sp[2])
    k = 0
    for a in range(ks[0]):
        for b in range(ks[1]):
            for c in range(ks[2]):
                gxp_n[(slice(None),) + _box_slices(a, b, c, box, stride, out_sp)] += view[:, k]
                k += 1


def _out_spatial(in_sp, ks, stride, padding):
    return tuple(conv_output_size(in_sp[i], ks[i], stride[i], padding[i]) for i in range(3))


def _conv_fwd(x, w, stride, padding, groups):
    N, C = x.shape[:2]
    Co, Cg = w.shape[:2]
    ks = w.shape[2:]
    K = ks[0] * ks[1] * ks[2]
    G = groups
    out_sp = _out_spatial(x.shape[2:], ks, stride, padding)
    S = out_sp[0] * out_sp[1] * out_sp[2]
    if ks == (1, 1, 1) and stride == (1, 1, 1) and not any(padding):
        cols = x.reshape(N, G, Cg, S)
        return np.matmul(w.reshape(G, Co // G, Cg), cols).reshape(N, Co, *out_sp)
    xp = _pad(x, padding)
    # rows ordered (cg, k) so each group's block of the column buffer is contiguous
    wm = w.reshape(G, Co // G, Cg * K)
    out = np.empty((N, Co) + out_sp, dtype=x.dtype)
    for n in range(N):
        for box in _chunks(out_sp, C * K * x.itemsize):
            d0, d1, h0, h1 = box
            s = (d1 - d0) * (h1 - h0) * out_sp[2]
            buf = np.empty((C, K, s), dtype=x.dtype)
            _gather_cols(xp[n], ks, stride, out_sp, box, buf)
            res = np.matmul(wm, buf.reshape(G, Cg * K, s))
            out[n, :, d0:d1, h0:h1] = res.reshape(Co, d1 - d0, h1 - h0, out_sp[2])
    return out


def _conv_bwd_input(g, w, x_shape, stride, padding, groups):
    N, C = x_shape[:2]
    Co, Cg = w.shape[:2]
    ks = w.shape[2:]
    K = ks[0] * ks[1] * ks[2]
    G = groups
    out_sp = g.shape[2:]
    S = out_sp[0] * out_sp[1] * out_sp[2]
    if ks == (1, 1, 1) and stride == (1, 1, 1) and not any(padding):
        gg = g.reshape(N, G, Co // G, S)
        return np.matmul(w.reshape(G, Co // G, Cg).transpose(0, 2, 1), gg).reshape(x_shape)
    if stride == (1, 1, 1) and all(p <= k - 1 for p, k in zip(padding, ks)):
        # unit stride: the input gradient is a full correlation with the flipped kernel
        wf = w.reshape((G, Co // G, Cg) + ks).swapaxes(1, 2).reshape((C, Co // G) + ks)
        wf = np.ascontiguousarray(wf[:, :, ::-1, ::-1, ::-1])
        return _conv_fwd(g, wf, stride, tuple(k - 1 - p for p, k in zip(padding, ks)), G)
    wt = np.ascontiguousarray(w.reshape(G, Co // G, Cg * K).transpose(0, 2, 1))
    pd, ph, pw = padding
    padded = (x_shape[2] + 2 * pd, x_shape[3] + 2 * ph, x_shape[4] + 2 * pw)
    gx = np.zeros((N, C) + padded, dtype=g.dtype)
    for n in range(N):
        for box in _chunks(out_sp, C * K * g.itemsize):
            d0, d1, h0, h1 = box
            gn = g[n, :, d0:d1, h0:h1].reshape(G, Co // G, -1)
            _scatter_cols(gx[n], np.matmul(wt, gn), ks, stride, out_sp, box)
    return gx[:, :, pd : pd + x_shape[2], ph : ph + x_shape[3], pw : pw + x_shape[4]]


def _conv_bwd_weight(x, g, w_shape, stride, padding, groups):
    N, C = x.shape[:2]
    Co, Cg = w_shape[:2]
    ks = w_shape[2:]
    K = ks[0] * ks[1] * ks[2]
    G = groups
    out_sp = g.shape[2:]
    S = out_sp[0] * out_sp[1] * out_sp[2]
    if ks == (1, 1, 1) and stride == (1, 1, 1) and not any(padding):
        gg = g.reshape(N, G, Co // G, S)
        cols = x.reshape(N, G, Cg, S)
        return np.matmul(gg, cols.swapaxes(2, 3)).sum(axis=0).reshape(w_shape)
    xp = _pad(x, padding)
    gw = np.zeros((G, Co // G, Cg * K), dtype=g.dtype)
    for n in range(N):
        for box in _chunks(out_sp, C * K * x.itemsize):
            d0, d1, h0, h1 = box
            gn = g[n, :, d0:d1, h0:h1].reshape(G, Co // G, -1)
            s = gn.shape[-1]
            buf = np.empty((C, K, s), dtype=x.dtype)
            _gather_cols(xp[n], ks, stride, out_sp, box, buf)
            gw += np.matmul(gn, buf.reshape(G, Cg * K, s).swapaxes(1, 2))
    return gw.reshape(w_shape)


# -- convolution ops -----------------------------------------------------
def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """Grouped 3-D cross-correlation on NCDHW input."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape}, {weight.shape}")
    C, Co, Cg = x.shape[1], weight.shape[0], weight.shape[1]
    if groups < 1 or C % groups or Co % groups:
        raise ShapeError(f"groups={groups} must divide in ({C}) and out ({Co}) channels")
    if Cg != C // groups:
        raise ShapeError(f"weight expects {Cg * groups} input channels, got {C}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"bias shape {bias.shape} != ({Co},)")
    for i in range(3):
        if conv_output_size(x.shape[2 + i], weight.shape[2 + i], stride[i], padding[i]) < 1:
            raise ShapeError(f"non-positive output size on axis {i}")

    out = _conv_fwd(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = _conv_bwd_input(g, weight.data, x.shape, stride, padding, groups) if x.requires_grad else None
        gw = _conv_bwd_weight(x.data, g, weight.shape, stride, padding, groups) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed 3-D convolution; weight is (C_in, C_out, kD, kH, kW).

    Forward equals the input-gradient of ``conv3d`` with the same weight.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose3d shape mismatch: {x.shape} vs {weight.shape}")
    Co = weight.shape[1]
    ks = weight.shape[2:]
    out_sp = tuple((x.shape[2 + i] - 1) * stride[i] - 2 * padding[i] + ks[i] for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError(f"non-positive output size {out_sp}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"bias shape {bias.shape} != ({Co},)")
    out_shape = (x.shape[0], Co) + out_sp
    out = _conv_bwd_input(x.data, weight.data, out_shape, stride, padding, 1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = _conv_fwd(g, weight.data, stride, padding, 1) if x.requires_grad else None
        gw = _conv_bwd_weight(g, x.data, weight.shape, stride, padding, 1) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv_transpose3d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation on NCHW input (groups fixed at 1)."""
    from .tensor import reshape

    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    s = (stride, stride) if isinstance(stride, int) else tuple(stride)
    p = (padding, padding) if isinstance(padding, int) else tuple(padding)
    N, C, H, W = x.shape
    x5 = reshape(x, (N, C, 1, H, W))
    w5 = reshape(weight, weight.shape[:2] + (1,) + weight.shape[2:])
    out = conv3d(x5, w5, bias, stride=(1,) + s, padding=(0,) + p)
    return reshape(out, (N, out.shape[1]) + out.shape[3:])


# -- pooling -------------------------------------------------------------
def max_pool3d(x: Tensor, kernel=2, stride=None) -> Tensor:
    """Windowed max; backward routes to the first argmax in scan order."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    N, C, D, H, W = x.shape
    if any(x.shape[2 + i] < kernel[i] for i in range(3)):
        raise ShapeError(f"kernel {kernel} larger than input {x.shape[2:]}")
    out_sp = tuple((x.shape[2 + i] - kernel[i]) // stride[i] + 1 for i in range(3))
    K = kernel[0] * kernel[1] * kernel[2]
    view = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=(2, 3, 4))
    view = view[:, :, :: stride[0], :: stride[1], :: stride[2]][:, :, : out_sp[0], : out_sp[1], : out_sp[2]]
    win = view.reshape(N, C, *out_sp, K)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        if kernel == stride and all(out_sp[i] * kernel[i] == x.shape[2 + i] for i in range(3)):
            blocks = np.zeros((N, C, *out_sp, K), dtype=g.dtype)
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            blocks = blocks.reshape(N, C, *out_sp, *kernel)
            blocks = blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7)
            return (blocks.reshape(x.shape),)
        kd, kh, kw = np.unravel_index(arg, kernel)
        n, c, od, oh, ow = np.indices(arg.shape)
        np.add.at(
            gx,
            (n, c, od * stride[0] + kd, oh * stride[1] + kh, ow * stride[2] + kw),
            g,
        )
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), backward, "max_pool3d")


def adaptive_bins(length: int, out: int) -> list[tuple[int, int]]:
    """Bin i spans [floor(i*L/out), ceil((i+1)*L/out))."""
    return [((i * length) // out, -((-(i + 1) * length) // out)) for i in range(out)]


def _adaptive_pool(x: Tensor, out, reduce: str) -> Tensor:
    out = _triple(out)
    N, C = x.shape[:2]
    if any(out[i] > x.shape[2 + i] or out[i] < 1 for i in range(3)):
        raise ShapeError(f"adaptive output {out} exceeds input {x.shape[2:]}")
    bins = [adaptive_bins(x.shape[2 + i], out[i]) for i in range(3)]
    res = np.empty((N, C) + out, dtype=x.dtype)
    arg = {}
    for i, (d0, d1) in enumerate(bins[0]):
        for j, (h0, h1) in enumerate(bins[1]):
            for k, (w0, w1) in enumerate(bins[2]):
                block = x.data[:, :, d0:d1, h0:h1, w0:w1]
                if reduce == "avg":
                    res[:, :, i, j, k] = block.mean(axis=(2, 3, 4))
                else:
                    flat = block.reshape(N, C, -1)
                    a = flat.argmax(axis=-1)
                    arg[i, j, k] = a
                    res[:, :, i, j, k] = np.take_along_axis(flat, a[..., None], -1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (d0, d1) in enumerate(bins[0]):
            for j, (h0, h1) in enumerate(bins[1]):
                for k, (w0, w1) in enumerate(bins[2]):
                    gv = g[:, :, i, j, k]
                    if reduce == "avg":
                        n = (d1 - d0) * (h1 - h0) * (w1 - w0)
                        gx[:, :, d0:d1, h0:h1, w0:w1] += (gv / n)[:, :, None, None, None]
                    else:
                        bshape = (d1 - d0, h1 - h0, w1 - w0)
                        dd, hh, ww = np.unravel_index(arg[i, j, k], bshape)
                        nn_, cc = np.indices(dd.shape)
                        np.add.at(gx, (nn_, cc, d0 + dd, h0 + hh, w0 + ww), gv)
        return (gx,)

    return make_node(res, (x,), backward, f"adaptive_{reduce}_pool3d")


def adaptive_avg_pool3d(x: Tensor, out) -> Tensor:
    return _adaptive_pool(x, out, "avg")


def adaptive_max_pool3d(x: Tensor, out) -> Tensor:
    return _adaptive_pool(x, out, "max")


def channel_pool(x: Tensor, reduce: str) -> Tensor:
    """Mean or max over the channel axis, keeping it as size 1."""
    if reduce == "avg":
        return x.mean(axis=1, keepdims=True)
    arg = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g, axis=1)
        return (gx,)

    return make_node(out, (x,), backward, "channel_max")


# -- normalization / affine ----------------------------------------------
def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over (N, D, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place
    with an exponential moving average (unbiased variance).
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch norm params must have length {C}")
    axes = (0, 2, 3, 4)
    bshape = (1, C, 1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.size // C
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm3d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W.T + b with W shaped (F_out, F_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "linear")


# -- activations ---------------------------------------------------------
def _unary(x: Tensor, fwd, deriv, op):
    y = fwd(x.data)
    return make_node(y, (x,), lambda g: (g * deriv(x.data, y),), op)


def sigmoid(x: Tensor) -> Tensor:
    def fwd(v):
        e = np.exp(-np.abs(v))
        return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)

    return _unary(x, fwd, lambda v, y: y * (1 - y), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda v, y: 1 - y * y, "tanh")


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda v, y: (v > 0).astype(v.dtype), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return _unary(
        x,
        lambda v: np.where(v > 0, v, slope * v),
        lambda v, y: np.where(v > 0, 1.0, slope).astype(v.dtype),
        "leaky_relu",
    )


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    return _unary(
        x,
        lambda v: np.where(v > 0, v, alpha * np.expm1(np.minimum(v, 0))),
        lambda v, y: np.where(v > 0, 1.0, y + alpha).astype(v.dtype),
        "elu",
    )


def modified_relu(x: Tensor) -> Tensor:
    """Identity for x > 0, tanh(x) otherwise; slope 1 at the origin from both sides."""
    t = np.tanh(np.minimum(x.data, 0))  # zero where x > 0
    y = t + np.maximum(x.data, 0)

    def backward(g):
        return (g * (1 - t * t),)

    return make_node(y, (x,), backward, "modified_relu")


ACTIVATIONS = ("relu", "leaky_relu", "elu", "tanh", "sigmoid", "modified_relu")


def activation(x: Tensor, kind: str, slope: float = 0.01, alpha: float = 1.0) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "elu":
        return elu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "modified_relu":
        return modified_relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
