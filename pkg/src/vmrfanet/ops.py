"""Differentiable primitives over :class:`~vmrfanet.tensor.Tensor`.

Each function computes its forward result with numpy and registers a backward
closure on the tape.  Convolution is cross-correlation (no kernel flip).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DegenerateBatchError, DimensionError
from .tensor import OpKind, as_tensor, dtype, make_result

L2_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        axes = [i for i, (x, y) in enumerate(zip(a.shape[::-1], b.shape[::-1])) if x != y and 1 not in (x, y)]
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast", axes) from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, OpKind.ADD, (a, b), bw)


def neg(a):
    return make_result(-a.data, OpKind.NEG, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.tracked else None
        gb = _unbroadcast(g * a.data, b.shape) if b.tracked else None
        return ga, gb

    return make_result(a.data * b.data, OpKind.MUL, (a, b), bw)


def elementwise_mul(a, b):
    """Strict elementwise product; both operands must share a shape."""
    if a.shape != b.shape:
        axes = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        raise DimensionError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ", axes)
    return mul(a, b)


def elementwise_add(a, b):
    if a.shape != b.shape:
        axes = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        raise DimensionError(f"elementwise_add: shapes {a.shape} and {b.shape} differ", axes)
    return add(a, b)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.tracked else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.tracked else None
        return ga, gb

    return make_result(out, OpKind.DIV, (a, b), bw)


def relu(x):
    mask = x.data > 0
    return make_result(np.where(mask, x.data, dtype()(0)), OpKind.RELU, (x,), lambda g: (g * mask,))


def tanh(x):
    out = np.tanh(x.data)
    return make_result(out, OpKind.TANH, (x,), lambda g: (g * (1 - out * out),))


def tanh_plus_one(x):
    """``tanh(x) + 1`` held inside the open interval (0, 2).

    Float tanh rounds to exactly -1 or 1 once |x| is large, which would give
    a mask value of 0 or 2; those are nudged to the nearest representable
    interior value.  The gradient is the tanh derivative throughout.
    """
    t = np.tanh(x.data)
    lo = np.finfo(t.dtype).tiny
    hi = np.nextafter(t.dtype.type(2), t.dtype.type(0))
    out = np.clip(t + t.dtype.type(1), lo, hi)
    return make_result(out, OpKind.TANH, (x,), lambda g: (g * (1 - t * t),))


def sqrt(x):
    """Square root with negative round-off clamped to zero; derivative at 0 is taken as 0."""
    out = np.sqrt(np.maximum(x.data, 0))

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0),)

    return make_result(out, OpKind.SQRT, (x,), bw)


def maximum(x, value):
    """Elementwise max against a constant; gradient flows where x wins (ties go to x)."""
    mask = x.data >= value
    return make_result(np.where(mask, x.data, dtype()(value)), OpKind.MAXIMUM, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / structure

def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result(out, OpKind.SUM, (x,), bw)


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1) if x.data.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / dtype()(count), x.shape),)

    return make_result(out, OpKind.MEAN, (x,), bw)


def reshape(x, shape):
    return make_result(x.data.reshape(shape), OpKind.RESHAPE, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def transpose(x, axes=None):
    inv = np.argsort(axes) if axes is not None else None
    return make_result(np.transpose(x.data, axes), OpKind.TRANSPOSE, (x,), lambda g: (np.transpose(g, inv),))


def index(x, idx):
    """``x[idx]`` for basic or integer-array indices; repeated indices accumulate."""
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, dtype=dtype()), OpKind.INDEX, (x,), bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise DimensionError(f"concat: rank mismatch {ref} vs {t.shape}")
        bad = [i for i, (x, y) in enumerate(zip(ref, t.shape)) if x != y and i != axis % len(ref)]
        if bad:
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off the concat axis", bad)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), OpKind.CONCAT, tensors, bw)


def concat_along_channel(tensors):
    return concat(tensors, axis=1)


# ---------------------------------------------------------------- normalisations

def l2_normalize(x, eps=L2_EPS):
    """Divide by ``norm + eps`` along the last axis; an all-zero row stays zero."""
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1, keepdims=True)).astype(dtype())
    denom = norm + dtype()(eps)
    out = x.data / denom

    def bw(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        safe_norm = np.where(norm > 0, norm, 1)
        return (g / denom - x.data * dot / (safe_norm * denom * denom),)

    return make_result(out, OpKind.L2_NORMALIZE, (x,), bw)


def log_softmax(x):
    """Log-softmax over the last axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make_result(out, OpKind.LOG_SOFTMAX, (x,), bw)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation over every axis except axis 1.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays) are updated in place with ``momentum``;
    the running variance uses the unbiased batch variance.  In eval mode the
    running statistics are used.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm needs at least 2 dims, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: {C} channels but gamma {gamma.shape}, beta {beta.shape}", (1,))
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    count = x.data.size // C
    if training:
        if count <= 1:
            raise DegenerateBatchError("batch_norm in train mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu = running_mean.astype(dtype())
        var = running_var.astype(dtype())
    inv_std = (1.0 / np.sqrt(var + dtype()(eps))).astype(dtype())
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out.astype(dtype()), OpKind.BATCH_NORM, (x, gamma, beta), bw)


# ---------------------------------------------------------------- linear maps

def affine(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape NxD and ``weight`` MxD."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}", (1,))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}", (0,))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.tracked else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, OpKind.AFFINE, inputs, bw)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}", (1,))

    def bw(g):
        return (g @ b.data.T if a.tracked else None), (a.data.T @ g if b.tracked else None)

    return make_result(a.data @ b.data, OpKind.MATMUL, (a, b), bw)


def conv_output_size(size, kernel, stride, pad, exact=False):
    """Output length ``(size + 2*pad - kernel) // stride + 1``, or None if invalid.

    With ``exact`` the window must tile the input with no remainder.
    """
    span = size + 2 * pad - kernel
    if span < 0 or (exact and span % stride):
        return None
    return span // stride + 1


def _windows(xp, kh, kw, sh, sw, oh, ow):
    n, c = xp.shape[:2]
    s = xp.strides
    return as_strided(xp, (n, c, kh, kw, oh, ow), (s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw), writeable=False)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of NxCxHxW input with OxCxKhxKw weight.

    Output size per axis is ``(H + 2*pad - K) // stride + 1`` (floor), the
    usual framework convention; trailing rows a stride cannot reach are ignored.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh <= 0 or sw <= 0 or ph < 0 or pw < 0:
        raise ConfigError(f"conv2d: invalid stride {stride} or padding {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels but weight expects {Cw}", ("input.C", "weight.C"))
    oh = conv_output_size(H, kh, sh, ph)
    ow = conv_output_size(W, kw, sw, pw)
    bad = [name for name, v in (("H", oh), ("W", ow)) if v is None or v <= 0]
    if bad:
        raise DimensionError(
            f"conv2d: input {H}x{W} with kernel {kh}x{kw}, stride {(sh, sw)}, padding {(ph, pw)} "
            "gives an empty output", bad)
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {O} filters", ("bias",))

    wmat = weight.data.reshape(O, -1)
    pointwise = kh == 1 and kw == 1 and ph == 0 and pw == 0
    if pointwise:
        xs = x.data[:, :, ::sh, ::sw] if (sh, sw) != (1, 1) else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(N * oh * ow, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        cols = _windows(xp, kh, kw, sh, sw, oh, ow).transpose(0, 4, 5, 1, 2, 3).reshape(N * oh * ow, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(N, oh, ow, O).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * oh * ow, O)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = None
        if x.tracked:
            gcols = gmat @ wmat
            if pointwise:
                gxs = gcols.reshape(N, oh, ow, C).transpose(0, 3, 1, 2)
                if (sh, sw) == (1, 1):
                    gx = gxs
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::sh, ::sw] = gxs
            else:
                gcols = gcols.reshape(N, oh, ow, C, kh, kw)
                gxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=dtype())
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(np.ascontiguousarray(out), OpKind.CONV2D, inputs, bw)


def pool2d(x, mode="avg", window=2, stride=None):
    """Average, max or global-average pooling over NxCxHxW input.

    Windows must tile the input exactly (no padding).  Max-pool backward routes
    each window's gradient to its first maximal element in row-major order.
    """
    if x.ndim != 4:
        raise DimensionError(f"pool2d: expected NxCxHxW, got {x.shape}")
    N, C, H, W = x.shape
    if mode == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        scale = dtype()(1.0 / (H * W))
        return make_result(out, OpKind.POOL2D, (x,), lambda g: (np.broadcast_to(g * scale, x.shape),))
    if mode not in ("avg", "max"):
        raise ConfigError(f"pool2d: unknown mode {mode!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    oh = conv_output_size(H, kh, sh, 0, exact=True)
    ow = conv_output_size(W, kw, sw, 0, exact=True)
    bad = [name for name, v in (("H", oh), ("W", ow)) if v is None or v <= 0]
    if bad:
        raise DimensionError(f"pool2d: window {kh}x{kw} stride {(sh, sw)} does not tile {H}x{W}", bad)
    win = _windows(x.data, kh, kw, sh, sw, oh, ow)  # N,C,kh,kw,oh,ow

    if mode == "avg":
        out = win.mean(axis=(2, 3))
        scale = dtype()(1.0 / (kh * kw))

        def bw(g):
            gx = np.zeros_like(x.data)
            gs = g * scale
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gs
            return (gx,)

        return make_result(out.astype(dtype()), OpKind.POOL2D, (x,), bw)

    flat = win.reshape(N, C, kh * kw, oh, ow)
    arg = flat.argmax(axis=2)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                hit = arg == i * kw + j
                gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += np.where(hit, g, 0)
        return (gx,)

    return make_result(np.ascontiguousarray(out), OpKind.POOL2D, (x,), bw)


def pool_output_shape(shape, mode, window=2, stride=None):
    N, C, H, W = shape
    if mode == "global_avg":
        return (N, C, 1, 1)
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    return (N, C, conv_output_size(H, kh, sh, 0, True), conv_output_size(W, kw, sw, 0, True))
