"""Differentiable primitives over :class:`~zsqbench.tensor.Tensor`.

Storage stays in the input dtype (float32 by default); convolutions,
reductions and normalization accumulate in float64 and round once at the
end.  Every op accepts float64 operands too, which is what the
finite-difference oracle in :mod:`zsqbench.gradcheck` relies on.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ParameterError, ShapeError
from .tensor import Tensor, as_tensor, make_result

ACCUM = np.float64


def _dtype(*arrays: np.ndarray):
    return np.result_type(*[a.dtype for a in arrays])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return make_result("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return make_result("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    return make_result(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    if np.isscalar(b):
        return scale(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = (x.data * c).astype(x.dtype, copy=False)
    return make_result("scale", out, (x,), lambda g: ((g * c).astype(g.dtype, copy=False),))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask
    return make_result("relu", out, (x,), lambda g: (g * mask,))


# -- shape and reductions -----------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=ACCUM).astype(x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype),)

    return make_result("sum", out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def pick(x, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: expected N x C scores and N indices, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def back(g):
        dx = np.zeros_like(x.data)
        dx[rows, index] = g
        return (dx,)

    return make_result("pick", out, (x,), back)


# -- layers -------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out (C*kh*kw, N*ho*wo) so a convolution is one matrix product."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=ACCUM)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, w, b=None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation on NCHW input with an OIhw kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIhw kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit {h}x{wd} input with pad {pad}")
    dt = _dtype(x.data, w.data)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wm = w.data.reshape(o, -1).astype(ACCUM)
    out = wm @ cols
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.astype(ACCUM)[:, None]
        inputs.append(b)
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3).astype(dt)
    wshape, xdt, wdt = w.shape, x.dtype, w.dtype

    def back(g):
        g64 = g.astype(ACCUM).transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dw = None
        if w.requires_grad:
            dw = (g64 @ cols.T).reshape(wshape).astype(wdt)
        dx = None
        if x.requires_grad:
            dcols = (wm.T @ g64).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw), dtype=ACCUM)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dcols[:, i, j]
            dx = dxp[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3).astype(xdt)
        grads = [dx, dw]
        if b is not None:
            grads.append(g64.sum(axis=1).astype(b.dtype))
        return grads

    return make_result("conv2d", out, inputs, back)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape N x F and ``w`` of shape O x F."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: expected N x {w.shape[-1]} input for weight {w.shape}, got {x.shape}")
    dt = _dtype(x.data, w.data)
    xd, wdat = x.data.astype(ACCUM), w.data.astype(ACCUM)
    out = xd @ wdat.T
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        inputs.append(b)
    out = out.astype(dt)

    def back(g):
        g64 = g.astype(ACCUM)
        grads = [(g64 @ wdat).astype(x.dtype), (g64.T @ xd).astype(w.dtype)]
        if b is not None:
            grads.append(g64.sum(axis=0).astype(b.dtype))
        return grads

    return make_result("linear", out, inputs, back)


def _pool_windows(x: Tensor, k: int, stride: int, kind: str):
    if x.ndim != 4:
        raise ShapeError(f"{kind}: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"{kind}: window {k} larger than {h}x{w} input")
    ho, wo = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win, ho, wo


def maxpool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    win, ho, wo = _pool_windows(x, k, stride, "maxpool")
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                sel = (arg == i * k + j)
                dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * sel
        return (dx,)

    return make_result("maxpool", out, (x,), back)


def avgpool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    win, ho, wo = _pool_windows(x, k, stride, "avgpool")
    out = win.mean(axis=(-2, -1), dtype=ACCUM).astype(x.dtype)

    def back(g):
        dx = np.zeros(x.shape, dtype=ACCUM)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gk
        return (dx.astype(x.dtype),)

    return make_result("avgpool", out, (x,), back)


def global_avgpool(x) -> Tensor:
    """Average over the spatial axes of NCHW input, giving N x C."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global avgpool: expected NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3))


# -- batch normalization ---------------------------------------------------------

def _bn_axes(x: Tensor) -> tuple[int, ...]:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batchnorm: expected N x C or NCHW input, got {x.shape}")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def channel_mean(x) -> Tensor:
    x = as_tensor(x)
    axes = _bn_axes(x)
    m = x.size // x.shape[1]
    out = x.data.mean(axis=axes, dtype=ACCUM).astype(x.dtype)
    shape, nd = x.shape, x.ndim
    return make_result(
        "channel_mean", out, (x,),
        lambda g: (np.broadcast_to(_bn_view(g / m, nd), shape).astype(x.dtype),),
    )


def channel_var(x) -> Tensor:
    """Biased (population) per-channel variance."""
    x = as_tensor(x)
    axes = _bn_axes(x)
    m = x.size // x.shape[1]
    x64 = x.data.astype(ACCUM)
    centered = x64 - x64.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes).astype(x.dtype)
    nd = x.ndim
    return make_result(
        "channel_var", out, (x,),
        lambda g: (((2.0 / m) * centered * _bn_view(g.astype(ACCUM), nd)).astype(x.dtype),),
    )


def bn_normalize(x, mean_t, var_t, gamma, beta, eps: float) -> Tensor:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` with per-channel operands."""
    if not eps > 0:
        raise ParameterError(f"batchnorm: eps must be > 0, got {eps}")
    x, mean_t, var_t, gamma, beta = (as_tensor(t) for t in (x, mean_t, var_t, gamma, beta))
    axes = _bn_axes(x)
    c = x.shape[1]
    for t, what in ((mean_t, "mean"), (var_t, "var"), (gamma, "gamma"), (beta, "beta")):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm: {what} has shape {t.shape}, expected ({c},)")
    nd = x.ndim
    x64 = x.data.astype(ACCUM)
    mu = _bn_view(mean_t.data.astype(ACCUM), nd)
    inv = _bn_view(1.0 / np.sqrt(var_t.data.astype(ACCUM) + eps), nd)
    g_ = _bn_view(gamma.data.astype(ACCUM), nd)
    xhat = (x64 - mu) * inv
    out = (g_ * xhat + _bn_view(beta.data.astype(ACCUM), nd)).astype(x.dtype)

    def back(g):
        g64 = g.astype(ACCUM)
        dxhat = g64 * g_
        dx = (dxhat * inv).astype(x.dtype)
        dmean = -(dxhat * inv).sum(axis=axes) if mean_t.requires_grad else None
        dvar = None
        if var_t.requires_grad:
            dvar = (dxhat * (x64 - mu)).sum(axis=axes) * (-0.5) * (inv.reshape(-1) ** 3)
        dgamma = (g64 * xhat).sum(axis=axes).astype(gamma.dtype)
        dbeta = g64.sum(axis=axes).astype(beta.dtype)
        return (
            dx,
            None if dmean is None else dmean.astype(mean_t.dtype),
            None if dvar is None else dvar.astype(var_t.dtype),
            dgamma,
            dbeta,
        )

    return make_result("batchnorm", out, (x, mean_t, var_t, gamma, beta), back)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    collect_stats: bool = False,
):
    """Batch normalization.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, PyTorch convention).  Eval mode
    normalizes with the running buffers.  Returns ``(y, mean, var)`` where
    ``mean``/``var`` are differentiable batch statistics, or ``None`` when
    neither training nor ``collect_stats`` asked for them.
    """
    if not eps > 0:
        raise ParameterError(f"batchnorm: eps must be > 0, got {eps}")
    x = as_tensor(x)
    bm = bv = None
    if training or collect_stats:
        bm, bv = channel_mean(x), channel_var(x)
    if training:
        m = x.size // x.shape[1]
        unbiased = bv.data.astype(ACCUM) * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * bm.data
        running_var *= 1.0 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
        y = bn_normalize(x, bm, bv, gamma, beta, eps)
    else:
        y = bn_normalize(x, Tensor(running_mean, dtype=running_mean.dtype),
                         Tensor(running_var, dtype=running_var.dtype), gamma, beta, eps)
    return y, bm, bv


# -- probabilities and losses ------------------------------------------------------

def _log_softmax64(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(ACCUM)
    z64 = z64 - z64.max(axis=-1, keepdims=True)
    return z64 - np.log(np.exp(z64).sum(axis=-1, keepdims=True))


def log_softmax(z) -> Tensor:
    z = as_tensor(z)
    ls = _log_softmax64(z.data)
    p = np.exp(ls)
    return make_result(
        "log_softmax", ls.astype(z.dtype), (z,),
        lambda g: ((g - p * g.sum(axis=-1, keepdims=True)).astype(z.dtype),),
    )


def softmax(z) -> Tensor:
    z = as_tensor(z)
    p = np.exp(_log_softmax64(z.data))
    return make_result(
        "softmax", p.astype(z.dtype), (z,),
        lambda g: ((p * (g - (g * p).sum(axis=-1, keepdims=True))).astype(z.dtype),),
    )


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return per_sample
    if reduction == "sum":
        return sum(per_sample)
    if reduction == "mean":
        return mean(per_sample)
    raise ParameterError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of N x C logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"cross_entropy: labels must lie in [0, {c})")
    ls = _log_softmax64(logits.data)
    rows = np.arange(labels.size)
    per = (-ls[rows, labels]).astype(logits.dtype)

    def back(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return ((d * g.astype(ACCUM)[:, None]).astype(logits.dtype),)

    return _reduce(make_result("cross_entropy", per, (logits,), back), reduction)


def kl_div_logits(teacher_logits, student_logits, reduction: str = "mean") -> Tensor:
    """Per-sample KL(softmax(teacher) || softmax(student)) from raw logits."""
    t, s = as_tensor(teacher_logits), as_tensor(student_logits)
    if t.shape != s.shape or t.ndim != 2:
        raise ShapeError(f"kl_div_logits: shapes {t.shape} and {s.shape} differ")
    lt, ls = _log_softmax64(t.data), _log_softmax64(s.data)
    pt = np.exp(lt)
    per64 = (pt * (lt - ls)).sum(axis=-1)
    per = per64.astype(s.dtype)

    def back(g):
        g64 = g.astype(ACCUM)[:, None]
        dt = (pt * (lt - ls - per64[:, None]) * g64).astype(t.dtype) if t.requires_grad else None
        ds = ((np.exp(ls) - pt) * g64).astype(s.dtype)
        return dt, ds

    return _reduce(make_result("kl_div", per, (t, s), back), reduction)


def _check_distribution(p: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(p)):
        raise DomainError(f"kl_divergence: {what} has a non-finite entry")
    if np.any(p < 0):
        raise DomainError(f"kl_divergence: {what} has a negative entry")
    off = np.abs(p.sum(axis=-1, dtype=ACCUM) - 1.0)
    if np.any(off > 1e-4):
        raise DomainError(f"kl_divergence: {what} sums to 1 +/- {off.max():.2e}")


def kl_divergence(p, q, reduction: str = "sum") -> Tensor:
    """KL(p || q) of probability vectors along the last axis (0 log 0 = 0)."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    p64, q64 = p.data.astype(ACCUM), q.data.astype(ACCUM)
    pos = p64 > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logratio = np.where(pos, np.log(np.where(pos, p64, 1.0)) - np.log(q64), 0.0)
    per = (p64 * logratio).sum(axis=-1)

    def back(g):
        g64 = np.expand_dims(np.asarray(g, dtype=ACCUM), -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dp = np.where(pos, logratio + 1.0, 0.0) * g64
            dq = np.where(pos, -p64 / q64, 0.0) * g64
        return dp.astype(p.dtype), dq.astype(q.dtype)

    return _reduce(make_result("kl_divergence", per.astype(p.dtype), (p, q), back), reduction)


def mse_frobenius(a, b, per_sample: bool = False) -> Tensor:
    """Squared Frobenius norm of ``a - b``; per leading index when ``per_sample``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_frobenius: shapes {a.shape} and {b.shape} differ")
    diff = a.data.astype(ACCUM) - b.data.astype(ACCUM)
    axes = tuple(range(1, a.ndim)) if per_sample else None
    out = (diff * diff).sum(axis=axes).astype(_dtype(a.data, b.data))

    def back(g):
        g64 = np.asarray(g, dtype=ACCUM)
        if per_sample:
            g64 = g64.reshape(-1, *([1] * (a.ndim - 1)))
        d = 2.0 * diff * g64
        return d.astype(a.dtype), (-d).astype(b.dtype)

    return make_result("mse_frobenius", out, (a, b), back)


# -- kind dispatch ------------------------------------------------------------------

PRIMITIVES = ("conv2d", "batchnorm", "relu", "avgpool", "maxpool", "linear", "add", "scale")


def forward_primitive(kind: str, inputs: Sequence, params: Sequence = (), **kw) -> Tensor:
    """Dispatch one forward primitive by name.

    ``batchnorm`` params are ``(gamma, beta, running_mean, running_var)``;
    only the normalized output is returned.
    """
    if kind == "conv2d":
        return conv2d(inputs[0], *params, stride=kw.get("stride", 1), pad=kw.get("pad", 0))
    if kind == "linear":
        return linear(inputs[0], *params)
    if kind == "relu":
        return relu(inputs[0])
    if kind == "maxpool":
        return maxpool2d(inputs[0], kw.get("k", 2), kw.get("stride"))
    if kind == "avgpool":
        if kw.get("k") is None:
            return global_avgpool(inputs[0])
        return avgpool2d(inputs[0], kw["k"], kw.get("stride"))
    if kind == "batchnorm":
        gamma, beta, rm, rv = params
        y, _, _ = batchnorm(inputs[0], gamma, beta, rm, rv, kw.get("training", False),
                            kw.get("eps", 1e-5), kw.get("momentum", 0.1))
        return y
    if kind == "add":
        return add(inputs[0], inputs[1])
    if kind == "scale":
        return scale(inputs[0], kw["c"])
    raise ContractError(f"unknown primitive {kind!r}; expected one of {PRIMITIVES}")
