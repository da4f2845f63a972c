"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every differentiable op records a closure
that scatters the output adjoint back into its parents; ``backward`` walks the
implicit DAG once, in reverse topological order. Gradients accumulate across
repeated backward calls; reset is explicit via ``zero_grad``.

Broadcasting is supported only where the ops below use it (bias-add, scalar
ops, per-pixel / per-channel gating); general numpy broadcasting is summed
back out in the adjoint.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import ConfigurationError, DimensionError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph plumbing -----------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Populates ``grad`` on every tensor with ``requires_grad`` reachable
        from this root. Calling backward again (after a new forward) adds to
        existing gradients rather than overwriting them.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar root, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the adjoint over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(go):
        a._accumulate(_unbroadcast(go, a.shape))
        b._accumulate(_unbroadcast(go, b.shape))

    return _make(data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(go):
        a._accumulate(_unbroadcast(go * b.data, a.shape))
        b._accumulate(_unbroadcast(go * a.data, b.shape))

    return _make(data, (a, b), bwd, "mul")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def bwd(go):
        x._accumulate(go * s * (1.0 - s))

    return _make(s, (x,), bwd, "sigmoid")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd(go):
        x._accumulate(go * (x.data > 0.0))

    return _make(data, (x,), bwd, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    data = x.data * cdf

    def bwd(go):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        x._accumulate(go * (cdf + x.data * pdf))

    return _make(data, (x,), bwd, "gelu")


def texp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def bwd(go):
        x._accumulate(go * data)

    return _make(data, (x,), bwd, "exp")


def tlog(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def bwd(go):
        x._accumulate(go / x.data)

    return _make(data, (x,), bwd, "log")


# -- reductions and reshapes -------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(go):
        g = np.asarray(go)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _make(data, (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), _wrap(1.0 / float(n)))


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(go):
        x._accumulate(go.reshape(x.shape))

    return _make(data, (x,), bwd, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def bwd(go):
        x._accumulate(go.transpose(inv))

    return _make(data, (x,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(go):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * go.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(go[tuple(idx)])

    return _make(data, tensors, bwd, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def bwd(go):
        g = np.zeros_like(x.data)
        g[idx] = go
        x._accumulate(g)

    return _make(data, (x,), bwd, "narrow")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product; batch dims of a and b must already agree."""
    data = np.matmul(a.data, b.data)

    def bwd(go):
        a._accumulate(np.matmul(go, np.swapaxes(b.data, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), go))

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: (..., C) @ (C, O) + (O,)."""
    c_in = weight.shape[0]
    if x.shape[-1] != c_in:
        raise DimensionError(
            f"linear: last axis of input is {x.shape[-1]}, weight expects {c_in}"
        )
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data

    def bwd(go):
        x._accumulate(go @ weight.data.T)
        weight._accumulate(x.data.reshape(-1, c_in).T @ go.reshape(-1, weight.shape[1]))
        if bias is not None:
            bias._accumulate(go.reshape(-1, weight.shape[1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bwd, "linear")


# -- normalization and attention helpers -------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("softmax: last axis has length 0")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(go):
        x._accumulate(s * (go - (go * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), bwd, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("log_softmax: last axis has length 0")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(go):
        x._accumulate(go - np.exp(ls) * go.sum(axis=-1, keepdims=True))

    return _make(ls, (x,), bwd, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    n = x.shape[-1]
    if n == 0:
        raise DimensionError("layer_norm: last axis has length 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(go):
        gy = go * gamma.data
        gx = inv / n * (n * gy - gy.sum(axis=-1, keepdims=True) - xhat * (gy * xhat).sum(axis=-1, keepdims=True))
        x._accumulate(gx)
        gamma._accumulate((go * xhat).reshape(-1, n).sum(axis=0))
        beta._accumulate(go.reshape(-1, n).sum(axis=0))

    return _make(data, (x, gamma, beta), bwd, "layer_norm")


# -- convolution and pooling -------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2D cross-correlation on a CxHxW input.

    weight is (O, C/groups, k, k); groups == C with O == C gives a depthwise
    conv. Output H' = floor((H + 2p - k)/stride) + 1.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d: input must be CxHxW, got rank {x.data.ndim}")
    c, h, w = x.shape
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be OxCgxkxk, got rank {weight.data.ndim}")
    o, cg, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if c % groups != 0:
        raise DimensionError(f"conv2d: input channels {c} not divisible by groups {groups} (axis 0)")
    if o % groups != 0:
        raise DimensionError(f"conv2d: output channels {o} not divisible by groups {groups} (axis 0)")
    if cg != c // groups:
        raise DimensionError(f"conv2d: weight axis 1 is {cg}, expected {c // groups}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: empty output {ho}x{wo} for input {h}x{w} (spatial axes)")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},) (axis 0)")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    win_g = win.reshape(groups, c // groups, ho, wo, k, k)
    w_g = weight.data.reshape(groups, o // groups, c // groups, k, k)
    out = np.einsum("gchwij,gocij->gohw", win_g, w_g, optimize=True).reshape(o, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bwd(go):
        go_g = go.reshape(groups, o // groups, ho, wo)
        gw = np.einsum("gchwij,gohw->gocij", win_g, go_g, optimize=True)
        weight._accumulate(gw.reshape(o, c // groups, k, k))
        if bias is not None:
            bias._accumulate(go.sum(axis=(1, 2)))
        t = np.einsum("gocij,gohw->gchwij", w_g, go_g, optimize=True).reshape(c, ho, wo, k, k)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += t[:, :, :, ki, kj]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding]
        x._accumulate(gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bwd, "conv2d")


def avg_pool_same(x: Tensor, k: int) -> Tensor:
    """Shape-preserving average pool: stride 1, zero padding (k-1)/2.

    The divisor is the full k*k window even where zero padding is counted.
    """
    if k % 2 == 0 or k < 1:
        raise ConfigurationError(f"avg_pool_same: k must be odd positive, got {k}")
    if x.data.ndim != 3:
        raise DimensionError(f"avg_pool_same: input must be CxHxW, got rank {x.data.ndim}")
    c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    out = win.sum(axis=(-1, -2)) / float(k * k)

    def bwd(go):
        gxp = np.zeros_like(xp)
        gk = go / float(k * k)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + h, kj:kj + w] += gk
        if p:
            gxp = gxp[:, p:-p, p:-p]
        x._accumulate(gxp)

    return _make(out, (x,), bwd, "avg_pool_same")


def global_avg_pool(x: Tensor) -> Tensor:
    """CxHxW -> C mean over the spatial axes."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool: input must be CxHxW, got rank {x.data.ndim}")
    c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("global_avg_pool: empty spatial axes")
    data = x.data.mean(axis=(1, 2))

    def bwd(go):
        x._accumulate(np.broadcast_to(go[:, None, None] / float(h * w), x.shape).copy())

    return _make(data, (x,), bwd, "global_avg_pool")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample CxHxW by an integer factor with half-pixel-centered bilinear
    interpolation (edge-clamped); a constant field stays exactly constant."""
    if factor < 1 or int(factor) != factor:
        raise ConfigurationError(f"bilinear_upsample: factor must be a positive int, got {factor}")
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_upsample: input must be CxHxW, got rank {x.data.ndim}")
    if factor == 1:
        return reshape(x, x.shape)
    c, h, w = x.shape

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = np.clip(src - np.floor(src), 0.0, 1.0)
        frac[src < 0] = 0.0
        return i0, i1, frac

    r0, r1, fr = axis_weights(h, h * factor)
    c0, c1, fc = axis_weights(w, w * factor)
    wr0, wr1 = (1.0 - fr)[None, :, None], fr[None, :, None]
    wc0, wc1 = (1.0 - fc)[None, None, :], fc[None, None, :]

    d = x.data
    out = (d[:, r0][:, :, c0] * wr0 * wc0 + d[:, r0][:, :, c1] * wr0 * wc1
           + d[:, r1][:, :, c0] * wr1 * wc0 + d[:, r1][:, :, c1] * wr1 * wc1)

    def bwd(go):
        gx = np.zeros_like(x.data)
        for ri, wr in ((r0, wr0), (r1, wr1)):
            for ci, wc in ((c0, wc0), (c1, wc1)):
                contrib = go * wr * wc
                rows = np.repeat(ri, len(ci))
                cols = np.tile(ci, len(ri))
                np.add.at(gx, (slice(None), rows, cols), contrib.reshape(c, -1))
        x._accumulate(gx)

    return _make(out, (x,), bwd, "bilinear_upsample")


# -- gradient checking -------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients
    of a scalar-valued f, over every coordinate of x.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise UsageError(f"grad_check: eps must be positive, got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise UsageError("grad_check: f must be scalar-valued")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            fp = f(Tensor(flat.reshape(x.shape))).item()
            flat[i] = lo
            fm = f(Tensor(flat.reshape(x.shape))).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (hi - lo)  # divide by the representable step
    err = np.abs(analytic.ravel() - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check_multi(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6,
                     max_coords_per_tensor: int | None = None,
                     rng: np.random.Generator | None = None) -> float:
    """Finite-difference check against several live tensors at once.

    f re-evaluates the computation from the tensors' current data. When a
    tensor is large, at most max_coords_per_tensor randomly chosen coordinates
    are probed.
    """
    if eps <= 0:
        raise UsageError(f"grad_check_multi: eps must be positive, got {eps}")
    for t in tensors:
        t.zero_grad()
        t.requires_grad = True
    out = f()
    if out.size != 1:
        raise UsageError("grad_check_multi: f must be scalar-valued")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.ravel()
            idx = np.arange(flat.size)
            if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
                idx = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
            for i in idx:
                orig = flat[i]
                hi, lo = orig + eps, orig - eps
                flat[i] = hi
                fp = f().item()
                flat[i] = lo
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (hi - lo)
                err = abs(analytic.ravel()[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst
