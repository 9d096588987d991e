"""Dense float64 tensors with reverse-mode gradients.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward()`` replays those records in reverse topological
order and accumulates gradients in place. Data buffers are treated as
immutable after construction (the finite-difference harness perturbs
parameter buffers explicitly and restores them).

Broadcasting is deliberately restricted: elementwise ops accept equal shapes,
a python scalar, or an operand whose shape is an exact suffix of the other
(leading-batch broadcast). Anything richer must go through ``broadcast_to``
so shape bugs surface at the call site.

Reductions across an axis can be made order-canonical (summands sorted by
value before accumulation) so that results are bitwise independent of input
permutation along that axis; the fusion stack relies on this for exact
camera-permutation equivariance.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, NumericError

_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # -- autodiff ----------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape utilities ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False, canonical=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims, canonical=canonical)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sorted_sum(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along axis with summands sorted by value first.

    Sorting fixes the accumulation order from the value multiset alone, so
    the result is bitwise identical under any permutation of the inputs
    along that axis.
    """
    return np.sort(a, axis=axis).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# elementwise arithmetic with suffix-only broadcasting


def _broadcast_kind(sa: tuple, sb: tuple) -> int:
    """0: equal, 1: a is a suffix of b, 2: b is a suffix of a."""
    if sa == sb:
        return 0
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return 1
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return 2
    raise DimensionError(f"incompatible shapes {sa} and {sb}; only leading-batch broadcast is allowed")


def _reduce_to_suffix(g: np.ndarray, suffix_ndim: int) -> np.ndarray:
    lead = tuple(range(g.ndim - suffix_ndim))
    return g.sum(axis=lead) if lead else g


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        data = a.data + float(b)

        def backward(g):
            a._accumulate(g)

        return _result(data, (a,), backward)
    if not isinstance(a, Tensor):
        return add(b, a)
    kind = _broadcast_kind(a.shape, b.shape)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_suffix(g, a.ndim) if kind == 1 else g)
        if b.requires_grad:
            b._accumulate(_reduce_to_suffix(g, b.ndim) if kind == 2 else g)

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        s = float(b)
        data = a.data * s

        def backward(g):
            a._accumulate(g * s)

        return _result(data, (a,), backward)
    if not isinstance(a, Tensor):
        return mul(b, a)
    kind = _broadcast_kind(a.shape, b.shape)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a._accumulate(_reduce_to_suffix(ga, a.ndim) if kind == 1 else ga)
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(_reduce_to_suffix(gb, b.ndim) if kind == 2 else gb)

    return _result(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise DimensionError(f"matmul batch ranks disagree: {a.shape} x {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            b._accumulate(gb)

    return _result(data, (a, b), backward)


def power(t: Tensor, p: float) -> Tensor:
    t = as_tensor(t)
    data = t.data ** p

    def backward(g):
        t._accumulate(g * p * t.data ** (p - 1.0))

    return _result(data, (t,), backward)


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.exp(t.data)

    def backward(g):
        t._accumulate(g * data)

    return _result(data, (t,), backward)


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.log(t.data)

    def backward(g):
        t._accumulate(g / t.data)

    return _result(data, (t,), backward)


def relu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    pos = t.data > 0
    data = np.where(pos, t.data, 0.0)

    def backward(g):
        t._accumulate(g * pos)

    return _result(data, (t,), backward)


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    t = as_tensor(t)
    pos = t.data > 0
    data = np.where(pos, t.data, slope * t.data)

    def backward(g):
        t._accumulate(g * np.where(pos, 1.0, slope))

    return _result(data, (t,), backward)


def elu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    pos = t.data > 0
    expm = np.exp(np.minimum(t.data, 0.0)) - 1.0
    data = np.where(pos, t.data, expm)

    def backward(g):
        t._accumulate(g * np.where(pos, 1.0, expm + 1.0))

    return _result(data, (t,), backward)


def absolute(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.abs(t.data)
    sign = np.sign(t.data)

    def backward(g):
        t._accumulate(g * sign)

    return _result(data, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = 1.0 / (1.0 + np.exp(-t.data))

    def backward(g):
        t._accumulate(g * data * (1.0 - data))

    return _result(data, (t,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(int(s) for s in shape)
    data = t.data.reshape(shape)
    in_shape = t.shape

    def backward(g):
        t._accumulate(g.reshape(in_shape))

    return _result(data, (t,), backward)


def transpose(t: Tensor, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(int(a) for a in axes)
    data = t.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        t._accumulate(g.transpose(inv))

    return _result(data, (t,), backward)


def broadcast_to(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(int(s) for s in shape)
    data = np.broadcast_to(t.data, shape).copy()
    in_shape = t.shape
    padded = (1,) * (len(shape) - len(in_shape)) + in_shape
    reduce_axes = tuple(i for i, (si, so) in enumerate(zip(padded, shape)) if si == 1 and so != 1)

    def backward(g):
        gr = g.sum(axis=reduce_axes, keepdims=True) if reduce_axes else g
        t._accumulate(gr.reshape(in_shape))

    return _result(data, (t,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(data, tuple(tensors), backward)


def take(t: Tensor, indices, axis: int = 0) -> Tensor:
    """Row gather along axis 0 (the only case the pipeline needs)."""
    t = as_tensor(t)
    if axis != 0:
        raise DimensionError("take supports axis=0 only")
    idx = np.asarray(indices, dtype=np.int64)
    data = t.data[idx]

    def backward(g):
        gt = np.zeros_like(t.data)
        if gt.ndim == 2 and g.ndim == 2:
            kernels.scatter_add_rows(gt, idx, np.ascontiguousarray(g))
        else:
            np.add.at(gt, idx, g)
        t._accumulate(gt)

    return _result(data, (t,), backward)


def masked_fill(t: Tensor, mask, fill_value: float) -> Tensor:
    """Keep entries where mask is True, replace the rest with a constant."""
    t = as_tensor(t)
    m = np.asarray(mask, dtype=bool)
    if m.shape != t.shape:
        raise DimensionError(f"mask shape {m.shape} != tensor shape {t.shape}")
    data = np.where(m, t.data, fill_value)

    def backward(g):
        t._accumulate(g * m)

    return _result(data, (t,), backward)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False, canonical: bool = False) -> Tensor:
    t = as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    if canonical:
        if len(axes) != 1:
            raise DimensionError("canonical sum needs a single axis")
        data = _sorted_sum(t.data, axes[0], keepdims=keepdims)
    else:
        data = t.data.sum(axis=axes, keepdims=keepdims)
    in_shape = t.shape

    def backward(g):
        if not keepdims:
            expand = list(in_shape)
            for a in axes:
                expand[a] = 1
            g = g.reshape(expand)
        t._accumulate(np.broadcast_to(g, in_shape))

    return _result(data, (t,), backward)


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    n = int(np.prod([t.shape[a] for a in axes]))
    if n == 0:
        raise DimensionError(f"mean over empty axes of shape {t.shape}")
    return mul(reduce_sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# masked softmax


def softmax_masked(logits: Tensor, mask, axis: int = -1):
    """Softmax over ``axis`` restricted to entries where mask is True.

    Masked entries come out exactly 0. Slices with no unmasked entry come out
    all zero and are flagged in the returned boolean array (callers decide
    what an uncovered slice means). The denominator uses an order-canonical
    sum, so outputs are bitwise invariant to permutations along the axis.
    """
    logits = as_tensor(logits)
    m = np.asarray(mask, dtype=bool)
    if m.shape != logits.shape:
        raise DimensionError(f"mask shape {m.shape} != logits shape {logits.shape}")
    ax = axis % logits.ndim
    x = np.where(m, logits.data, -np.inf)
    mx = x.max(axis=ax, keepdims=True)
    empty = ~m.any(axis=ax)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(np.where(m, logits.data - mx, -np.inf))
    denom = _sorted_sum(e, ax, keepdims=True)
    denom = np.where(denom > 0.0, denom, 1.0)
    y = e / denom

    def backward(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        logits._accumulate(y * (g - dot))

    return _result(y, (logits,), backward), empty


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    out, _ = softmax_masked(logits, np.ones(logits.shape, dtype=bool), axis=axis)
    return out


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    ax = axis % logits.ndim
    shifted = logits.data - logits.data.max(axis=ax, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))

    def backward(g):
        logits._accumulate(g - np.exp(y) * g.sum(axis=ax, keepdims=True))

    return _result(y, (logits,), backward)


# ---------------------------------------------------------------------------
# normalization layers (composites: gradients come from the primitives)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize over the last axis, then apply per-channel affine."""
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ConfigError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channel {x.shape[-1]}")
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(broadcast_to(mu, x.shape), -1.0))
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    normed = mul(centered, broadcast_to(inv, x.shape))
    return add(mul(normed, gamma), beta)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-8) -> Tensor:
    """Normalize a [C, H, W] map per channel group, then per-channel affine."""
    x = as_tensor(x)
    C, H, W = x.shape
    if C % groups != 0:
        raise ConfigError(f"channels {C} not divisible by groups {groups}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"group_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {C}")
    g = reshape(x, (groups, (C // groups) * H * W))
    mu = reduce_mean(g, axis=1, keepdims=True)
    centered = add(g, mul(broadcast_to(mu, g.shape), -1.0))
    var = reduce_mean(mul(centered, centered), axis=1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    normed = reshape(mul(centered, broadcast_to(inv, g.shape)), (C, H, W))
    gm = broadcast_to(reshape(gamma, (C, 1, 1)), (C, H, W))
    bt = broadcast_to(reshape(beta, (C, 1, 1)), (C, H, W))
    return add(mul(normed, gm), bt)


def group_norm_raw(x: Tensor, groups: int, eps: float = 1e-8) -> Tensor:
    """Group normalization without affine parameters (for invariant checks)."""
    C = x.shape[0]
    ones = Tensor(np.ones(C))
    zeros = Tensor(np.zeros(C))
    return group_norm(x, ones, zeros, groups, eps)


# ---------------------------------------------------------------------------
# convolution (3x3 same-padded and 1x1 only)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "zeros") -> Tensor:
    """Convolve [Cin, H, W] with [Cout, Cin, k, k] for k in {1, 3}; same size out.

    padding "zeros" (default) or "edge" (replicate border; keeps constant
    fields constant).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [Cin,H,W] and [Cout,Cin,k,k], got {x.shape} and {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ConfigError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if cin != x.shape[0]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ConfigError(f"conv2d bias shape {b.shape} != ({cout},)")
    if padding not in ("zeros", "edge"):
        raise ConfigError(f"unknown conv2d padding {padding!r}")
    pad = kh // 2
    H, W = x.shape[1], x.shape[2]
    mode = "constant" if padding == "zeros" else "edge"
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)), mode=mode)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    data = np.einsum("ihwkl,oikl->ohw", win, w.data, optimize=True)
    if b is not None:
        data = data + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("ihwkl,ohw->oikl", win, g, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy : dy + H, dx : dx + W] += np.einsum(
                        "oi,ohw->ihw", w.data[:, :, dy, dx], g, optimize=True
                    )
            if pad == 0:
                x._accumulate(gxp)
            else:
                gx = gxp[:, pad : pad + H, pad : pad + W].copy()
                if padding == "edge":
                    # fold replicated-border gradients back onto their sources
                    gx[:, 0, :] += gxp[:, 0, pad : pad + W]
                    gx[:, -1, :] += gxp[:, -1, pad : pad + W]
                    gx[:, :, 0] += gxp[:, pad : pad + H, 0]
                    gx[:, :, -1] += gxp[:, pad : pad + H, -1]
                    gx[:, 0, 0] += gxp[:, 0, 0]
                    gx[:, 0, -1] += gxp[:, 0, -1]
                    gx[:, -1, 0] += gxp[:, -1, 0]
                    gx[:, -1, -1] += gxp[:, -1, -1]
                x._accumulate(gx)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return _result(data, parents, backward)


# ---------------------------------------------------------------------------
# bilinear 2-D sampling


def bilinear_sample(fmap: Tensor, px: Tensor, py: Tensor) -> Tensor:
    """Sample [C, H, W] at continuous pixel coords (px, py) -> [M, C].

    Pixel centers sit at integer coordinates; taps outside the map contribute
    zero. Differentiable w.r.t. the map and both coordinate vectors.
    """
    fmap = as_tensor(fmap)
    px = as_tensor(px)
    py = as_tensor(py)
    if fmap.ndim != 3 or px.ndim != 1 or py.ndim != 1 or px.shape != py.shape:
        raise DimensionError(f"bilinear_sample shapes: map {fmap.shape}, px {px.shape}, py {py.shape}")
    M = px.shape[0]
    C = fmap.shape[0]
    out = np.zeros((M, C))
    fdata = np.ascontiguousarray(fmap.data)
    pxd = np.ascontiguousarray(px.data)
    pyd = np.ascontiguousarray(py.data)
    kernels.bilinear_gather(fdata, pxd, pyd, out)

    def backward(g):
        gmap = np.zeros_like(fdata)
        gpx = np.zeros(M)
        gpy = np.zeros(M)
        kernels.bilinear_backward(fdata, pxd, pyd, np.ascontiguousarray(g), gmap, gpx, gpy)
        if fmap.requires_grad:
            fmap._accumulate(gmap)
        if px.requires_grad:
            px._accumulate(gpx)
        if py.requires_grad:
            py._accumulate(gpy)

    return _result(out, (fmap, px, py), backward)


def dropout(t: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (inference)."""
    if rng is None or rate <= 0.0:
        return t
    keep = 1.0 - rate
    mask = (rng.random(t.shape) < keep) / keep
    return mul(t, Tensor(mask))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    learnable: bool = True


class ParameterSet:
    """Ordered collection of named parameters; names are unique."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, shape, rng: np.random.Generator, init: str = "xavier", scale: float = 1.0,
               learnable: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) >= 2 else shape[0]
            fan_out = shape[-1] if len(shape) >= 2 else shape[0]
            if len(shape) == 4:  # conv [Cout, Cin, k, k]
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            bound = np.sqrt(6.0 / (fan_in + fan_out)) * scale
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = rng.normal(0.0, scale, size=shape)
        elif init == "uniform":
            data = rng.uniform(-scale, scale, size=shape)
        else:
            raise ConfigError(f"unknown init '{init}'")
        t = Tensor(data, requires_grad=True)
        self._params[name] = Parameter(name, t, learnable)
        return t

    def add(self, param: Parameter) -> Tensor:
        if param.name in self._params:
            raise ConfigError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param.tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def learnable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.learnable]

    def zero_grads(self):
        for p in self._params.values():
            p.tensor.zero_grad()

    def num_elements(self) -> int:
        return sum(p.tensor.size for p in self._params.values())


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float
    worst_index: int
    analytic: float
    finite_diff: float


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_err, default=None)


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4, max_elements: int | None = None,
               rng: np.random.Generator | None = None, scale_floor: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar f() against central differences.

    Relative error per element is |a - fd| / max(|a|, |fd|, scale_floor); the
    floor keeps finite-difference roundoff on near-zero gradients from
    registering as spurious relative error. ``max_elements`` caps how many
    elements per parameter are probed (chosen by the supplied rng), which is
    what makes whole-model sweeps affordable.
    """
    plist = params.learnable() if isinstance(params, ParameterSet) else list(params)
    if isinstance(params, ParameterSet):
        params.zero_grads()
    else:
        for p in plist:
            p.tensor.zero_grad()
    base = f()
    base_val = base.item()
    if not np.isfinite(base_val):
        raise NumericError("grad_check: objective is non-finite at the base point")
    base.backward()
    analytic = {}
    for p in plist:
        g = p.tensor.grad
        analytic[p.name] = np.zeros(p.tensor.size) if g is None else g.reshape(-1).copy()
    if rng is None:
        rng = np.random.default_rng(0)

    report = GradCheckReport(tol=tol, eps=eps)
    for p in plist:
        flat = p.tensor.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idxs = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idxs = np.arange(n)
        worst = GradCheckEntry(p.name, len(idxs), 0.0, -1, 0.0, 0.0)
        with no_grad():
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f().item()
                flat[i] = orig - eps
                f_minus = f().item()
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(
                        f"grad_check: non-finite objective perturbing {p.name}[{i}] by ±{eps}"
                    )
                fd = (f_plus - f_minus) / (2.0 * eps)
                a = analytic[p.name][i]
                rel = abs(a - fd) / max(abs(a), abs(fd), scale_floor)
                if rel >= worst.max_rel_err:
                    worst = GradCheckEntry(p.name, len(idxs), rel, int(i), float(a), float(fd))
        report.entries.append(worst)
    return report


# ---------------------------------------------------------------------------
# flat binary tensor container

MAGIC = b"RBEVTNSR"


def save_tensor(path, t: Tensor | np.ndarray):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        payload = fh.read()
    expected = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(payload, dtype="<f8")
    if arr.size != expected:
        raise ValueError(f"{path}: payload has {arr.size} values, dims {dims} need {expected}")
    return Tensor(arr.reshape(dims).copy())
