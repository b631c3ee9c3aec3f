"""A small reverse-mode autodiff tape over numpy arrays.

Every op appends one node holding its output, its parents and a closure that
maps the output cotangent to parent cotangents.  :meth:`Tape.backward` walks the
nodes once in reverse insertion order, which is a valid topological order
because a node can only be created after its parents.

Image tensors use channels-last layout ``(B, H, W, C)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "slice_last",
    "linear",
    "conv2d",
    "group_norm",
    "silu",
    "softmax",
    "avg_pool2",
    "upsample2",
    "concat",
    "sum_all",
    "mean_all",
    "mse",
]


class Var:
    __slots__ = ("value", "tape", "index", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    def __init__(self):
        self._nodes: list[tuple[Sequence[Var], Callable | None, bool]] = []
        self._values: list[np.ndarray] = []
        self.grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        value = np.asarray(value)
        return self._record(value, (), None, requires_grad)

    def _record(self, value, parents, backward, requires_grad=None) -> Var:
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        idx = len(self._nodes)
        self._nodes.append((parents, backward if requires_grad else None, requires_grad))
        return Var(value, self, idx, requires_grad)

    def backward(self, out: Var, seed: np.ndarray | None = None) -> "Tape":
        """Accumulate cotangents of ``out`` (seeded with ``seed`` or ones) into :attr:`grads`."""
        if out.tape is not self:
            raise ValueError("output variable belongs to another tape")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[out.index] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=out.value.dtype)
        if grads[out.index].shape != out.value.shape:
            raise ValueError(f"seed shape {grads[out.index].shape} != output shape {out.value.shape}")
        for i in range(out.index, -1, -1):
            g = grads[i]
            parents, fn, _ = self._nodes[i]
            if g is None or fn is None:
                continue
            needs = tuple(p.requires_grad for p in parents)
            for p, pg in zip(parents, fn(g, needs)):
                if pg is None or not p.requires_grad:
                    continue
                if grads[p.index] is None:
                    grads[p.index] = pg
                else:
                    grads[p.index] = grads[p.index] + pg
            if parents:
                grads[i] = None  # only leaf cotangents are kept
        self.grads = grads
        return self

    def grad(self, v: Var) -> np.ndarray:
        if self.grads is None:
            raise RuntimeError("backward() has not been run on this tape")
        g = self.grads[v.index]
        return np.zeros_like(v.value) if g is None else g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_var(x, like: Var) -> Var:
    return x if isinstance(x, Var) else like.tape.leaf(np.asarray(x, dtype=like.value.dtype), requires_grad=False)


def add(a: Var, b) -> Var:
    b = _as_var(b, a)
    sa, sb = a.shape, b.shape
    return a.tape._record(
        a.value + b.value, (a, b), lambda g, n: (_unbroadcast(g, sa) if n[0] else None, _unbroadcast(g, sb) if n[1] else None)
    )


def sub(a: Var, b) -> Var:
    b = _as_var(b, a)
    sa, sb = a.shape, b.shape
    return a.tape._record(
        a.value - b.value, (a, b), lambda g, n: (_unbroadcast(g, sa) if n[0] else None, -_unbroadcast(g, sb) if n[1] else None)
    )


def mul(a: Var, b) -> Var:
    b = _as_var(b, a)
    av, bv = a.value, b.value

    def bw(g, n):
        return (_unbroadcast(g * bv, av.shape) if n[0] else None, _unbroadcast(g * av, bv.shape) if n[1] else None)

    return a.tape._record(av * bv, (a, b), bw)


def scale(a: Var, c: float) -> Var:
    c = a.value.dtype.type(c)
    return a.tape._record(a.value * c, (a,), lambda g, n: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    """Batched matrix product over the last two axes."""
    av, bv = a.value, b.value

    def bw(g, n):
        ga = g @ np.swapaxes(bv, -1, -2) if n[0] else None
        gb = np.swapaxes(av, -1, -2) @ g if n[1] else None
        return (_unbroadcast(ga, av.shape) if ga is not None else None, _unbroadcast(gb, bv.shape) if gb is not None else None)

    return a.tape._record(av @ bv, (a, b), bw)


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return a.tape._record(np.swapaxes(a.value, -1, -2), (a,), lambda g, n: (np.swapaxes(g, -1, -2),))


def reshape(a: Var, shape) -> Var:
    s = a.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g, n: (g.reshape(s),))


def slice_last(x: Var, start: int, stop: int) -> Var:
    v = x.value

    def bw(g, n):
        out = np.zeros(v.shape, dtype=v.dtype)
        out[..., start:stop] = g
        return (out,)

    return x.tape._record(v[..., start:stop], (x,), bw)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w + b`` over the last axis; ``w`` has shape ``(C_in, C_out)``."""
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        out = out + b.value
    parents = (x, w) if b is None else (x, w, b)

    def bw(g, n):
        gx = g @ wv.T if n[0] else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if n[1] else None
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0) if n[2] else None

    return x.tape._record(out, parents, bw)


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, hp, wp, c = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B, H, W, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, kh * kw * c)


def conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    """Stride-1 'same' convolution (cross-correlation); ``w`` is ``(kh, kw, C_in, C_out)``, odd kernel."""
    xv, wv = x.value, w.value
    kh, kw, cin, cout = wv.shape
    if xv.shape[-1] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {xv.shape[-1]}")
    bsz, h, wd, _ = xv.shape
    ph, pw = kh // 2, kw // 2
    if kh == 1 and kw == 1:
        cols = xv.reshape(-1, cin)
    else:
        cols = _im2col(np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0))), kh, kw)
    wm = wv.reshape(kh * kw * cin, cout)
    out = cols @ wm
    if b is not None:
        out += b.value
    out = out.reshape(bsz, h, wd, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g, n):
        g2 = g.reshape(-1, cout)
        gx = None
        if n[0]:
            if kh == 1 and kw == 1:
                gx = (g2 @ wm.T).reshape(xv.shape)
            else:
                # transposed convolution: correlate the padded cotangent with the flipped kernel
                wf = wv[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gcols = _im2col(np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0))), kh, kw)
                gx = (gcols @ wf).reshape(xv.shape)
        gw = (cols.T @ g2).reshape(wv.shape) if n[1] else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if n[2] else None

    return x.tape._record(out, parents, bw)


def _group_sums(x3: np.ndarray, groups: int) -> np.ndarray:
    """Per-item, per-group sums of a ``(B, N, C)`` array, shape ``(B, 1, C)`` broadcast over each group."""
    b, n, c = x3.shape
    ones = np.ones((1, 1, n), dtype=x3.dtype)
    per_c = (ones @ x3).astype(np.float64)  # (B, 1, C); gemv is far faster than a strided reduce
    per_g = per_c.reshape(b, 1, groups, c // groups).sum(axis=-1, keepdims=True)
    return np.broadcast_to(per_g, (b, 1, groups, c // groups)).reshape(b, 1, c)


def group_norm(x: Var, gamma: Var, beta: Var, groups: int, eps: float = 1e-5) -> Var:
    """Group normalization over ``(H, W, C/groups)`` for each item and group."""
    xv = x.value
    bsz, h, w, c = xv.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    count = h * w * (c // groups)
    x3 = xv.reshape(bsz, h * w, c)
    mu = _group_sums(x3, groups) / count
    xc = x3 - mu.astype(xv.dtype)
    var = _group_sums(xc * xc, groups) / count
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = xc * inv
    gv = gamma.value
    out = (xhat * gv + beta.value).reshape(xv.shape)

    def bw(g, n):
        g3 = g.reshape(bsz, h * w, c)
        gx = None
        if n[0]:
            dxh = g3 * gv
            m1 = (_group_sums(dxh, groups) / count).astype(xv.dtype)
            m2 = (_group_sums(dxh * xhat, groups) / count).astype(xv.dtype)
            gx = (inv * (dxh - m1 - xhat * m2)).reshape(xv.shape)
        ggam = (g3 * xhat).reshape(-1, c).sum(axis=0) if n[1] else None
        gbet = g3.reshape(-1, c).sum(axis=0) if n[2] else None
        return gx, ggam, gbet

    return x.tape._record(out, (x, gamma, beta), bw)


def silu(x: Var) -> Var:
    xv = x.value
    s = expit(xv)
    return x.tape._record(xv * s, (x,), lambda g, n: (g * (s * (1.0 + xv * (1.0 - s))),))


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return x.tape._record(p, (x,), lambda g, n: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def avg_pool2(x: Var) -> Var:
    xv = x.value
    b, h, w, c = xv.shape
    out = xv.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g, n):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * xv.dtype.type(0.25),)

    return x.tape._record(out, (x,), bw)


def upsample2(x: Var) -> Var:
    """Nearest-neighbour 2x upsampling."""
    xv = x.value
    b, h, w, c = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)
    return x.tape._record(out, (x,), lambda g, n: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),))


def concat(xs: Sequence[Var]) -> Var:
    """Concatenate along the last (channel) axis."""
    sizes = np.cumsum([v.shape[-1] for v in xs])[:-1]
    out = np.concatenate([v.value for v in xs], axis=-1)
    return xs[0].tape._record(out, tuple(xs), lambda g, n: tuple(np.split(g, sizes, axis=-1)))


def sum_all(x: Var) -> Var:
    shp, dt = x.shape, x.value.dtype
    return x.tape._record(np.asarray(x.value.sum(), dtype=dt), (x,), lambda g, n: (np.broadcast_to(g, shp).astype(dt),))


def mean_all(x: Var) -> Var:
    shp, dt, size = x.shape, x.value.dtype, x.value.size
    return x.tape._record(
        np.asarray(x.value.mean(), dtype=dt), (x,), lambda g, n: (np.full(shp, g / size, dtype=dt),)
    )


def mse(pred: Var, target: np.ndarray) -> Var:
    """Mean over all elements of ``(pred - target)**2``."""
    pv = pred.value
    diff = pv - target.astype(pv.dtype)
    size = pv.size
    return pred.tape._record(
        np.asarray(np.mean(diff * diff), dtype=pv.dtype), (pred,), lambda g, n: (diff * (2.0 * g / size),)
    )
