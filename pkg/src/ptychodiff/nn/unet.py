"""Desk-scale two-channel U-Net epsilon predictor built on :mod:`ptychodiff.nn.tape`."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..field import make_rng
from . import tape as T

__all__ = ["UNetConfig", "TinyUNet", "timestep_embedding"]


@dataclass(frozen=True)
class UNetConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 2
    time_dim: int = 64
    groups: int = 8
    blocks_per_level: int = 2
    attention: bool = True
    dtype: str = "float32"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class TinyUNet:
    """Three-level residual U-Net with scale-shift time conditioning.

    Layout: a 3x3 stem, ``blocks_per_level`` residual blocks per encoder
    level with 2x average-pool downsampling between levels, single-head
    self-attention at the coarsest level, and a mirrored decoder that
    concatenates the encoder skip before its residual blocks.  The output conv
    is zero-initialized, so a fresh network predicts ``eps = 0``.

    Parameters live in :attr:`params` as a flat ``name -> ndarray`` dict.
    """

    def __init__(self, config: UNetConfig | None = None):
        self.config = cfg = config or UNetConfig()
        self.dtype = np.dtype(cfg.dtype)
        self._rng = make_rng(cfg.seed, 0x554E4554)
        self.params: dict[str, np.ndarray] = {}
        emb = cfg.time_dim * 2
        self._dense("temb.0", cfg.time_dim, emb)
        self._dense("temb.1", emb, emb)
        w0 = cfg.widths[0]
        self._conv("stem", 3, cfg.in_channels, w0)
        c = w0
        for lvl, w in enumerate(cfg.widths):
            for k in range(cfg.blocks_per_level):
                self._resblock(f"enc{lvl}.{k}", c, w, emb)
                c = w
        if cfg.attention:
            self._attention("attn", c)
        skips = list(cfg.widths)
        for lvl in range(len(cfg.widths) - 2, -1, -1):
            w = cfg.widths[lvl]
            for k in range(cfg.blocks_per_level):
                cin = c + skips[lvl] if k == 0 else c
                self._resblock(f"dec{lvl}.{k}", cin, w, emb)
                c = w
        self._norm("out.norm", c)
        self.params["out.conv.w"] = np.zeros((3, 3, c, cfg.in_channels), dtype=self.dtype)
        self.params["out.conv.b"] = np.zeros(cfg.in_channels, dtype=self.dtype)

    # parameter construction -------------------------------------------------
    def _init(self, shape, fan_in):
        return (self._rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(self.dtype)

    def _dense(self, name, cin, cout):
        self.params[name + ".w"] = self._init((cin, cout), cin)
        self.params[name + ".b"] = np.zeros(cout, dtype=self.dtype)

    def _conv(self, name, k, cin, cout):
        self.params[name + ".w"] = self._init((k, k, cin, cout), k * k * cin)
        self.params[name + ".b"] = np.zeros(cout, dtype=self.dtype)

    def _norm(self, name, c):
        self.params[name + ".g"] = np.ones(c, dtype=self.dtype)
        self.params[name + ".b"] = np.zeros(c, dtype=self.dtype)

    def _resblock(self, name, cin, cout, emb):
        self._norm(name + ".n1", cin)
        self._conv(name + ".c1", 3, cin, cout)
        self._dense(name + ".t", emb, 2 * cout)
        self._norm(name + ".n2", cout)
        self._conv(name + ".c2", 3, cout, cout)
        if cin != cout:
            self._conv(name + ".skip", 1, cin, cout)

    def _attention(self, name, c):
        self._norm(name + ".n", c)
        for part in ("q", "k", "v", "o"):
            self._dense(f"{name}.{part}", c, c)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _groups(self, c):
        return min(self.config.groups, c)

    # forward ----------------------------------------------------------------
    def forward(self, tape: T.Tape, x: T.Var, t, param_grad: bool = False) -> tuple[T.Var, dict[str, T.Var]]:
        """Record a forward pass on ``tape``.

        ``x`` is a channels-last ``(B, H, W, 2)`` variable and ``t`` an integer
        step (or one per batch item).  Returns the output variable and the
        parameter leaves, which carry gradients when ``param_grad`` is set.
        """
        cfg = self.config
        b, h, w, cin = x.shape
        scale = 2 ** (len(cfg.widths) - 1)
        if cin != cfg.in_channels or h % scale or w % scale:
            raise ValueError(f"input shape {x.shape} incompatible: need {cfg.in_channels} channels, H, W divisible by {scale}")
        P = {k: tape.leaf(v, requires_grad=param_grad) for k, v in self.params.items()}
        t = np.broadcast_to(np.asarray(t), (b,))
        temb = tape.leaf(timestep_embedding(t, cfg.time_dim).astype(self.dtype), requires_grad=False)
        e = T.silu(T.linear(temb, P["temb.0.w"], P["temb.0.b"]))
        e = T.silu(T.linear(e, P["temb.1.w"], P["temb.1.b"]))

        hcur = T.conv2d(x, P["stem.w"], P["stem.b"])
        skips = []
        for lvl in range(len(cfg.widths)):
            if lvl > 0:
                hcur = T.avg_pool2(hcur)
            for k in range(cfg.blocks_per_level):
                hcur = self._res(tape, P, f"enc{lvl}.{k}", hcur, e)
            skips.append(hcur)
        if cfg.attention:
            hcur = self._attn(P, "attn", hcur)
        for lvl in range(len(cfg.widths) - 2, -1, -1):
            hcur = T.upsample2(hcur)
            hcur = T.concat([hcur, skips[lvl]])
            for k in range(cfg.blocks_per_level):
                hcur = self._res(tape, P, f"dec{lvl}.{k}", hcur, e)
        c = hcur.shape[-1]
        hcur = T.silu(T.group_norm(hcur, P["out.norm.g"], P["out.norm.b"], self._groups(c)))
        return T.conv2d(hcur, P["out.conv.w"], P["out.conv.b"]), P

    def _res(self, tape, P, name, x, e):
        cin = x.shape[-1]
        h = T.silu(T.group_norm(x, P[name + ".n1.g"], P[name + ".n1.b"], self._groups(cin)))
        h = T.conv2d(h, P[name + ".c1.w"], P[name + ".c1.b"])
        cout = h.shape[-1]
        ss = T.linear(e, P[name + ".t.w"], P[name + ".t.b"])
        ss = T.reshape(ss, (ss.shape[0], 1, 1, 2 * cout))
        scale_t = T.slice_last(ss, 0, cout)
        shift_t = T.slice_last(ss, cout, 2 * cout)
        h = T.group_norm(h, P[name + ".n2.g"], P[name + ".n2.b"], self._groups(cout))
        h = T.add(T.add(h, T.mul(h, scale_t)), shift_t)
        h = T.conv2d(T.silu(h), P[name + ".c2.w"], P[name + ".c2.b"])
        skip = T.conv2d(x, P[name + ".skip.w"], P[name + ".skip.b"]) if name + ".skip.w" in P else x
        return T.add(skip, h)

    def _attn(self, P, name, x):
        b, h, w, c = x.shape
        n = T.group_norm(x, P[name + ".n.g"], P[name + ".n.b"], self._groups(c))
        n = T.reshape(n, (b, h * w, c))
        q = T.linear(n, P[name + ".q.w"], P[name + ".q.b"])
        k = T.linear(n, P[name + ".k.w"], P[name + ".k.b"])
        v = T.linear(n, P[name + ".v.w"], P[name + ".v.b"])
        a = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(c)))
        o = T.linear(T.matmul(a, v), P[name + ".o.w"], P[name + ".o.b"])
        return T.add(x, T.reshape(o, (b, h, w, c)))

    # numpy-facing helpers ---------------------------------------------------
    def _to_nhwc(self, x):
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).astype(self.dtype), single

    @staticmethod
    def _from_nhwc(y, single):
        y = y.transpose(0, 3, 1, 2).astype(np.float64)
        return y[0] if single else y

    def predict_eps(self, x: np.ndarray, t) -> np.ndarray:
        """Epsilon prediction for ``(2, H, W)`` or ``(B, 2, H, W)`` input, returned as float64."""
        xin, single = self._to_nhwc(x)
        tape = T.Tape()
        out, _ = self.forward(tape, tape.leaf(xin, requires_grad=False), t)
        return self._from_nhwc(out.value, single)

    def eps_with_vjp(self, x: np.ndarray, t):
        """Epsilon prediction plus a closure for ``(d eps / d x)^T g``."""
        xin, single = self._to_nhwc(x)
        tape = T.Tape()
        xv = tape.leaf(xin, requires_grad=True)
        out, _ = self.forward(tape, xv, t)

        def vjp(g):
            gin, _ = self._to_nhwc(g)
            tape.backward(out, gin)
            return self._from_nhwc(tape.grad(xv), single)

        return self._from_nhwc(out.value, single), vjp

