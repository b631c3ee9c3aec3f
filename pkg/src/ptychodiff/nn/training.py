"""Denoiser training: Adam, the noise-prediction step, augmentation and checkpoints."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..diffusion import NoiseSchedule
from ..field import make_rng
from ..fieldio import FormatError
from . import tape as T
from .unet import TinyUNet, UNetConfig

__all__ = [
    "TrainConfig",
    "TrainingError",
    "ShapeError",
    "Adam",
    "AugmentationPolicy",
    "train_step",
    "augment",
    "save_params",
    "load_params",
    "load_checkpoint",
    "sample_batch",
    "fit",
]


class TrainingError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train_step(
    net: TinyUNet, x0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator, opt: Adam, step_index: int = 0
) -> float:
    """One noise-prediction MSE step on a ``(B, 2, H, W)`` batch; returns the per-element loss."""
    b = len(x0)
    t = rng.integers(1, schedule.N + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t][:, None, None, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    xin, _ = net._to_nhwc(xt)
    target, _ = net._to_nhwc(eps)
    tape = T.Tape()
    out, P = net.forward(tape, tape.leaf(xin, requires_grad=False), t, param_grad=True)
    loss = T.mse(out, target)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step_index}")
    tape.backward(loss)
    opt.update(net.params, {k: tape.grad(v) for k, v in P.items()})
    return value


@dataclass(frozen=True)
class AugmentationPolicy:
    patch: int = 32
    angle_range: tuple[float, float] = (0.0, 2 * np.pi)
    scale_range: tuple[float, float] = (0.8, 1.25)
    random_crop: bool = True

    @classmethod
    def identity(cls, patch: int) -> "AugmentationPolicy":
        return cls(patch, (0.0, 0.0), (1.0, 1.0), False)


def _snap(v: float) -> float:
    for target in (-1.0, 0.0, 1.0):
        if abs(v - target) < 1e-12:
            return target
    return v


def augment(x0: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, scaling and crop of a ``(2, H, W)`` normalized image.

    Both channels are resampled bilinearly as plain real images and then
    clipped to ``[-1, 1]``.  The crop center is drawn so that the rotated and
    scaled footprint stays inside the source when possible; otherwise the
    source is reflected at its border.
    """
    _, h, w = x0.shape
    p = policy.patch
    if h < p or w < p:
        raise ValueError(f"source {h}x{w} smaller than patch {p}")
    theta = rng.uniform(*policy.angle_range) if policy.angle_range[1] > policy.angle_range[0] else policy.angle_range[0]
    s = rng.uniform(*policy.scale_range) if policy.scale_range[1] > policy.scale_range[0] else policy.scale_range[0]
    ct, st = _snap(np.cos(theta)), _snap(np.sin(theta))
    # output (i, j) -> source c_src + M (i - c_out, j - c_out)
    M = np.array([[ct, -st], [st, ct]]) / s
    c_out = (p - 1) / 2.0
    half = c_out * (abs(ct) + abs(st)) / s
    lo_r, hi_r = half, h - 1 - half
    lo_c, hi_c = half, w - 1 - half
    if policy.random_crop:
        cr = rng.uniform(lo_r, hi_r) if hi_r >= lo_r else (h - 1) / 2.0
        cc = rng.uniform(lo_c, hi_c) if hi_c >= lo_c else (w - 1) / 2.0
    else:
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    offset = np.array([cr, cc]) - M @ np.array([c_out, c_out])
    out = np.stack(
        [ndimage.affine_transform(ch, M, offset=offset, output_shape=(p, p), order=1, mode="reflect") for ch in x0]
    )
    return np.clip(out, -1.0, 1.0)


_MAGIC = b"PTYP"
_VERSION = 1


def save_params(net: TinyUNet, path: str | os.PathLike, opt: Adam | None = None) -> None:
    """Versioned container: magic, u16 version, u32 header length, JSON header, raw tensors.

    Passing ``opt`` also stores the Adam moments and step count so training
    can resume exactly.
    """
    tensors = dict(net.params)
    meta = {}
    if opt is not None:
        tensors.update({"adam.m." + k: v for k, v in opt.m.items()})
        tensors.update({"adam.v." + k: v for k, v in opt.v.items()})
        meta = {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": net.config.to_dict(), "tensors": entries, "payload": offset, "optimizer": meta}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<HI", _VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_params(path: str | os.PathLike, net: TinyUNet | None = None) -> TinyUNet:
    """Load a checkpoint, optionally into ``net`` whose layer shapes must match."""
    return load_checkpoint(path, net)[0]


def load_checkpoint(path: str | os.PathLike, net: TinyUNet | None = None) -> tuple[TinyUNet, Adam | None]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != _MAGIC:
        raise FormatError("not a parameter container (bad magic)", 0)
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported parameter container version {version}", 4)
    if len(raw) < 10 + hlen:
        raise FormatError(f"header truncated: expected {hlen} bytes", len(raw))
    header = json.loads(raw[10 : 10 + hlen])
    base = 10 + hlen
    if len(raw) - base != header["payload"]:
        raise FormatError(f"payload length mismatch: expected {header['payload']} bytes, got {len(raw) - base}", len(raw))
    if net is None:
        net = TinyUNet(UNetConfig.from_dict(header["config"]))
    opt = None
    if header.get("optimizer"):
        o = header["optimizer"]
        opt = Adam(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
    for e in header["tensors"]:
        name = e["name"]
        dt = np.dtype("<" + e["dtype"])
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=base + e["offset"]).reshape(e["shape"])
        if name.startswith("adam."):
            if opt is not None:
                slot = opt.m if name.startswith("adam.m.") else opt.v
                slot[name[7:]] = arr.astype(dt.newbyteorder("="))
            continue
        if name not in net.params:
            raise ShapeError(f"checkpoint layer {name!r} does not exist in the target network")
        if tuple(arr.shape) != net.params[name].shape:
            raise ShapeError(f"layer {name!r}: checkpoint shape {tuple(arr.shape)} != network shape {net.params[name].shape}")
        net.params[name] = arr.astype(net.params[name].dtype)
    missing = set(net.params) - {e["name"] for e in header["tensors"]}
    if missing:
        raise ShapeError(f"checkpoint lacks layers: {sorted(missing)}")
    return net, opt


def sample_batch(sources: np.ndarray, policy: AugmentationPolicy, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``batch`` augmented patches from a stack of ``(2, H, W)`` source images."""
    idx = rng.integers(0, len(sources), size=batch)
    return np.stack([augment(sources[i], policy, rng) for i in idx])


def fit(
    net: TinyUNet,
    sources: np.ndarray,
    schedule: NoiseSchedule,
    config: TrainConfig,
    policy: AugmentationPolicy,
    opt: Adam | None = None,
    start_step: int = 0,
    callback=None,
) -> list[float]:
    """Train from ``start_step`` to ``config.steps``; returns the losses.

    Step ``k`` draws everything from RNG stream ``k`` of ``config.seed``, so a
    run resumed from a checkpoint (parameters plus Adam state) repeats the
    losses of an uninterrupted run.  ``callback(step, loss, net, opt)`` runs
    after each step.
    """
    opt = opt or Adam(lr=config.learning_rate)
    losses = []
    for k in range(start_step, config.steps):
        rng = make_rng(config.seed, k)
        x0 = sample_batch(sources, policy, config.batch, rng)
        loss = train_step(net, x0, schedule, rng, opt, k)
        losses.append(loss)
        if callback is not None:
            callback(k, loss, net, opt)
    return losses
