"""Classical iterative ptychography solvers: rPIE and accelerated Wirtinger flow."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .field import make_rng
from .ptycho import MeasurementSet, Probe, ScanGrid, ScanOperator

__all__ = [
    "SolverConfig",
    "SolveTrace",
    "DivergedError",
    "amplitude_fidelity",
    "rpie_step",
    "awf_loss_grad",
    "awf_solve",
    "rpie_solve",
    "solve",
    "initial_object",
    "write_trace_csv",
]

METHODS = ("rpie", "awf")


class DivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"solver diverged at iteration {iteration} (loss {loss:.4g})")
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 10_000
    rpie_alpha: float = 0.1
    awf_step: float = 1.0
    awf_momentum: bool = True
    seed: int = 0
    init_mode: str = "flat"
    early_stop_tol: float = 1e-10
    early_stop_patience: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 < self.rpie_alpha <= 1:
            raise ValueError(f"rpie_alpha must lie in (0, 1], got {self.rpie_alpha}")
        if self.init_mode not in ("flat", "random"):
            raise ValueError(f"init_mode must be 'flat' or 'random', got {self.init_mode!r}")


@dataclass
class SolveTrace:
    fidelity: list[float] = field(default_factory=list)
    obj: np.ndarray | None = None
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.fidelity)


def amplitude_fidelity(op: ScanOperator, f: np.ndarray, y: np.ndarray) -> float:
    """``sum_i || y_i - |A_i f| ||^2``."""
    return float(np.sum((y - np.abs(op.forward(f))) ** 2))


def rpie_step(f: np.ndarray, probe: Probe, grid: ScanGrid, y: np.ndarray, alpha: float = 0.1, order=None) -> np.ndarray:
    """One sequential rPIE sweep over the scan positions; returns a new object."""
    P = probe.field
    p2 = np.abs(P) ** 2
    pmax2 = p2.max()
    if pmax2 == 0:
        raise ValueError("invalid probe: zero amplitude")
    weight = np.conj(P) / ((1 - alpha) * p2 + alpha * pmax2)
    w = grid.probe_width
    f = np.array(f, dtype=np.complex128, copy=True)
    order = range(len(grid)) if order is None else order
    for i in order:
        r, c = grid.positions[i]
        patch = f[r : r + w, c : c + w]
        psi = P * patch
        Psi = np.fft.fft2(psi, norm="ortho")
        mag = np.abs(Psi)
        nz = mag > 0
        Psi_new = np.where(nz, y[i] * Psi / np.where(nz, mag, 1.0), Psi)
        psi_new = np.fft.ifft2(Psi_new, norm="ortho")
        patch += weight * (psi_new - psi)
    return f


def awf_loss_grad(op: ScanOperator, f: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Amplitude loss and its Wirtinger gradient ``2 sum_i A_i^H (A_i f - y_i * phase(A_i f))``.

    The gradient is returned in the ``dL/dRe + i dL/dIm`` convention.
    """
    z = op.forward(f)
    mag = np.abs(z)
    phase = np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 0)
    loss = float(np.sum((mag - y) ** 2))
    return loss, 2.0 * op.adjoint(z - y * phase)


def initial_object(n_side: int, mode: str, seed: int) -> np.ndarray:
    if mode == "flat":
        return np.full((n_side, n_side), 0.9 + 0j)
    rng = make_rng(seed, 1)
    return np.exp(1j * rng.uniform(-np.pi, np.pi, size=(n_side, n_side)))


class _EarlyStop:
    def __init__(self, tol, patience):
        self.tol, self.patience, self.count, self.last = tol, patience, 0, None

    def __call__(self, value: float) -> bool:
        if self.last is not None:
            rel = abs(self.last - value) / max(abs(self.last), 1e-300)
            self.count = self.count + 1 if rel < self.tol else 0
        self.last = value
        return self.count >= self.patience


def rpie_solve(ms: MeasurementSet, config: SolverConfig, f0: np.ndarray | None = None) -> SolveTrace:
    op = ScanOperator(ms.probe, ms.grid)
    f = initial_object(ms.grid.n_side, config.init_mode, config.seed) if f0 is None else f0
    rng = make_rng(config.seed, 2)
    stop = _EarlyStop(config.early_stop_tol, config.early_stop_patience)
    trace = SolveTrace()
    t0 = time.perf_counter()
    for _ in range(config.iterations):
        f = rpie_step(f, ms.probe, ms.grid, ms.patterns, config.rpie_alpha, rng.permutation(len(ms.grid)))
        trace.fidelity.append(amplitude_fidelity(op, f, ms.patterns))
        if stop(trace.fidelity[-1]):
            break
    trace.obj, trace.wall_time = f, time.perf_counter() - t0
    return trace


def awf_solve(ms: MeasurementSet, config: SolverConfig, f0: np.ndarray | None = None) -> SolveTrace:
    """Nesterov-accelerated Wirtinger flow with backtracking and monotone restarts.

    Each iteration grows the step by 2x, then halves it until the loss at the
    extrapolated point decreases.  If the accepted step would increase the loss
    relative to the current iterate, momentum is reset and the step repeated
    from the iterate, so the recorded loss never increases.
    """
    op = ScanOperator(ms.probe, ms.grid)
    y = ms.patterns
    f = initial_object(ms.grid.n_side, config.init_mode, config.seed) if f0 is None else np.asarray(f0, complex)
    f_prev = f
    loss = initial = amplitude_fidelity(op, f, y)
    step = config.awf_step
    k = 1
    stop = _EarlyStop(config.early_stop_tol, config.early_stop_patience)
    trace = SolveTrace()
    t0 = time.perf_counter()
    for it in range(config.iterations):
        for restart in (False, True):
            mom = (k - 1) / (k + 2) if (config.awf_momentum and not restart) else 0.0
            v = f + mom * (f - f_prev)
            lv, g = awf_loss_grad(op, v, y)
            step = min(step * 2.0, 1e6)
            for _ in range(60):
                cand = v - step * g
                lc = amplitude_fidelity(op, cand, y)
                if lc <= lv:
                    break
                step *= 0.5
            else:
                cand, lc = v, lv
            if lc <= loss:
                break
            k = 1
        else:
            cand, lc = f, loss
        if not np.isfinite(lc) or lc > 1e6 * max(initial, 1e-300):
            raise DivergedError(it, lc)
        f_prev, f, loss = f, cand, lc
        k += 1
        trace.fidelity.append(loss)
        if stop(loss):
            break
    trace.obj, trace.wall_time = f, time.perf_counter() - t0
    return trace


def solve(method: str, ms: MeasurementSet, config: SolverConfig) -> SolveTrace:
    if method == "rpie":
        return rpie_solve(ms, config)
    if method == "awf":
        return awf_solve(ms, config)
    raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def write_trace_csv(path, trace: SolveTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "fidelity"])
        for i, v in enumerate(trace.fidelity):
            w.writerow([i + 1, repr(float(v))])
