"""Ptychographic measurement model: scan geometry, probe, phantoms and noisy far-field data.

The per-position linear map is ``A_i f = F(P * D_i f)`` with ``D_i`` the patch
extraction at scan position ``i``, ``P`` the probe and ``F`` the unitary FFT.
Measurements are amplitudes ``y_i`` with ``c * y_i**2 ~ Poisson(c * |A_i f|**2)``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .field import fft2, ifft2, make_rng
from .fieldio import read_field, write_field

__all__ = [
    "ConfigurationError",
    "Probe",
    "ScanGrid",
    "MeasurementSet",
    "PhantomParams",
    "Phantom",
    "ScanOperator",
    "overlap_to_step",
    "raster_grid",
    "jitter_grid",
    "extract_patch",
    "embed_patch_add",
    "forward_amplitudes",
    "measure",
    "make_probe",
    "make_phantom",
    "save_measurements",
    "load_measurements",
]


class ConfigurationError(ValueError):
    """Inconsistent scan, probe or noise configuration."""


@dataclass(frozen=True)
class Probe:
    field: np.ndarray

    def __post_init__(self):
        if self.field.ndim != 2 or self.field.shape[0] != self.field.shape[1]:
            raise ConfigurationError(f"probe must be square, got shape {self.field.shape}")
        if not np.max(np.abs(self.field)) > 0:
            raise ConfigurationError("probe is identically zero")

    @property
    def width(self) -> int:
        return self.field.shape[0]


@dataclass(frozen=True)
class ScanGrid:
    positions: np.ndarray  # (K, 2) int top-left (row, col)
    probe_width: int
    n_side: int
    nominal_overlap: float
    achieved_overlap: float

    def __len__(self) -> int:
        return len(self.positions)

    def coverage(self) -> np.ndarray:
        """Number of scan positions touching each object pixel."""
        cov = np.zeros((self.n_side, self.n_side), dtype=np.int64)
        w = self.probe_width
        for r, c in self.positions:
            cov[r : r + w, c : c + w] += 1
        return cov


@dataclass(frozen=True)
class MeasurementSet:
    grid: ScanGrid
    probe: Probe
    patterns: np.ndarray  # (K, w, w) amplitudes
    photon_max: float | None  # None for noiseless data
    seed: int = 0

    def __post_init__(self):
        if len(self.patterns) != len(self.grid):
            raise ConfigurationError(f"{len(self.patterns)} patterns for {len(self.grid)} positions")
        if np.any(self.patterns < 0):
            raise ConfigurationError("amplitude patterns must be nonnegative")


@dataclass(frozen=True)
class PhantomParams:
    background: float = 0.9
    min_blobs: int = 3
    max_blobs: int = 8
    factor_range: tuple[float, float] = (0.4, 0.8)
    axis_range: tuple[float, float] = (0.06, 0.22)  # semi-axes as a fraction of n_side
    edge_softness: float = 1.0  # pixels
    phase_scale: float = 1.0  # radians per unit of amplitude drop
    lowfreq_amp: float = 0.4  # max radians per low-frequency mode
    lowfreq_modes: int = 2


@dataclass(frozen=True)
class Phantom:
    object: np.ndarray
    seed: int
    params: PhantomParams = field(default_factory=PhantomParams)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def overlap_to_step(overlap: float, w: int) -> tuple[int, float]:
    """Convert a linear overlap fraction to an integer scan step.

    Returns ``(step, achieved)`` with ``achieved = 1 - step / w``.
    """
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must lie in [0, 1), got {overlap}")
    step = max(1, _round_half_up((1.0 - overlap) * w))
    if step >= w and overlap > 0:
        raise ConfigurationError(f"overlap {overlap} rounds to step {step} >= probe width {w}")
    return step, 1.0 - step / w


def _axis_positions(n_side: int, w: int, step: int) -> list[int]:
    pos = list(range(0, n_side - w + 1, step))
    if pos[-1] != n_side - w:
        pos.append(n_side - w)
    return pos


def raster_grid(n_side: int, w: int, step: int, nominal_overlap: float | None = None) -> ScanGrid:
    """Square raster whose last row/column is clamped to end at the border."""
    if n_side < w:
        raise ConfigurationError(f"object side {n_side} smaller than probe width {w}")
    if not 1 <= step <= w:
        raise ConfigurationError(f"step must lie in [1, {w}] so the object is covered, got {step}")
    axis = _axis_positions(n_side, w, step)
    positions = np.array([(r, c) for r in axis for c in axis], dtype=np.int64)
    achieved = 1.0 - step / w
    return ScanGrid(positions, w, n_side, achieved if nominal_overlap is None else nominal_overlap, achieved)


def jitter_grid(grid: ScanGrid, max_shift: int, rng: np.random.Generator) -> ScanGrid:
    """Randomly shift interior scan coordinates by up to ``max_shift`` pixels.

    Coordinates sitting on the object border stay put so the border remains
    covered; shifted coordinates are clamped into bounds.
    """
    if max_shift == 0:
        return grid
    hi = grid.n_side - grid.probe_width
    pos = grid.positions.copy()
    shifts = rng.integers(-max_shift, max_shift + 1, size=pos.shape)
    interior = (pos > 0) & (pos < hi)
    pos = np.clip(pos + np.where(interior, shifts, 0), 0, hi)
    if len(np.unique(pos, axis=0)) != len(pos):
        raise ConfigurationError("jitter produced duplicate scan positions")
    return dataclasses.replace(grid, positions=pos)


def extract_patch(f: np.ndarray, pos, w: int) -> np.ndarray:
    r, c = int(pos[0]), int(pos[1])
    if r < 0 or c < 0 or r + w > f.shape[0] or c + w > f.shape[1]:
        raise IndexError(f"patch of width {w} at {(r, c)} outside object of shape {f.shape}")
    return f[r : r + w, c : c + w].copy()


def embed_patch_add(g: np.ndarray, pos, out: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`extract_patch`: add ``g`` into a copy of ``out`` at ``pos``."""
    w = g.shape[0]
    r, c = int(pos[0]), int(pos[1])
    if r < 0 or c < 0 or r + w > out.shape[0] or c + w > out.shape[1]:
        raise IndexError(f"patch of width {w} at {(r, c)} outside object of shape {out.shape}")
    out = out.astype(np.result_type(out, g), copy=True)
    out[r : r + w, c : c + w] += g
    return out


class ScanOperator:
    """Batched ``A_i = F diag(P) D_i`` over all scan positions and its adjoint."""

    def __init__(self, probe: Probe, grid: ScanGrid):
        if probe.width != grid.probe_width:
            raise ConfigurationError(f"probe width {probe.width} != grid probe width {grid.probe_width}")
        self.probe = probe
        self.grid = grid
        w, n = grid.probe_width, grid.n_side
        ar = np.arange(w)
        rows = grid.positions[:, 0, None, None] + ar[None, :, None]
        cols = grid.positions[:, 1, None, None] + ar[None, None, :]
        self._rows = np.broadcast_to(rows, (len(grid), w, w))
        self._cols = np.broadcast_to(cols, (len(grid), w, w))
        self._flat = (self._rows * n + self._cols).ravel()
        self.shape = (n, n)

    def patches(self, f: np.ndarray) -> np.ndarray:
        return f[self._rows, self._cols]

    def scatter(self, patches: np.ndarray) -> np.ndarray:
        """Sum patches back into object space (adjoint of :meth:`patches`)."""
        n2 = self.shape[0] * self.shape[1]
        p = patches.ravel()
        if np.iscomplexobj(p):
            out = np.bincount(self._flat, weights=p.real, minlength=n2) + 1j * np.bincount(
                self._flat, weights=p.imag, minlength=n2
            )
        else:
            out = np.bincount(self._flat, weights=p, minlength=n2)
        return out.reshape(self.shape)

    def forward(self, f: np.ndarray) -> np.ndarray:
        return fft2(self.probe.field * self.patches(f))

    def adjoint(self, psi: np.ndarray) -> np.ndarray:
        return self.scatter(np.conj(self.probe.field) * ifft2(psi))

    def probe_power(self) -> np.ndarray:
        """``sum_i D_i^T |P|^2``, the diagonal of ``A^H A``."""
        return self.scatter(np.broadcast_to(np.abs(self.probe.field) ** 2, (len(self.grid),) + self.probe.field.shape))


def forward_amplitudes(f: np.ndarray, probe: Probe, grid: ScanGrid) -> np.ndarray:
    """Noiseless far-field amplitudes ``|F(P * D_i f)|``, shape ``(K, w, w)``."""
    return np.abs(ScanOperator(probe, grid).forward(np.asarray(f, dtype=np.complex128)))


def measure(
    amplitudes: np.ndarray,
    grid: ScanGrid,
    probe: Probe,
    photon_max: float | None,
    seed: int = 0,
    noiseless: bool = False,
) -> MeasurementSet:
    """Apply pseudo-Poisson photon noise with one global detector gain.

    The gain ``c`` maps the brightest pixel over all positions to ``photon_max``
    expected counts.  Position ``i`` draws from RNG stream ``i``.
    """
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    if noiseless:
        return MeasurementSet(grid, probe, amplitudes.copy(), None, seed)
    if photon_max is None or photon_max <= 0:
        raise ConfigurationError(f"photon_max must be positive, got {photon_max}")
    intensity = amplitudes**2
    peak = float(intensity.max())
    if peak <= 0:
        raise ConfigurationError("all amplitudes are zero; photon scaling is degenerate")
    c = photon_max / peak
    patterns = np.empty_like(amplitudes)
    for i in range(len(amplitudes)):
        counts = make_rng(seed, i).poisson(c * intensity[i])
        patterns[i] = np.sqrt(counts / c)
    return MeasurementSet(grid, probe, patterns, float(photon_max), seed)


def make_probe(w: int, radius_frac: float = 0.35, taper_frac: float = 0.2, curvature: float = 0.0) -> Probe:
    """Gaussian-smoothed disk probe, peak amplitude 1.

    ``curvature`` adds a quadratic (defocus-like) phase of ``curvature`` radians
    at the nominal disk edge; zero gives a flat phase.
    """
    if w < 4:
        raise ConfigurationError(f"probe width must be >= 4, got {w}")
    c = (w - 1) / 2.0
    yy, xx = np.mgrid[0:w, 0:w]
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    radius = radius_frac * w
    disk = (r2 <= radius**2).astype(np.float64)
    amp = ndimage.gaussian_filter(disk, sigma=taper_frac * w, mode="constant")
    amp /= amp.max()
    return Probe(amp * np.exp(1j * curvature * r2 / radius**2))


def _soft_ellipse(yy, xx, cy, cx, a, b, theta, softness):
    ct, st = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * ct + (yy - cy) * st) / a
    v = (-(xx - cx) * st + (yy - cy) * ct) / b
    rho = np.sqrt(u * u + v * v)
    # distance to the boundary measured in pixels along the mean axis
    return 1.0 / (1.0 + np.exp(-(1.0 - rho) * 0.5 * (a + b) / softness))


def make_phantom(n_side: int, seed: int, params: PhantomParams | None = None) -> Phantom:
    """Random soft-ellipse phantom with correlated amplitude and phase."""
    if n_side < 16:
        raise ConfigurationError(f"phantom side must be >= 16, got {n_side}")
    p = params or PhantomParams()
    rng = make_rng(seed, 0x5048414E)
    yy, xx = np.mgrid[0:n_side, 0:n_side].astype(np.float64)
    amp = np.full((n_side, n_side), p.background)
    for _ in range(int(rng.integers(p.min_blobs, p.max_blobs + 1))):
        cy, cx = rng.uniform(0, n_side, size=2)
        a, b = rng.uniform(*p.axis_range, size=2) * n_side
        theta = rng.uniform(0, np.pi)
        factor = rng.uniform(*p.factor_range)
        m = _soft_ellipse(yy, xx, cy, cx, a, b, theta, p.edge_softness)
        amp *= 1.0 - (1.0 - factor) * m
    amp = np.clip(amp, 0.1, 1.0)
    phase = p.phase_scale * (1.0 - amp)
    for _ in range(p.lowfreq_modes):
        k = np.zeros(2)
        while not k.any():
            k = rng.integers(-2, 3, size=2).astype(np.float64)
        phase = phase + rng.uniform(0, p.lowfreq_amp) * np.cos(
            2 * np.pi * (k[0] * yy + k[1] * xx) / n_side + rng.uniform(0, 2 * np.pi)
        )
    phase = np.angle(np.exp(1j * phase))
    return Phantom(amp * np.exp(1j * phase), seed, p)


def save_measurements(ms: MeasurementSet, directory: str | os.PathLike, extra: dict | None = None) -> None:
    """One container per position plus a ``manifest.txt`` of ``key = value`` lines."""
    os.makedirs(directory, exist_ok=True)
    g = ms.grid
    lines = {
        "n_side": g.n_side,
        "probe_width": g.probe_width,
        "photon_max": "none" if ms.photon_max is None else repr(float(ms.photon_max)),
        "seed": ms.seed,
        "nominal_overlap": repr(float(g.nominal_overlap)),
        "achieved_overlap": repr(float(g.achieved_overlap)),
        "positions": " ".join(f"{r},{c}" for r, c in g.positions),
    }
    if extra:
        lines.update(extra)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        for k, v in lines.items():
            fh.write(f"{k} = {v}\n")
    write_field(os.path.join(directory, "probe.ptyf"), ms.probe.field)
    for i, pat in enumerate(ms.patterns):
        write_field(os.path.join(directory, f"pattern_{i:04d}.ptyf"), pat[None])


def read_manifest(directory: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(os.path.join(directory, "manifest.txt")) as fh:
        for line in fh:
            if line.strip():
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def load_measurements(directory: str | os.PathLike) -> MeasurementSet:
    m = read_manifest(directory)
    positions = np.array([[int(v) for v in s.split(",")] for s in m["positions"].split()], dtype=np.int64)
    grid = ScanGrid(
        positions, int(m["probe_width"]), int(m["n_side"]), float(m["nominal_overlap"]), float(m["achieved_overlap"])
    )
    probe = Probe(read_field(os.path.join(directory, "probe.ptyf")))
    patterns = np.stack([read_field(os.path.join(directory, f"pattern_{i:04d}.ptyf"))[0] for i in range(len(grid))])
    photon_max = None if m["photon_max"] == "none" else float(m["photon_max"])
    return MeasurementSet(grid, probe, patterns, photon_max, int(m["seed"]))
