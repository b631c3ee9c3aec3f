"""Diffusion-prior ptychographic reconstruction at desk scale.

Submodules: ``field`` and ``fieldio`` (complex fields, FFTs, containers),
``ptycho`` (probe, scans, forward model, noise), ``solvers`` (rPIE, AWF),
``diffusion`` (schedules and DDPM steps), ``nn`` (autodiff and the denoiser),
``guidance`` (measurement-guided sampling), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
