"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored.  Every key has a typed default;
unknown keys are rejected.  Path-valued keys are resolved relative to the
directory holding the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _words(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


# key -> (parser, default text)
SCHEMA: dict[str, tuple] = {
    # layout
    "output_dir": ("path", "out"),
    "dataset_dir": ("path", ""),
    "model_dir": ("path", ""),
    "recon_dir": ("path", ""),
    "params_file": ("path", ""),
    "resume_from": ("path", ""),
    "seed": (int, "0"),
    # object
    "object_size": (int, "64"),
    "phantom_count": (int, "10"),
    "phantom_seed": (int, "20000"),
    "train_phantom_count": (int, "64"),
    "train_phantom_seed": (int, "10000"),
    "phantom_background": (float, "0.9"),
    "phantom_blobs_min": (int, "3"),
    "phantom_blobs_max": (int, "8"),
    "phantom_phase_scale": (float, "1.0"),
    "phantom_lowfreq_amp": (float, "0.4"),
    # probe and scan
    "probe_width": (int, "16"),
    "probe_radius": (float, "0.35"),
    "probe_taper": (float, "0.2"),
    "probe_curvature": (float, "0.0"),
    "overlaps": (_floats, "0.25,0.5,0.75"),
    "jitter": (int, "2"),
    "jitter_overlaps": (_floats, "0.25"),
    # noise
    "photon_max": (_opt_float, "1e5"),
    "noiseless": (_bool, "false"),
    # methods
    "method": (str, "rpie"),
    "methods": (_words, "rpie,awf,diffusion"),
    "diffusion_overlaps": (_floats, ""),
    "iterations": (int, "1000"),
    "rpie_alpha": (float, "0.1"),
    "awf_step": (float, "1.0"),
    "awf_momentum": (_bool, "true"),
    "init_mode": (str, "flat"),
    # diffusion schedule and sampler
    "schedule_steps": (int, "200"),
    "beta_min": (float, "1e-4"),
    "beta_max": (float, "0.02"),
    "zeta0": (float, "20.0"),
    "zeta_ramp": (int, "30"),
    "clip_x0": (_opt_float, "1.0"),
    "zeta_rule": (str, "residual"),
    "travel_j": (int, "20"),
    "travel_stride": (int, "10"),
    "gradient_mode": (str, "full"),
    "snapshot_every": (int, "0"),
    # training
    "train_steps": (int, "5000"),
    "batch": (int, "8"),
    "learning_rate": (float, "1e-4"),
    "checkpoint_every": (int, "1000"),
    "patch": (int, "32"),
    "unet_widths": (_ints, "16,32,64"),
    "unet_dtype": (str, "float32"),
}


@dataclass
class ExperimentConfig:
    values: dict
    base_dir: str
    source: str | None = None
    explicit: set = field(default_factory=set)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key: str, default_rel: str = "") -> str:
        """Resolved path for ``key``, falling back to ``output_dir/default_rel`` when unset."""
        v = self.values[key]
        if v:
            return v
        return os.path.join(self.values["output_dir"], default_rel)

    def dump(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _parse(key: str, text: str, base_dir: str):
    kind = SCHEMA[key][0]
    if kind == "path":
        text = text.strip()
        return os.path.normpath(os.path.join(base_dir, text)) if text else ""
    try:
        return kind(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text.strip()!r} ({exc})") from None


def parse_config(text: str, base_dir: str, source: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source or '<config>'}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source or '<config>'}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source or '<config>'}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = str(value)
    values = {k: _parse(k, raw.get(k, default), base_dir) for k, (_, default) in SCHEMA.items()}
    return ExperimentConfig(values, base_dir, source, set(raw))


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    base = os.path.dirname(os.path.abspath(path))
    return parse_config(text, base, path, overrides)
