"""Command-line pipeline: simulate, train, reconstruct, evaluate and sweep.

Directory layout under ``output_dir`` (each part can be relocated by config)::

    data/phantoms/p0000.ptyf        test objects (+ .pgm previews)
    data/train/t0000.ptyf           training objects
    data/meas/raster-0.25/p0000/    one measurement set per (scan, phantom)
    model/params.ptyp               trained denoiser, checkpoints, train_log.csv
    recon/<method>/<scan>/p0000.ptyf
    report.csv, summary.csv, table1.csv, table2.csv

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .diffusion import make_schedule, write_schedule_csv
from .field import make_rng, to_two_channel
from .fieldio import FormatError, export_pgm, read_field, write_field
from .guidance import GuidanceBlowupError, GuidanceConfig, reconstruct, write_fidelity_trace_csv
from .metrics import nrmse_phase_aligned, ssim_magnitude
from .nn.training import (
    Adam,
    AugmentationPolicy,
    ShapeError,
    TrainConfig,
    TrainingError,
    fit,
    load_checkpoint,
    load_params,
    save_params,
)
from .nn.unet import TinyUNet, UNetConfig
from .ptycho import (
    ConfigurationError,
    PhantomParams,
    forward_amplitudes,
    jitter_grid,
    load_measurements,
    make_phantom,
    make_probe,
    measure,
    overlap_to_step,
    raster_grid,
    save_measurements,
)
from .solvers import DivergedError, SolverConfig, solve, write_trace_csv

METHODS = ("rpie", "awf", "diffusion")

# RNG stream offsets; each (purpose, index) pair gets its own Philox stream
_NOISE_STREAM = 1_000_000
_JITTER_STREAM = 2_000_000


# helpers ---------------------------------------------------------------------
def _prepare_dir(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise ConfigError(f"output directory {path!r} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _write_resolved(cfg: ExperimentConfig, directory: str) -> None:
    with open(os.path.join(directory, "resolved_config.txt"), "w") as fh:
        fh.write(cfg.dump())


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _scan_key(kind: str, overlap: float) -> str:
    return f"{kind}-{overlap:.2f}"


def _parse_scan_key(key: str) -> tuple[str, float]:
    kind, ov = key.rsplit("-", 1)
    return kind, float(ov)


def _phantom_params(cfg: ExperimentConfig) -> PhantomParams:
    return PhantomParams(
        background=cfg.phantom_background,
        min_blobs=cfg.phantom_blobs_min,
        max_blobs=cfg.phantom_blobs_max,
        phase_scale=cfg.phantom_phase_scale,
        lowfreq_amp=cfg.phantom_lowfreq_amp,
    )


def _schedule(cfg: ExperimentConfig):
    return make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)


def _save_object(path_stem: str, obj: np.ndarray) -> None:
    write_field(path_stem + ".ptyf", obj)
    export_pgm(path_stem + ".pgm", np.abs(obj))
    export_pgm(path_stem + "_phase.pgm", np.angle(obj))


def _ids(directory: str, suffix: str = ".ptyf") -> list[str]:
    return sorted(f[: -len(suffix)] for f in os.listdir(directory) if f.endswith(suffix))


# simulate --------------------------------------------------------------------
def cmd_simulate(cfg: ExperimentConfig, force: bool = False) -> str:
    """Write test/training phantoms and one measurement set per (scan, phantom)."""
    data = cfg.path("dataset_dir", "data")
    _prepare_dir(data, force)
    _write_resolved(cfg, data)
    n, w = cfg.object_size, cfg.probe_width
    params = _phantom_params(cfg)
    photon_max = None if cfg.noiseless else cfg.photon_max

    for sub, count, base, prefix in (
        ("phantoms", cfg.phantom_count, cfg.phantom_seed, "p"),
        ("train", cfg.train_phantom_count, cfg.train_phantom_seed, "t"),
    ):
        os.makedirs(os.path.join(data, sub))
        for i in range(count):
            _save_object(os.path.join(data, sub, f"{prefix}{i:04d}"), make_phantom(n, base + i, params).object)

    probe = make_probe(w, cfg.probe_radius, cfg.probe_taper, cfg.probe_curvature)
    write_field(os.path.join(data, "probe.ptyf"), probe.field)
    objects = [read_field(os.path.join(data, "phantoms", f"p{i:04d}.ptyf")) for i in range(cfg.phantom_count)]

    scans = [("raster", ov) for ov in cfg.overlaps]
    if cfg.jitter > 0:
        scans += [("jitter", ov) for ov in cfg.jitter_overlaps]
    for k, (kind, ov) in enumerate(scans):
        try:
            step, _ = overlap_to_step(ov, w)
            base_grid = raster_grid(n, w, step, ov)
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from None
        for i, obj in enumerate(objects):
            grid = base_grid
            if kind == "jitter":
                grid = jitter_grid(base_grid, cfg.jitter, make_rng(cfg.seed, _JITTER_STREAM + 1000 * k + i))
            amps = forward_amplitudes(obj, probe, grid)
            noise_seed = cfg.seed * 1_000_003 + _NOISE_STREAM + 1000 * k + i
            ms = measure(amps, grid, probe, photon_max, seed=noise_seed, noiseless=photon_max is None)
            save_measurements(
                ms,
                os.path.join(data, "meas", _scan_key(kind, ov), f"p{i:04d}"),
                extra={"phantom_id": f"p{i:04d}", "scan": _scan_key(kind, ov)},
            )
    return data


# train -----------------------------------------------------------------------
def _load_sources(data: str) -> np.ndarray:
    tdir = os.path.join(data, "train")
    if not os.path.isdir(tdir) or not _ids(tdir):
        raise ConfigError(f"no training phantoms under {tdir!r}; run 'simulate' first")
    return np.stack([to_two_channel(read_field(os.path.join(tdir, i + ".ptyf"))) for i in _ids(tdir)])


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> str:
    """Train the denoiser on augmented training phantoms; returns the parameter file."""
    data = cfg.path("dataset_dir", "data")
    sources = _load_sources(data)
    model_dir = cfg.path("model_dir", "model")
    _prepare_dir(model_dir, force)
    _write_resolved(cfg, model_dir)
    schedule = _schedule(cfg)
    write_schedule_csv(os.path.join(model_dir, "schedule.csv"), schedule)

    start, opt = 0, None
    if cfg.resume_from:
        net, opt = load_checkpoint(cfg.resume_from)
        if opt is None:
            raise ConfigError(f"{cfg.resume_from!r} holds no optimizer state; cannot resume")
        start = opt.step
    else:
        net = TinyUNet(UNetConfig(widths=cfg.unet_widths, dtype=cfg.unet_dtype, seed=cfg.seed))
        opt = Adam(lr=cfg.learning_rate)
    tcfg = TrainConfig(cfg.train_steps, cfg.batch, cfg.learning_rate, cfg.seed, cfg.checkpoint_every)
    policy = AugmentationPolicy(patch=cfg.patch)

    log_path = os.path.join(model_dir, "train_log.csv")
    log = open(log_path, "w", newline="")
    writer = csv.writer(log)
    writer.writerow(["step", "loss", "wall_time"])
    t0 = time.perf_counter()

    def callback(k, loss, net, opt):
        writer.writerow([k + 1, repr(float(loss)), f"{time.perf_counter() - t0:.3f}"])
        if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            save_params(net, os.path.join(model_dir, f"ckpt_{k + 1:06d}.ptyp"), opt)

    try:
        fit(net, sources, schedule, tcfg, policy, opt=opt, start_step=start, callback=callback)
    finally:
        log.close()
    out = os.path.join(model_dir, "params.ptyp")
    save_params(net, out, opt)
    return out


# reconstruct -----------------------------------------------------------------
def _guidance_config(cfg: ExperimentConfig, seed: int) -> GuidanceConfig:
    try:
        return GuidanceConfig(
            zeta0=cfg.zeta0,
            j=cfg.travel_j,
            travel_stride=cfg.travel_stride,
            gradient_mode=cfg.gradient_mode,
            zeta_rule=cfg.zeta_rule,
            zeta_ramp=cfg.zeta_ramp,
            clip_x0=cfg.clip_x0,
            seed=seed,
            snapshot_every=cfg.snapshot_every,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _solver_config(cfg: ExperimentConfig) -> SolverConfig:
    try:
        return SolverConfig(
            iterations=cfg.iterations,
            rpie_alpha=cfg.rpie_alpha,
            awf_step=cfg.awf_step,
            awf_momentum=cfg.awf_momentum,
            seed=cfg.seed,
            init_mode=cfg.init_mode,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _params_path(cfg: ExperimentConfig) -> str:
    path = cfg.params_file or os.path.join(cfg.path("model_dir", "model"), "params.ptyp")
    if not os.path.isfile(path):
        raise ConfigError(f"diffusion method needs a parameter file; {path!r} does not exist")
    return path


def _run_job(job: tuple) -> None:
    cfg, method, scan, pid, meas_dir, out_dir, params = job
    ms = load_measurements(meas_dir)
    stem = os.path.join(out_dir, pid)
    if method == "diffusion":
        net = load_params(params)
        seed = cfg.seed + int(pid[1:])
        rec = reconstruct(ms, net, _schedule(cfg), _guidance_config(cfg, seed))
        write_fidelity_trace_csv(stem + "_trace.csv", rec)
        obj = rec.obj
    else:
        trace = solve(method, ms, _solver_config(cfg))
        write_trace_csv(stem + "_trace.csv", trace)
        obj = trace.obj
    _save_object(stem, obj)


def cmd_reconstruct(
    cfg: ExperimentConfig,
    force: bool = False,
    jobs: int = 1,
    method: str | None = None,
    scans: list[str] | None = None,
) -> str:
    """Run one method over every measurement set (optionally a subset of scans)."""
    method = method or cfg.method
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    data = cfg.path("dataset_dir", "data")
    meas_root = os.path.join(data, "meas")
    if not os.path.isdir(meas_root):
        raise ConfigError(f"no measurements under {meas_root!r}; run 'simulate' first")
    params = _params_path(cfg) if method == "diffusion" else None
    if method == "diffusion":
        _guidance_config(cfg, 0)
    else:
        _solver_config(cfg)
    recon = cfg.path("recon_dir", "recon")
    scans = sorted(os.listdir(meas_root)) if scans is None else scans
    work = []
    for scan in scans:
        out_dir = os.path.join(recon, method, scan)
        _prepare_dir(out_dir, force)
        for pid in sorted(os.listdir(os.path.join(meas_root, scan))):
            work.append((cfg, method, scan, pid, os.path.join(meas_root, scan, pid), out_dir, params))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_job, work))
    else:
        for job in work:
            _run_job(job)
    return recon


# evaluate --------------------------------------------------------------------
def cmd_evaluate(
    cfg: ExperimentConfig, force: bool = False, recon_dir: str | None = None, reference_dir: str | None = None
) -> tuple[str, str]:
    """Per-image and grouped (method, scan) metrics; writes report.csv and summary.csv."""
    recon = recon_dir or cfg.path("recon_dir", "recon")
    refs_dir = reference_dir or os.path.join(cfg.path("dataset_dir", "data"), "phantoms")
    if not os.path.isdir(recon):
        raise ConfigError(f"no reconstructions under {recon!r}")
    if not os.path.isdir(refs_dir):
        raise ConfigError(f"no reference objects under {refs_dir!r}")
    ref_ids = _ids(refs_dir)
    refs = {i: read_field(os.path.join(refs_dir, i + ".ptyf")) for i in ref_ids}
    out_dir = cfg.values["output_dir"]
    report_path = os.path.join(out_dir, "report.csv")
    summary_path = os.path.join(out_dir, "summary.csv")
    for p in (report_path, summary_path):
        if os.path.exists(p) and not force:
            raise ConfigError(f"{p!r} exists (use --force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)

    rows, summary = [], []
    for method in sorted(os.listdir(recon)):
        mdir = os.path.join(recon, method)
        if not os.path.isdir(mdir):
            continue
        for scan in sorted(os.listdir(mdir)):
            sdir = os.path.join(mdir, scan)
            ids = _ids(sdir)
            missing_ref = sorted(set(ids) - set(ref_ids))
            missing_rec = sorted(set(ref_ids) - set(ids))
            if missing_ref or missing_rec:
                raise ConfigError(
                    f"id mismatch in {method}/{scan}: no reference for {missing_ref}, no reconstruction for {missing_rec}"
                )
            kind, ov = _parse_scan_key(scan)
            vals = []
            for i in ids:
                est = read_field(os.path.join(sdir, i + ".ptyf"))
                n, ph = nrmse_phase_aligned(est, refs[i])
                s = ssim_magnitude(est, refs[i])
                vals.append((n, s))
                rows.append([method, scan, _fmt(ov), kind, i, _fmt(n), _fmt(s), _fmt(ph)])
            v = np.array(vals)
            summary.append(
                [method, scan, _fmt(ov), kind, len(ids), _fmt(v[:, 0].mean()), _fmt(v[:, 0].std()),
                 _fmt(v[:, 1].mean()), _fmt(v[:, 1].std())]
            )
    with open(report_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scan", "overlap", "positions", "image_id", "nrmse", "ssim", "phase"])
        w.writerows(rows)
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scan", "overlap", "positions", "n", "nrmse_mean", "nrmse_std_pop",
                    "ssim_mean", "ssim_std_pop"])
        w.writerows(summary)
    return report_path, summary_path


def read_summary(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# sweep -----------------------------------------------------------------------
def _write_tables(cfg: ExperimentConfig, summary: list[dict], methods) -> tuple[str, str]:
    out = cfg.values["output_dir"]
    by = {(r["method"], r["positions"], float(r["overlap"])): r for r in summary}
    t1 = os.path.join(out, "table1.csv")
    with open(t1, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["overlap"]
        for m in methods:
            head += [f"{m}_nrmse_mean", f"{m}_nrmse_std", f"{m}_ssim_mean", f"{m}_ssim_std"]
        w.writerow(head)
        for ov in cfg.overlaps:
            row = [_fmt(ov)]
            for m in methods:
                r = by.get((m, "raster", ov))
                row += ["N/A"] * 4 if r is None else [r["nrmse_mean"], r["nrmse_std_pop"], r["ssim_mean"], r["ssim_std_pop"]]
            w.writerow(row)
    t2 = os.path.join(out, "table2.csv")
    with open(t2, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["overlap", "positions", "nrmse_mean", "nrmse_std", "ssim_mean", "ssim_std", "nrmse_rel_change"])
        for ov in cfg.jitter_overlaps if cfg.jitter > 0 else ():
            base = by.get(("diffusion", "raster", ov))
            jit = by.get(("diffusion", "jitter", ov))
            for kind, r in (("raster", base), ("jittered", jit)):
                if r is None:
                    continue
                change = ""
                if kind == "jittered" and base is not None:
                    change = _fmt(float(r["nrmse_mean"]) / float(base["nrmse_mean"]) - 1.0)
                w.writerow([_fmt(ov), kind, r["nrmse_mean"], r["nrmse_std_pop"], r["ssim_mean"], r["ssim_std_pop"], change])
    return t1, t2


def cmd_sweep(cfg: ExperimentConfig, force: bool = False, jobs: int = 1) -> tuple[str, str]:
    """Simulate, train once, reconstruct every method and scan, evaluate, tabulate.

    With ``params_file`` set the sweep reuses that model instead of training.
    Diffusion runs on the raster scans listed in ``diffusion_overlaps`` (all
    overlaps when empty) plus every jittered scan.
    """
    methods = list(cfg.methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    out = cfg.values["output_dir"]
    _prepare_dir(out, force)
    _write_resolved(cfg, out)
    cmd_simulate(cfg, force)
    trained = 0
    if "diffusion" in methods and not cfg.params_file:
        cmd_train(cfg, force)
        trained += 1
    raster = [_scan_key("raster", ov) for ov in cfg.overlaps]
    jittered = [_scan_key("jitter", ov) for ov in cfg.jitter_overlaps] if cfg.jitter > 0 else []
    for m in methods:
        if m == "diffusion":
            dov = cfg.diffusion_overlaps or cfg.overlaps
            scans = [_scan_key("raster", ov) for ov in dov] + jittered
        else:
            scans = raster
        cmd_reconstruct(cfg, force, jobs, method=m, scans=scans)
    _, summary = cmd_evaluate(cfg, force)
    with open(os.path.join(out, "sweep_log.txt"), "w") as fh:
        fh.write(f"training_runs = {trained}\nmethods = {','.join(methods)}\n")
    return _write_tables(cfg, read_summary(summary), methods)


# entry point -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptychodiff", description="Desk-scale ptychography experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "reconstruct", "evaluate", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="key = value experiment file")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for reconstruction")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "reconstruct":
            sp.add_argument("--method", default=None, help="rpie, awf or diffusion (overrides config)")
        if name == "evaluate":
            sp.add_argument("--recon", default=None, help="reconstruction directory")
            sp.add_argument("--reference", default=None, help="reference object directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "simulate":
            print(cmd_simulate(cfg, args.force))
        elif args.command == "train":
            print(cmd_train(cfg, args.force))
        elif args.command == "reconstruct":
            print(cmd_reconstruct(cfg, args.force, args.jobs, method=args.method))
        elif args.command == "evaluate":
            print("\n".join(cmd_evaluate(cfg, args.force, args.recon, args.reference)))
        else:
            print("\n".join(cmd_sweep(cfg, args.force, args.jobs)))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, GuidanceBlowupError, DivergedError, FormatError, ShapeError, OSError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0
