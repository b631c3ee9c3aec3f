import csv
import os

import numpy as np
import pytest

from ptychodiff.cli import cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_sweep, cmd_train, main, read_summary
from ptychodiff.config import ConfigError, load_config, parse_config
from ptychodiff.diffusion import make_schedule
from ptychodiff.fieldio import read_field
from ptychodiff.guidance import dps_sample
from ptychodiff.nn.training import load_params
from ptychodiff.ptycho import forward_amplitudes, load_measurements
from ptychodiff.metrics import nrmse_phase_aligned

TINY = """
object_size = 32
probe_width = 8
phantom_count = 2
train_phantom_count = 2
overlaps = 0.25, 0.5, 0.75
jitter = 1
jitter_overlaps = 0.25
iterations = 30
schedule_steps = 10
beta_min = 0.01
beta_max = 0.5
travel_j = 2
travel_stride = 3
train_steps = 4
batch = 2
patch = 16
checkpoint_every = 2
unet_widths = 8,16
"""


def write_cfg(tmp_path, extra="", name="exp.cfg"):
    entries = dict(
        (k.strip(), v.strip()) for k, v in (line.split("=", 1) for line in (TINY + extra).splitlines() if "=" in line)
    )
    path = tmp_path / name
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return str(path)


def test_config_defaults_and_paths(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "output_dir = runs/a\n"))
    assert cfg.output_dir == str(tmp_path / "runs" / "a")
    assert cfg.overlaps == (0.25, 0.5, 0.75) and cfg.photon_max == 1e5
    assert cfg.path("dataset_dir", "data") == str(tmp_path / "runs" / "a" / "data")
    assert "object_size = 32" in cfg.dump()


@pytest.mark.parametrize("text", ["bogus_key = 1", "object_size = ten", "no equals sign", "seed = 1\nseed = 2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text, "/tmp")


def test_simulate_counts_and_determinism(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "noiseless = true\n"))
    data = cmd_simulate(cfg)
    scans = sorted(os.listdir(os.path.join(data, "meas")))
    assert scans == ["jitter-0.25", "raster-0.25", "raster-0.50", "raster-0.75"]
    manifests = [d for s in scans for d in os.listdir(os.path.join(data, "meas", s))]
    assert len(manifests) == 4 * 2
    ms = load_measurements(os.path.join(data, "meas", "raster-0.50", "p0001"))
    obj = read_field(os.path.join(data, "phantoms", "p0001.ptyf"))
    np.testing.assert_array_equal(ms.patterns, forward_amplitudes(obj, ms.probe, ms.grid))
    with pytest.raises(ConfigError):
        cmd_simulate(cfg)

    def snapshot(root):
        out = {}
        for d, _, files in os.walk(root):
            for f in files:
                out[os.path.relpath(os.path.join(d, f), root)] = open(os.path.join(d, f), "rb").read()
        return out

    before = snapshot(data)
    cmd_simulate(cfg, force=True)
    assert snapshot(data) == before


def test_pipeline_end_to_end(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    cmd_simulate(cfg)
    params = cmd_train(cfg)
    net = load_params(params)
    assert net.config.widths == (8, 16)
    model_dir = os.path.dirname(params)
    assert sorted(f for f in os.listdir(model_dir) if f.startswith("ckpt")) == ["ckpt_000002.ptyp", "ckpt_000004.ptyp"]
    with open(os.path.join(model_dir, "train_log.csv")) as fh:
        assert len(list(csv.reader(fh))) == 5

    # resuming from step 2 repeats the uninterrupted losses
    resumed = load_config(
        write_cfg(tmp_path, f"model_dir = m2\nresume_from = {os.path.join(model_dir, 'ckpt_000002.ptyp')}\n", "r.cfg")
    )
    cmd_train(resumed)
    full = [r[1] for r in csv.reader(open(os.path.join(model_dir, "train_log.csv")))][3:]
    part = [r[1] for r in csv.reader(open(os.path.join(tmp_path, "m2", "train_log.csv")))][1:]
    assert full == part

    for method in ("rpie", "awf", "diffusion"):
        cmd_reconstruct(cfg, method=method, scans=["raster-0.25"])
    recon = cfg.path("recon_dir", "recon")
    assert sorted(os.listdir(os.path.join(recon, "diffusion", "raster-0.25"))) == [
        "p0000.pgm", "p0000.ptyf", "p0000_phase.pgm", "p0000_trace.csv",
        "p0001.pgm", "p0001.ptyf", "p0001_phase.pgm", "p0001_trace.csv",
    ]
    report, summary = cmd_evaluate(cfg)
    rows = read_summary(summary)
    assert [(r["method"], r["scan"]) for r in rows] == [
        ("awf", "raster-0.25"), ("diffusion", "raster-0.25"), ("rpie", "raster-0.25")
    ]
    per_image = list(csv.DictReader(open(report)))
    rp = [float(r["nrmse"]) for r in per_image if r["method"] == "rpie"]
    assert float(rows[2]["nrmse_mean"]) == pytest.approx(np.mean(rp), rel=1e-9)
    with pytest.raises(ConfigError):
        cmd_evaluate(cfg)


def test_diffusion_j_zero_matches_plain_sampler(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "travel_j = 0\nphantom_count = 1\n"))
    cmd_simulate(cfg)
    params = cmd_train(cfg)
    cmd_reconstruct(cfg, method="diffusion", scans=["raster-0.50"])
    got = read_field(os.path.join(cfg.path("recon_dir", "recon"), "diffusion", "raster-0.50", "p0000.ptyf"))
    ms = load_measurements(os.path.join(cfg.path("dataset_dir", "data"), "meas", "raster-0.50", "p0000"))
    from ptychodiff.cli import _guidance_config

    gcfg = _guidance_config(cfg, cfg.seed)
    assert gcfg.j == 0 and gcfg.clip_x0 == 1.0
    x = dps_sample(ms, load_params(params), make_schedule(10, 0.01, 0.5), gcfg)
    from ptychodiff.field import from_two_channel

    np.testing.assert_array_equal(got, from_two_channel(x, clip=True))


def test_evaluate_identity_and_grouping(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "jitter = 0\n"))
    data = cmd_simulate(cfg)
    recon = tmp_path / "fake"
    for method in ("a", "b"):
        for ov in ("0.25", "0.50", "0.75"):
            d = recon / method / f"raster-{ov}"
            d.mkdir(parents=True)
            for pid in ("p0000", "p0001"):
                (d / f"{pid}.ptyf").write_bytes(open(os.path.join(data, "phantoms", f"{pid}.ptyf"), "rb").read())
    _, summary = cmd_evaluate(cfg, recon_dir=str(recon))
    rows = read_summary(summary)
    assert len(rows) == 6
    assert all(float(r["nrmse_mean"]) == 0 and float(r["ssim_mean"]) == 1 for r in rows)
    os.remove(recon / "a" / "raster-0.25" / "p0001.ptyf")
    with pytest.raises(ConfigError, match="p0001"):
        cmd_evaluate(cfg, force=True, recon_dir=str(recon))


def test_sweep_tables(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "diffusion_overlaps = 0.25\nphantom_count = 1\n"))
    t1, t2 = cmd_sweep(cfg)
    rows = list(csv.DictReader(open(t1)))
    assert [r["overlap"] for r in rows] == ["0.25", "0.5", "0.75"]
    assert rows[0]["diffusion_nrmse_mean"] != "N/A" and rows[1]["diffusion_nrmse_mean"] == "N/A"
    assert all(r["rpie_nrmse_mean"] != "N/A" for r in rows)
    t2rows = list(csv.DictReader(open(t2)))
    assert [r["positions"] for r in t2rows] == ["raster", "jittered"]
    assert "training_runs = 1" in open(os.path.join(cfg.output_dir, "sweep_log.txt")).read()


def test_main_exit_codes(tmp_path, capsys):
    path = write_cfg(tmp_path)
    assert main(["simulate", "--config", path]) == 0
    assert main(["simulate", "--config", path]) == 2  # refuses to overwrite
    assert main(["reconstruct", "--config", path, "--method", "epie"]) == 2
    assert "rpie, awf, diffusion" in capsys.readouterr().err
    assert main(["reconstruct", "--config", path, "--method", "diffusion"]) == 2  # no parameter file
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["frobnicate"]) == 2
    # corrupted measurement data is a runtime failure
    p = os.path.join(load_config(path).path("dataset_dir", "data"), "meas", "raster-0.50", "p0000", "pattern_0000.ptyf")
    with open(p, "r+b") as fh:
        fh.truncate(30)
    assert main(["reconstruct", "--config", path, "--method", "rpie"]) == 3


def test_parallel_jobs_match_serial(tmp_path):
    serial = load_config(write_cfg(tmp_path, "recon_dir = r1\n"))
    cmd_simulate(serial)
    cmd_reconstruct(serial, method="rpie", scans=["raster-0.50"])
    parallel = load_config(write_cfg(tmp_path, "recon_dir = r2\n", "p.cfg"))
    cmd_reconstruct(parallel, jobs=2, method="rpie", scans=["raster-0.50"])
    for pid in ("p0000", "p0001"):
        a = (tmp_path / "r1" / "rpie" / "raster-0.50" / f"{pid}.ptyf").read_bytes()
        b = (tmp_path / "r2" / "rpie" / "raster-0.50" / f"{pid}.ptyf").read_bytes()
        assert a == b
