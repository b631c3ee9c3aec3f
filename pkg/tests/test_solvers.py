import numpy as np
import pytest

from conftest import random_complex
from ptychodiff.field import make_rng
from ptychodiff.metrics import nrmse_phase_aligned
from ptychodiff.ptycho import (
    Probe,
    ScanOperator,
    forward_amplitudes,
    make_phantom,
    make_probe,
    measure,
    overlap_to_step,
    raster_grid,
)
from ptychodiff.solvers import (
    SolverConfig,
    amplitude_fidelity,
    awf_loss_grad,
    awf_solve,
    initial_object,
    rpie_step,
    solve,
    write_trace_csv,
)


def desk_instance(n=32, w=8, overlap=0.75, seed=0, photon_max=None):
    probe = make_probe(w)
    grid = raster_grid(n, w, overlap_to_step(overlap, w)[0], overlap)
    obj = make_phantom(n, seed).object
    ms = measure(forward_amplitudes(obj, probe, grid), grid, probe, photon_max, seed=seed, noiseless=photon_max is None)
    return obj, ms


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(rpie_alpha=0.0)
    with pytest.raises(ValueError):
        SolverConfig(init_mode="zeros")


def test_rpie_fixed_point():
    obj, ms = desk_instance()
    out = rpie_step(obj, ms.probe, ms.grid, ms.patterns)
    np.testing.assert_allclose(out, obj, atol=1e-12)


def test_rpie_single_position_fidelity_decreases(rng):
    probe = Probe(np.ones((8, 8), complex))
    grid = raster_grid(8, 8, 8)
    op = ScanOperator(probe, grid)
    y = np.abs(op.forward(random_complex(rng, (8, 8))))
    f = random_complex(rng, (8, 8))
    before = amplitude_fidelity(op, f, y)
    after = amplitude_fidelity(op, rpie_step(f, probe, grid, y), y)
    assert after <= before


def test_rpie_invalid_probe():
    grid = raster_grid(8, 4, 4)
    with pytest.raises(ValueError):
        rpie_step(np.ones((8, 8)), Probe(np.zeros((4, 4), complex)), grid, np.zeros((4, 4, 4)))


def test_awf_gradient_zero_at_consistent_data():
    obj, ms = desk_instance(16, 8, 0.5)
    _, g = awf_loss_grad(ScanOperator(ms.probe, ms.grid), obj, ms.patterns)
    assert np.abs(g).max() < 1e-12


def test_awf_gradient_finite_differences(rng):
    probe = Probe(random_complex(rng, (4, 4)))
    grid = raster_grid(8, 4, 2)
    op = ScanOperator(probe, grid)
    y = np.abs(op.forward(random_complex(rng, (8, 8))))
    f = random_complex(rng, (8, 8))
    _, g = awf_loss_grad(op, f, y)
    h = 1e-6
    for k in rng.choice(64, size=12, replace=False):
        e = np.zeros(64, complex)
        e[k] = 1
        e = e.reshape(8, 8)
        for unit, part in ((1, g.real), (1j, g.imag)):
            fd = (awf_loss_grad(op, f + h * unit * e, y)[0] - awf_loss_grad(op, f - h * unit * e, y)[0]) / (2 * h)
            assert abs(fd - part.flat[k]) <= 1e-6 * max(1.0, abs(part.flat[k]))


def test_awf_monotone_loss():
    _, ms = desk_instance(32, 8, 0.5, photon_max=1e4)
    trace = awf_solve(ms, SolverConfig(iterations=60))
    assert np.all(np.diff(trace.fidelity) <= 0)


def test_solvers_are_pure_and_deterministic():
    _, ms = desk_instance(32, 8, 0.5, photon_max=1e4)
    y = ms.patterns.copy()
    for method in ("rpie", "awf"):
        cfg = SolverConfig(iterations=20, seed=3, init_mode="random")
        a, b = solve(method, ms, cfg), solve(method, ms, cfg)
        assert a.fidelity == b.fidelity
        np.testing.assert_array_equal(a.obj, b.obj)
        np.testing.assert_array_equal(ms.patterns, y)


def test_unknown_method():
    _, ms = desk_instance(16, 8, 0.5)
    with pytest.raises(ValueError, match="rpie"):
        solve("epie", ms, SolverConfig(iterations=1))


def test_initial_objects():
    np.testing.assert_array_equal(initial_object(4, "flat", 0), np.full((4, 4), 0.9 + 0j))
    r = initial_object(4, "random", 0)
    np.testing.assert_allclose(np.abs(r), 1.0)
    np.testing.assert_array_equal(r, initial_object(4, "random", 0))


@pytest.mark.parametrize("method", ["rpie", "awf"])
def test_small_noiseless_convergence(method):
    obj, ms = desk_instance(32, 8, 0.75)
    trace = solve(method, ms, SolverConfig(iterations=300))
    assert nrmse_phase_aligned(trace.obj, obj)[0] < 0.05


def test_early_stop_shortens_trace():
    _, ms = desk_instance(16, 8, 0.75, photon_max=1e3)
    trace = solve("awf", ms, SolverConfig(iterations=2000, early_stop_tol=1e-6, early_stop_patience=5))
    assert trace.iterations < 2000


def test_trace_csv(tmp_path):
    _, ms = desk_instance(16, 8, 0.5)
    trace = solve("rpie", ms, SolverConfig(iterations=3))
    write_trace_csv(tmp_path / "t.csv", trace)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,fidelity" and len(lines) == 4
