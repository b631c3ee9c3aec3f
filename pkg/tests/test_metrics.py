import numpy as np
import pytest
from skimage.metrics import structural_similarity

from conftest import random_complex
from ptychodiff.metrics import evaluate_set, nrmse_phase_aligned, ssim_magnitude, write_report_csv


def test_nrmse_identity():
    f = random_complex(np.random.default_rng(0), (8, 8))
    assert nrmse_phase_aligned(f, f) == (pytest.approx(0.0, abs=1e-15), pytest.approx(0.0, abs=1e-15))


def test_nrmse_global_phase():
    f = random_complex(np.random.default_rng(1), (8, 8))
    n, phase = nrmse_phase_aligned(np.exp(1j * np.pi / 3) * f, f)
    assert n < 1e-14
    assert phase == pytest.approx(-np.pi / 3)


@pytest.mark.parametrize("theta", np.linspace(-np.pi, np.pi, 9))
def test_nrmse_phase_invariance(theta, rng):
    a, b = random_complex(rng, (8, 8)), random_complex(rng, (8, 8))
    base = nrmse_phase_aligned(a, b)[0]
    assert abs(nrmse_phase_aligned(np.exp(1j * theta) * a, b)[0] - base) < 1e-12


def test_nrmse_beats_grid_search(rng):
    a, b = random_complex(rng, (8, 8)), random_complex(rng, (8, 8))
    n, _ = nrmse_phase_aligned(a, b)
    grid = np.exp(1j * np.linspace(0, 2 * np.pi, 3600, endpoint=False))
    best = min(np.linalg.norm(c * a - b) for c in grid) / np.linalg.norm(b)
    assert n <= best + 1e-12


def test_nrmse_no_amplitude_correction(rng):
    f = random_complex(rng, (8, 8))
    assert nrmse_phase_aligned(2 * f, f)[0] == pytest.approx(1.0)


def test_nrmse_orthogonal_uses_unit_factor():
    a = np.array([1.0, 0.0], complex)
    b = np.array([0.0, 1.0], complex)
    n, phase = nrmse_phase_aligned(a, b)
    assert phase == 0.0 and n == pytest.approx(np.sqrt(2))


def test_nrmse_errors():
    with pytest.raises(ValueError):
        nrmse_phase_aligned(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        nrmse_phase_aligned(np.ones((2, 2)), np.ones((2, 3)))


def test_ssim_identical():
    a = np.random.default_rng(2).random((32, 32))
    assert ssim_magnitude(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_closed_form():
    c1v, c2v = 0.3, 0.7
    C1 = (0.01 * 1.0) ** 2
    expected = (2 * c1v * c2v + C1) / (c1v**2 + c2v**2 + C1)
    got = ssim_magnitude(np.full((16, 16), c1v), np.full((16, 16), c2v))
    assert got == pytest.approx(expected, abs=1e-10)


def test_ssim_matches_skimage(rng):
    a = np.abs(random_complex(rng, (48, 40)))
    b = a + 0.3 * rng.random((48, 40))
    rng_b = b.max() - b.min()
    ref = structural_similarity(
        a, b, data_range=rng_b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert abs(ssim_magnitude(a, b) - ref) < 1e-6


def test_ssim_symmetry_with_fixed_range(rng):
    a, b = rng.random((24, 24)), rng.random((24, 24))
    assert abs(ssim_magnitude(a, b, data_range=1.0) - ssim_magnitude(b, a, data_range=1.0)) < 1e-12


def test_ssim_bounds_and_errors(rng):
    s = ssim_magnitude(rng.random((16, 16)), rng.random((16, 16)))
    assert -1 <= s <= 1
    with pytest.raises(ValueError):
        ssim_magnitude(np.ones((8, 8)), np.ones((8, 8)))


def test_evaluate_set_statistics(rng):
    f = random_complex(rng, (16, 16))
    single = evaluate_set([f], [f])
    assert single.nrmse_std == 0 and single.ssim_mean == pytest.approx(1.0)
    same = evaluate_set([2 * f] * 3, [f] * 3)
    assert same.nrmse_std == pytest.approx(0.0, abs=1e-15)
    # nrmse values 1 and 3 -> mean 2, population std 1
    rep = evaluate_set([2 * f, 4 * f], [f, f])
    assert rep.nrmse_mean == pytest.approx(2.0) and rep.nrmse_std == pytest.approx(1.0)
    with pytest.raises(ValueError):
        evaluate_set([], [])
    with pytest.raises(ValueError):
        evaluate_set([f], [f, f])


def test_report_csv(tmp_path, rng):
    f = random_complex(rng, (16, 16))
    rep = evaluate_set([f, 2 * f], [f, f], ids=["a", "b"])
    write_report_csv(tmp_path / "r.csv", rep)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "image_id,nrmse,ssim,phase"
    assert lines[1].startswith("a,") and lines[3].startswith("mean(std_pop)")
