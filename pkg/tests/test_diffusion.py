import math

import numpy as np
import pytest

from ptychodiff.diffusion import (
    GaussianMixtureScore,
    denoising_step,
    gm_predict_eps,
    make_schedule,
    noising_step,
    tweedie_x0,
    write_schedule_csv,
)


class ZeroEps:
    def predict_eps(self, x, t):
        return np.zeros_like(x)


def desk_schedule():
    return make_schedule(200, 5e-4, 0.1)


def test_schedule_invariants():
    s = make_schedule(1000)
    b, ab, sig = s.beta[1:], s.alpha_bar[1:], s.sigma_tilde[1:]
    assert s.N == 1000
    assert s.alpha_bar[1] == 1 - s.beta[1]
    assert np.all((b > 0) & (b < 1)) and np.all(np.diff(b) > 0)
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    assert sig[0] == 0 and np.all(sig <= np.sqrt(b) + 1e-15)
    t = np.arange(2, 1001)
    np.testing.assert_allclose(
        s.sigma_tilde[t] ** 2, (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]) * s.beta[t], rtol=1e-12
    )


def test_schedule_terminal_value():
    prod = 1.0
    for k in range(1000):
        prod *= 1 - (1e-4 + (0.02 - 1e-4) * k / 999)
    ab = make_schedule(1000).alpha_bar[1000]
    assert ab == pytest.approx(prod, rel=1e-10)
    assert ab == pytest.approx(4.0e-5, rel=0.02)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 1e-4, 1.0)])
def test_schedule_errors(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_noising_j_zero_consumes_no_draw():
    s = desk_schedule()
    rng = np.random.default_rng(0)
    x = np.ones(4)
    assert noising_step(x, 5, 0, s, rng) is x
    assert rng.standard_normal() == np.random.default_rng(0).standard_normal()


def test_noising_variance_monte_carlo():
    s = desk_schedule()
    rng = np.random.default_rng(1)
    x = np.full(10_000, 0.7)
    out = noising_step(x, 20, 10, s, rng)
    ratio = s.alpha_bar[30] / s.alpha_bar[20]
    assert abs(np.var(out) / (1 - ratio) - 1) < 0.03
    assert abs(np.mean(out) - np.sqrt(ratio) * 0.7) < 0.02


def test_noising_jumps_compose():
    s = desk_schedule()
    ab = s.alpha_bar
    one = np.sqrt(ab[40] / ab[10])
    two = np.sqrt(ab[25] / ab[10]) * np.sqrt(ab[40] / ab[25])
    assert one == pytest.approx(two, rel=1e-14)
    var_two = (1 - ab[25] / ab[10]) * ab[40] / ab[25] + (1 - ab[40] / ab[25])
    assert var_two == pytest.approx(1 - ab[40] / ab[10], rel=1e-12)


def test_noising_range():
    s = desk_schedule()
    with pytest.raises(ValueError):
        noising_step(np.zeros(2), 195, 10, s, np.random.default_rng())


def test_denoising_identity_limit():
    s = make_schedule(10, 1e-12, 1e-12)
    x = np.random.default_rng(2).standard_normal(8)
    out = denoising_step(x, 5, ZeroEps(), s, np.random.default_rng(0))
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_final_step_is_deterministic():
    s = desk_schedule()
    x = np.random.default_rng(3).standard_normal(8)
    a = denoising_step(x, 1, ZeroEps(), s, np.random.default_rng(0))
    b = denoising_step(x, 1, ZeroEps(), s, np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)


def test_tweedie_inverts_forward():
    s = desk_schedule()
    rng = np.random.default_rng(4)
    for t in (1, 17, 100, 200):
        x0, eps = rng.standard_normal(16), rng.standard_normal(16)
        xt = np.sqrt(s.alpha_bar[t]) * x0 + np.sqrt(1 - s.alpha_bar[t]) * eps
        np.testing.assert_allclose(tweedie_x0(xt, t, None, s, eps=eps), x0, atol=1e-10 / np.sqrt(s.alpha_bar[t]))
    xt = rng.standard_normal(16)
    np.testing.assert_allclose(tweedie_x0(xt, 50, ZeroEps(), s), xt / np.sqrt(s.alpha_bar[50]))


def test_tweedie_gaussian_conjugacy(rng):
    s = desk_schedule()
    mu, v = rng.standard_normal((1, 2, 3, 3)), 0.3
    model = GaussianMixtureScore(mu, v, s)
    for t in (3, 60, 180):
        ab = s.alpha_bar[t]
        xt = rng.standard_normal((2, 3, 3))
        expected = mu[0] + v * np.sqrt(ab) / (ab * v + 1 - ab) * (xt - np.sqrt(ab) * mu[0])
        np.testing.assert_allclose(tweedie_x0(xt, t, model, s), expected, atol=1e-8)


def test_ancestral_sampling_gaussian_oracle():
    s = desk_schedule()
    mu = np.full((1, 2, 2, 2), 0.8)
    mu[0, 1] = -0.5
    v = 0.25
    model = GaussianMixtureScore(mu, v, s)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((500, 2, 2, 2))
    for t in range(s.N, 0, -1):
        x = denoising_step(x, t, model, s, rng)
    assert np.linalg.norm(x.mean(axis=0) - mu[0]) < 0.05 * np.linalg.norm(mu[0])
    assert abs(x.var(axis=0).mean() / v - 1) < 0.10


def test_chain_mean_recursion(rng):
    s = desk_schedule()
    mu, v = rng.standard_normal((1, 6)), 0.4
    model = GaussianMixtureScore(mu, v, s)
    m = rng.standard_normal(6)
    d = m - np.sqrt(s.alpha_bar[s.N]) * mu[0]
    for t in range(s.N, 0, -1):
        ab, beta = s.alpha_bar[t], s.beta[t]
        s2 = ab * v + 1 - ab
        eps = model.predict_eps(m, t)
        m = (m - beta / np.sqrt(1 - ab) * eps) / np.sqrt(1 - beta)
        d = d * (1 - beta / s2) / np.sqrt(1 - beta)
        np.testing.assert_allclose(m, np.sqrt(s.alpha_bar[t - 1]) * mu[0] + d, atol=1e-6)


def test_gm_eps_zero_at_mode_and_midpoint():
    s = desk_schedule()
    mu = np.array([[0.5, -0.2]])
    t = 40
    one = GaussianMixtureScore(mu, 0.2, s)
    assert np.abs(one.predict_eps(np.sqrt(s.alpha_bar[t]) * mu[0], t)).max() < 1e-15
    two = GaussianMixtureScore(np.array([[1.0, 0.5], [-1.0, -0.5]]), 0.2, s)
    assert np.abs(gm_predict_eps(np.zeros(2), t, two)).max() < 1e-15


def test_gm_score_matches_log_density_fd(rng):
    s = desk_schedule()
    model = GaussianMixtureScore(rng.standard_normal((3, 5)), 0.3, s, weights=[0.2, 0.5, 0.3])
    t, h = 30, 1e-5
    x = rng.standard_normal(5)
    grad = np.array(
        [(model.log_density(x + h * e, t)[0] - model.log_density(x - h * e, t)[0]) / (2 * h) for e in np.eye(5)]
    )
    expected = -np.sqrt(1 - s.alpha_bar[t]) * grad
    np.testing.assert_allclose(model.predict_eps(x, t), expected, rtol=1e-6, atol=1e-9)


def test_gm_vjp_matches_jacobian(rng):
    s = desk_schedule()
    model = GaussianMixtureScore(rng.standard_normal((3, 4)), 0.5, s)
    x, g, t, h = rng.standard_normal(4), rng.standard_normal(4), 20, 1e-6
    jac = np.stack(
        [(model.predict_eps(x + h * e, t) - model.predict_eps(x - h * e, t)) / (2 * h) for e in np.eye(4)], axis=1
    )
    eps, vjp = model.eps_with_vjp(x, t)
    np.testing.assert_allclose(eps, model.predict_eps(x, t))
    np.testing.assert_allclose(vjp(g), jac.T @ g, rtol=1e-6, atol=1e-9)


def test_gm_validation():
    s = desk_schedule()
    with pytest.raises(ValueError):
        GaussianMixtureScore(np.zeros((2, 3)), 0.0, s)
    with pytest.raises(ValueError):
        GaussianMixtureScore(np.zeros((2, 3)), 1.0, s, weights=[0.7, 0.7])


def test_schedule_csv(tmp_path):
    s = make_schedule(5)
    write_schedule_csv(tmp_path / "s.csv", s)
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "t,beta,alpha_bar,sigma_tilde" and len(rows) == 6
    assert math.isclose(float(rows[1].split(",")[1]), 1e-4)
