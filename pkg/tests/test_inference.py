import math

import numpy as np
import pytest
from scipy.optimize import minimize

from bip.forward import LinearForward, build_blur_1d, truth_field_1d
from bip.inference import (
    NotPositiveDefinite,
    ObjectiveConfig,
    ensemble,
    last_layer_posterior,
    make_objective,
    objective,
    optimize,
    pointwise_stats,
    regularizer,
)
from bip.network import Grid, NetworkSpec, forward, hidden_features, initial_weights, sample_weights
from bip.optim import NonFiniteObjective, adam, lbfgs
from bip.stable import make_rng


def tiny_problem(n_grid=16, n_obs=6, widths=(4, 3), noise=0.1, seed=0):
    rng = make_rng(seed)
    grid = Grid(1, n_grid)
    A = rng.standard_normal((n_obs, n_grid)) / n_grid
    fwd = LinearForward(A, grid, noise, np.linspace(-1, 1, n_obs)[:, None])
    spec = NetworkSpec.from_prior(1, widths, "cauchy_gaussian")
    return fwd, spec, rng.standard_normal(n_obs)


def fd_grad(f, w, h=1e-6):
    return np.array([(f(w + h * e)[0] - f(w - h * e)[0]) / (2 * h) for e in np.eye(w.size)])


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig("laplace")
    with pytest.raises(ValueError):
        ObjectiveConfig(adam_lr=0.0)
    with pytest.raises(ValueError):
        ObjectiveConfig(lbfgs_memory=0)
    with pytest.raises(ValueError):
        ObjectiveConfig(init="zeros")


@pytest.mark.parametrize("kind", ["gaussian", "cauchy", "cauchy_gaussian"])
def test_regularizer_values_and_gradients(kind):
    spec = NetworkSpec.from_prior(1, [3, 2], "cauchy")
    val, grad = regularizer(kind, np.zeros(spec.n_params), spec)
    assert val == 0.0 and not np.any(grad)
    w = make_rng(1).standard_normal(spec.n_params) * 2
    fd = fd_grad(lambda v: regularizer(kind, v, spec), w)
    np.testing.assert_allclose(regularizer(kind, w, spec)[1], fd, rtol=1e-7, atol=1e-8)


def test_regularizer_hand_values():
    val, grad = regularizer("cauchy", np.array([1.0]))
    assert val == pytest.approx(math.log(2)) and grad[0] == pytest.approx(1.0)
    val, grad = regularizer("gaussian", np.array([3.0]))
    assert val == 4.5 and grad[0] == 3.0
    spec = NetworkSpec.from_prior(1, [2], "cauchy")
    w = np.array([1.0, 1.0, 1.0, 1.0, 2.0, 2.0])  # V0, b0, output row
    val, _ = regularizer("cauchy_gaussian", w, spec)
    assert val == pytest.approx(4 * math.log(2) + 4.0)
    with pytest.raises(ValueError):
        regularizer("cauchy_gaussian", w)


def test_cauchy_penalty_below_gaussian_for_large_weights():
    rng = make_rng(2)
    for _ in range(20):
        w = rng.uniform(2, 50, 100) * rng.choice([-1, 1], 100)
        assert regularizer("cauchy", w)[0] <= regularizer("gaussian", w)[0]


def test_objective_zero_case_and_gradient():
    fwd, spec, y = tiny_problem()
    zero = np.zeros(spec.n_params)
    val, _ = objective(fwd, spec, zero, np.zeros(fwd.n_obs), "cauchy")
    assert val == 0.0
    val, _ = objective(fwd, spec, zero, y, "gaussian")
    assert val == pytest.approx(fwd.misfit(np.zeros(16), y))
    w = 0.5 * make_rng(3).standard_normal(spec.n_params)
    for kind in ("gaussian", "cauchy", "cauchy_gaussian"):
        f = make_objective(fwd, spec, y, kind)
        g = f(w)[1]
        fd = fd_grad(f, w)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_adam_single_step_by_hand():
    # J(w) = 0.5 |w - c|^2, gradient w - c; first Adam step moves each
    # coordinate by -lr * sign(g) (bias-corrected m/sqrt(v) = g/|g|)
    c = np.array([1.0, -2.0, 0.5])
    f = lambda w: (0.5 * float((w - c) @ (w - c)), w - c)
    w, trace = adam(f, np.zeros(3), 1, lr=0.01)
    g = -c
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(w, expected, rtol=1e-12)
    assert trace == [f(np.zeros(3))[0]]


def test_lbfgs_convex_quadratic():
    rng = make_rng(4)
    M = rng.standard_normal((20, 20))
    H = M @ M.T + np.eye(20)
    b = rng.standard_normal(20)
    f = lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b)
    x, trace = lbfgs(f, np.zeros(20), 200, gtol=1e-8)
    # scipy's L-BFGS-B needs ~60 iterations here and stalls near 1e-7
    ref = minimize(f, np.zeros(20), jac=True, method="L-BFGS-B",
                   options=dict(gtol=1e-10, ftol=0, maxiter=200))
    assert np.linalg.norm(f(x)[1]) <= max(1e-7, np.linalg.norm(ref.jac))
    np.testing.assert_allclose(x, np.linalg.solve(H, b), rtol=1e-6)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_lbfgs_monotone_on_network_objective():
    fwd, spec, y = tiny_problem()
    f = make_objective(fwd, spec, y, "cauchy")
    _, trace = lbfgs(f, initial_weights(spec, 0), 100)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_nonfinite_objective_aborts_with_trace():
    calls = []

    def f(x):
        calls.append(1)
        v = float("nan") if len(calls) > 3 else float(x @ x)
        return v, 2 * x

    with pytest.raises(NonFiniteObjective) as err:
        adam(f, np.ones(2), 10)
    assert len(err.value.trace) == 3


def test_optimize_uses_configured_start():
    fwd, spec, y = tiny_problem()
    cfg = ObjectiveConfig("cauchy", adam_steps=0, lbfgs_steps=0, init_seed=3)
    w, trace = optimize(fwd, spec, y, cfg)
    np.testing.assert_array_equal(w, initial_weights(spec, 3))
    w, _ = optimize(fwd, spec, y, ObjectiveConfig("cauchy", 0, 0.01, 0, init="prior", init_seed=3))
    np.testing.assert_array_equal(w, sample_weights(spec, 3))
    assert len(trace) == 1


def test_optimize_fits_problem_to_noise_level():
    fwd = build_blur_1d()
    truth = truth_field_1d()
    y = fwd.observe(truth, 12345)
    spec = NetworkSpec.from_prior(1, [50, 50, 100], "cauchy")
    w, trace = optimize(fwd, spec, y, ObjectiveConfig("cauchy"))
    misfit = fwd.misfit(forward(spec, w, fwd.grid.points()), y)
    assert misfit < 1.1 * fwd.misfit(truth, y)
    assert trace[-1] < trace[0]


def test_pointwise_stats_population_std():
    f = np.array([[0.0, 1.0], [2.0, 1.0]])
    mean, std = pointwise_stats(f)
    np.testing.assert_array_equal(mean, [1.0, 1.0])
    np.testing.assert_array_equal(std, [1.0, 0.0])


def test_ensemble_identical_seeds_and_permutation_invariance():
    fwd, spec, y = tiny_problem()
    cfg = ObjectiveConfig("cauchy", adam_steps=20, lbfgs_steps=20)
    same = ensemble(fwd, spec, y, cfg, seeds=[5, 5])
    assert not np.any(same.pointwise_std.values)
    a = ensemble(fwd, spec, y, cfg, seeds=[1, 2, 3])
    b = ensemble(fwd, spec, y, cfg, seeds=[3, 1, 2])
    np.testing.assert_allclose(a.pointwise_mean.values, b.pointwise_mean.values, atol=1e-14)
    np.testing.assert_allclose(a.pointwise_std.values, b.pointwise_std.values, atol=1e-14)
    lo, hi = a.band()
    np.testing.assert_allclose(hi - lo, 2 * 1.96 * a.pointwise_std.values)
    assert len(a.minimizers) == len(a.fields) == len(a.objective_values) == 3
    with pytest.raises(ValueError):
        ensemble(fwd, spec, y, cfg, n_restarts=1)


def test_ensemble_records_failures(monkeypatch):
    import bip.inference as inf

    fwd, spec, y = tiny_problem()
    real = inf.optimize

    def flaky(fwd, spec, y, config, w0=None):
        if config.init_seed == 1:
            raise NonFiniteObjective("boom", [1.0])
        return real(fwd, spec, y, config, w0)

    monkeypatch.setattr(inf, "optimize", flaky)
    cfg = ObjectiveConfig("cauchy", adam_steps=5, lbfgs_steps=5)
    res = ensemble(fwd, spec, y, cfg, seeds=[0, 1, 2])
    assert res.seeds == [0, 2] and list(res.failures) == [1]
    assert "boom" in res.failures[1]
    with pytest.raises(RuntimeError):
        ensemble(fwd, spec, y, cfg, seeds=[1, 1])


def _dense_last_layer(fwd, spec, w, y, prior_prec=1.0):
    basis = spec.layer_scaling[-1] * hidden_features(spec, w, fwd.grid.points())
    F = fwd.matrix @ basis
    P = F.T @ F / fwd.noise_std**2 + prior_prec * np.eye(F.shape[1])
    cov = np.linalg.inv(P)
    return cov @ F.T @ y / fwd.noise_std**2, P


@pytest.mark.parametrize("d_last", [3, 10, 50])
def test_last_layer_matches_dense_oracle(d_last):
    fwd, _, y = tiny_problem(n_grid=40, n_obs=30)
    spec = NetworkSpec.from_prior(1, [6, d_last], "cauchy")
    w = sample_weights(spec, 1)
    post = last_layer_posterior(fwd, spec, w, y)
    nu, P = _dense_last_layer(fwd, spec, w, y)
    np.testing.assert_allclose(post.mean_coeffs, nu, atol=1e-10, rtol=1e-10)
    np.testing.assert_allclose(post.precision, P, atol=1e-10, rtol=1e-10)
    assert np.max(np.abs(post.precision - post.precision.T)) <= 1e-12
    np.testing.assert_allclose(post.covariance(), np.linalg.inv(P), atol=1e-10)
    basis = post.basis_fields
    np.testing.assert_allclose(post.std_field().values,
                               np.sqrt(np.diag(basis @ np.linalg.inv(P) @ basis.T)), atol=1e-10)
    post2 = last_layer_posterior(fwd, spec, w, y, prior_consistent_precision=True)
    np.testing.assert_allclose(post2.mean_coeffs, _dense_last_layer(fwd, spec, w, y, d_last)[0],
                               atol=1e-10)


def test_last_layer_limits():
    fwd, spec, y = tiny_problem()
    w = sample_weights(spec, 2)
    vague = last_layer_posterior(fwd.with_noise(1e6), spec, w, y)
    np.testing.assert_allclose(vague.mean_coeffs, 0.0, atol=1e-10)
    np.testing.assert_allclose(vague.covariance(), np.eye(3), atol=1e-10)
    # exact data from the network itself and tiny noise: coefficients reproduce y
    fwd2, spec2, _ = tiny_problem(n_obs=3, widths=(5, 3))
    w2 = sample_weights(spec2, 3)
    y2 = fwd2.apply(forward(spec2, w2, fwd2.grid.points()))
    post = last_layer_posterior(fwd2.with_noise(1e-4), spec2, w2, y2)
    F = fwd2.matrix @ post.basis_fields
    assert np.linalg.norm(F @ post.mean_coeffs - y2) < 1e-3


def test_last_layer_mean_improves_regularized_objective():
    fwd, spec, y = tiny_problem(n_grid=40, n_obs=30, widths=(6, 8))
    w = sample_weights(spec, 4)
    post = last_layer_posterior(fwd, spec, w, y)
    F = fwd.matrix @ post.basis_fields
    out = spec.layout.weights[-1][0]

    def J(c):
        r = F @ c - y
        return 0.5 * r @ r / fwd.noise_std**2 + 0.5 * c @ c

    assert J(post.mean_coeffs) <= J(w[out]) + 1e-8


def test_last_layer_sampling_moments():
    fwd, spec, y = tiny_problem()
    post = last_layer_posterior(fwd, spec, sample_weights(spec, 5), y)
    draws = post.sample_coeffs(100_000, make_rng(6))
    np.testing.assert_allclose(draws.mean(axis=0), post.mean_coeffs,
                               atol=5 * np.sqrt(np.diag(post.covariance()).max() / 1e5))
    np.testing.assert_allclose(np.cov(draws.T), post.covariance(), atol=0.02 * np.abs(post.covariance()).max())


def test_last_layer_not_positive_definite():
    fwd, spec, y = tiny_problem()
    w = sample_weights(spec, 5)
    bad = fwd.with_noise(1e-160)  # F^T F / eta^2 overflows
    with pytest.raises(NotPositiveDefinite):
        last_layer_posterior(bad, spec, w, y)
