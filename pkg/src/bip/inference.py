"""MAP estimation, multi-start ensembles and last-layer Gaussian regression."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .forward import LinearForward
from .network import (GridField, NetworkSpec, forward_and_vjp, hidden_features, initial_weights,
                      sample_weights)
from .optim import adam, lbfgs

log = logging.getLogger(__name__)

REG_KINDS = ("gaussian", "cauchy", "cauchy_gaussian")
INIT_KINDS = ("uniform", "prior")


@dataclass
class ObjectiveConfig:
    reg_kind: str = "cauchy"
    adam_steps: int = 500
    adam_lr: float = 0.01
    lbfgs_steps: int = 1500
    lbfgs_memory: int = 10
    init_seed: int = 0
    init: str = "uniform"  # or "prior": start from a prior draw

    def __post_init__(self):
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}")
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"reg_kind must be one of {REG_KINDS}")
        if self.adam_steps < 0 or self.lbfgs_steps < 0 or self.lbfgs_memory < 1:
            raise ValueError("step counts must be non-negative and memory positive")
        if self.adam_lr <= 0:
            raise ValueError("adam_lr must be positive")


def _gauss(w):
    return 0.5 * float(w @ w), w.copy()


def _cauchy(w):
    return float(np.log1p(w * w).sum()), 2.0 * w / (1.0 + w * w)


def regularizer(reg_kind: str, w, spec: NetworkSpec | None = None):
    """Negative log prior (up to constants) and its gradient.

    ``cauchy_gaussian`` applies the Cauchy penalty to every hidden layer and
    the Gaussian one to the output weights; it needs ``spec`` for the layout.
    """
    w = np.asarray(w, dtype=float)
    if reg_kind == "gaussian":
        return _gauss(w)
    if reg_kind == "cauchy":
        return _cauchy(w)
    if reg_kind == "cauchy_gaussian":
        if spec is None:
            raise ValueError("cauchy_gaussian needs the network spec")
        out = spec.layout.weights[-1][0]
        val, grad = _cauchy(w)
        head = w[out]
        val -= float(np.log1p(head * head).sum())
        val += 0.5 * float(head @ head)
        grad[out] = head
        return val, grad
    raise ValueError(f"unknown reg_kind {reg_kind!r}")


def objective(fwd: LinearForward, spec: NetworkSpec, w, y_obs, reg_kind: str, points=None):
    """J(w) = misfit(A Psi(w)) + R(w), with gradient."""
    if points is None:
        points = fwd.grid.points()
    u, vjp = forward_and_vjp(spec, w, points)
    misfit, du = fwd.misfit_and_gradient(u, y_obs)
    reg, dreg = regularizer(reg_kind, w, spec)
    return misfit + reg, vjp(du) + dreg


def make_objective(fwd, spec, y_obs, reg_kind):
    points = fwd.grid.points()
    y_obs = np.asarray(y_obs, dtype=float)
    return lambda w: objective(fwd, spec, w, y_obs, reg_kind, points)


def optimize(fwd: LinearForward, spec: NetworkSpec, y_obs, config: ObjectiveConfig, w0=None):
    """Adam warm-up then L-BFGS from ``w0`` or the configured initialization.

    Returns ``(w, trace)`` where trace holds J at every iterate.
    """
    fun = make_objective(fwd, spec, y_obs, config.reg_kind)
    if w0 is not None:
        w = np.array(w0, dtype=float)
    elif config.init == "prior":
        w = sample_weights(spec, config.init_seed)
    else:
        w = initial_weights(spec, config.init_seed)
    trace = []
    w, trace = adam(fun, w, config.adam_steps, config.adam_lr, trace=trace)
    w, trace = lbfgs(fun, w, config.lbfgs_steps, config.lbfgs_memory, trace=trace)
    return w, np.asarray(trace)


@dataclass
class EnsembleResult:
    minimizers: list
    fields: list
    pointwise_mean: GridField
    pointwise_std: GridField
    objective_values: list
    seeds: list
    failures: dict = field(default_factory=dict)

    def band(self, z: float = 1.96):
        m, s = self.pointwise_mean.values, self.pointwise_std.values
        return m - z * s, m + z * s


def pointwise_stats(fields: np.ndarray):
    """Mean and population std over axis 0."""
    fields = np.asarray(fields, dtype=float)
    mean = fields.mean(axis=0)
    std = np.sqrt(np.maximum(((fields - mean) ** 2).mean(axis=0), 0.0))
    return mean, std


def _restart(args):
    fwd, spec, y_obs, config = args
    try:
        w, trace = optimize(fwd, spec, y_obs, config)
        return w, trace, None
    except Exception as exc:  # recorded and excluded, not fatal
        return None, None, repr(exc)


def ensemble(fwd: LinearForward, spec: NetworkSpec, y_obs, config: ObjectiveConfig,
             n_restarts: int = 10, base_seed: int = 0, seeds=None, n_jobs: int = 1) -> EnsembleResult:
    """Independent restarts with init seeds ``base_seed + j``."""
    if seeds is None:
        if n_restarts < 2:
            raise ValueError("n_restarts must be >= 2")
        seeds = [base_seed + j for j in range(n_restarts)]
    jobs = [(fwd, spec, y_obs, _with_seed(config, s)) for s in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_restart, jobs))
    else:
        results = [_restart(j) for j in jobs]
    points = fwd.grid.points()
    minimizers, fields, values, kept, failures = [], [], [], [], {}
    for seed, (w, trace, err) in zip(seeds, results):
        if err is not None:
            log.warning("restart with seed %s failed: %s", seed, err)
            failures[seed] = err
            continue
        minimizers.append(w)
        fields.append(GridField(fwd.grid, forward_and_vjp(spec, w, points)[0]))
        values.append(float(trace[-1]))
        kept.append(seed)
    if len(fields) < 1:
        raise RuntimeError(f"all restarts failed: {failures}")
    mean, std = pointwise_stats([f.values for f in fields])
    return EnsembleResult(minimizers, fields, GridField(fwd.grid, mean), GridField(fwd.grid, std),
                          values, kept, failures)


def _with_seed(config: ObjectiveConfig, seed: int) -> ObjectiveConfig:
    return replace(config, init_seed=seed)


@dataclass
class LastLayerPosterior:
    mean_coeffs: np.ndarray
    precision: np.ndarray
    basis_fields: np.ndarray  # (n_grid, D_L); column i is f_i on the grid
    grid: object = None
    chol: np.ndarray = field(default=None, repr=False)

    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(len(self.mean_coeffs)))

    def mean_field(self) -> GridField:
        return GridField(self.grid, self.basis_fields @ self.mean_coeffs)

    def std_field(self) -> GridField:
        # diag(B Sigma B^T) = column norms of L^{-1} B^T
        half = linalg.solve_triangular(self.chol, self.basis_fields.T, lower=True)
        return GridField(self.grid, np.sqrt((half * half).sum(axis=0)))

    def sample_coeffs(self, n: int, rng) -> np.ndarray:
        """Draws from N(nu, Sigma) using Sigma = L^{-T} L^{-1}."""
        z = rng.standard_normal((len(self.mean_coeffs), n))
        return (self.mean_coeffs[:, None]
                + linalg.solve_triangular(self.chol, z, lower=True, trans="T")).T


class NotPositiveDefinite(linalg.LinAlgError):
    pass


def last_layer_posterior(fwd: LinearForward, spec: NetworkSpec, w_loc, y_obs,
                         prior_consistent_precision: bool = False) -> LastLayerPosterior:
    """Gaussian posterior on the output-layer weights with hidden layers frozen.

    precision = F^T F / eta^2 + I (or D_L * I when ``prior_consistent_precision``
    matches the N(0, I/D_L) coefficient prior), mean = Sigma F^T y / eta^2.
    """
    basis = spec.layer_scaling[-1] * hidden_features(spec, w_loc, fwd.grid.points())
    F = fwd.matrix @ basis
    d = basis.shape[1]
    inv_var = 1.0 / fwd.noise_std ** 2
    prior_prec = float(d) if prior_consistent_precision else 1.0
    precision = inv_var * (F.T @ F) + prior_prec * np.eye(d)
    precision = 0.5 * (precision + precision.T)
    if not np.all(np.isfinite(precision)):
        raise NotPositiveDefinite("posterior precision has non-finite entries")
    try:
        chol = linalg.cholesky(precision, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"posterior precision is not positive definite: {exc}") from exc
    mean = linalg.cho_solve((chol, True), inv_var * (F.T @ np.asarray(y_obs, dtype=float)))
    return LastLayerPosterior(mean, precision, basis, fwd.grid, chol)
