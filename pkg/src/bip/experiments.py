"""End-to-end runs of the two deblurring problems, baselines and metrics.

Every run writes into one output directory:

* ``manifest.json``: resolved config echo, seeds, status and artifact list
* ``truth.csv``, ``observations.csv`` and the method's field CSVs
* ``metrics.json``: relative L1 errors in percent
* ``*.pgm``: 8-bit grayscale images for 2D fields
* on failure, ``error.json`` describing the failed stage

Randomness comes from three named streams: ``problem.data_seed`` (noise),
``optimizer.init_seed`` (restarts) and ``pcn.chain_seed`` (chains), so the
method seeds never change the observations.
"""

from __future__ import annotations

import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, ndimage

from .config import ExperimentConfig
from .forward import (
    LinearForward,
    build_blur_1d,
    build_pde_2d,
    neumann_laplacian_1d,
    save_field_csv,
    save_observations_csv,
    truth_field_1d,
    truth_field_2d,
)
from .inference import ObjectiveConfig, ensemble, last_layer_posterior, optimize, pointwise_stats
from .network import (
    Grid,
    GridField,
    NetworkSpec,
    WeightVector,
    forward,
    sample_weights,
)
from .pcn import ChainResult, PcnConfig, run_chain
from .stable import make_rng
from .tails import derivative_tail_experiment

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


def l1_norm(values, grid: Grid) -> float:
    return float(np.sum(grid.quadrature_weights() * np.abs(values)))


def rel_l1(u, truth: GridField) -> float:
    """Relative L1 error in percent, by trapezoid quadrature on the truth's grid."""
    u = getattr(u, "values", u)
    return 100.0 * l1_norm(u - truth.values, truth.grid) / l1_norm(truth.values, truth.grid)


@dataclass
class MetricReport:
    """Relative L1 errors in percent: of the mean field, and the mean and
    population std of the per-sample errors."""

    rel_l1_of_mean: float
    mean_rel_l1: float
    std_rel_l1: float

    def as_dict(self) -> dict:
        return dict(asdict(self), units="percent")


def metric_report(fields, truth: GridField) -> MetricReport:
    fields = np.atleast_2d(np.asarray([getattr(f, "values", f) for f in fields], dtype=float))
    errs = np.array([rel_l1(f, truth) for f in fields])
    return MetricReport(rel_l1(fields.mean(axis=0), truth), float(errs.mean()), float(errs.std()))


# ---------------------------------------------------------------------------
# problem assembly


def build_problem(cfg: ExperimentConfig):
    """Forward operator, truth field and noisy observations for ``cfg``."""
    p = cfg.problem
    if p.name == "deconv1d":
        fwd = build_blur_1d(p.resolution, p.kernel_std, p.obs_count, p.noise_std)
        truth = truth_field_1d(p.resolution)
    else:
        fwd = build_pde_2d(p.resolution, p.kappa, p.obs_per_axis, p.noise_std)
        truth = truth_field_2d(p.resolution)
    return fwd, truth, fwd.observe(truth, p.data_seed)


def build_spec(cfg: ExperimentConfig, prior: str | None = None) -> NetworkSpec:
    dim = 1 if cfg.problem.name == "deconv1d" else 2
    return NetworkSpec.from_prior(dim, cfg.prior.widths, prior or cfg.prior.kind,
                                  cfg.prior.activation, cfg.prior.normalized)


def objective_config(cfg: ExperimentConfig, seed: int | None = None) -> ObjectiveConfig:
    o = cfg.optimizer
    return ObjectiveConfig(cfg.prior.kind, o.adam_steps, o.adam_lr, o.lbfgs_steps,
                           o.lbfgs_memory, o.init_seed if seed is None else seed, o.init)


# ---------------------------------------------------------------------------
# Gaussian-process baseline


def matern_covariance_1d(grid: Grid, amplitude: float = 0.25, length: float = 10.0) -> np.ndarray:
    """amplitude * (I - length * Lap_h)^{-2} with homogeneous Neumann ends.

    With M = I - length * Lap_h and trapezoid weights W, S = W M is symmetric
    and the covariance is amplitude * S^{-1} W S^{-1} (= M^{-2} W^{-1}), which
    keeps it symmetric positive definite on the discrete grid.
    """
    n, h = grid.resolution, grid.spacing
    M = np.eye(n) - length * neumann_laplacian_1d(n, h).toarray()
    wts = np.ones(n)
    wts[0] = wts[-1] = 0.5
    S = wts[:, None] * M
    factor = linalg.cho_factor(0.5 * (S + S.T), lower=True)
    half = linalg.cho_solve(factor, np.diag(wts))
    C = amplitude * linalg.cho_solve(factor, half.T)
    return 0.5 * (C + C.T)


@dataclass
class GaussianPosterior:
    mean: GridField
    std: GridField
    covariance: np.ndarray = field(repr=False)

    def sample(self, n: int, rng) -> np.ndarray:
        L = linalg.cholesky(self.covariance + 1e-12 * np.eye(len(self.covariance)), lower=True)
        return self.mean.values + (L @ rng.standard_normal((L.shape[0], n))).T


def gpr_baseline(y_obs, fwd: LinearForward, amplitude: float = 0.25,
                 length: float = 10.0) -> GaussianPosterior:
    """Conjugate posterior for the Matern-type Gaussian prior (1D only)."""
    if fwd.grid.input_dim != 1:
        raise ValueError("the Gaussian-process baseline is only defined for 1D problems")
    C0 = matern_covariance_1d(fwd.grid, amplitude, length)
    A = fwd.matrix
    CAt = C0 @ A.T
    G = A @ CAt + fwd.noise_std ** 2 * np.eye(fwd.n_obs)
    factor = linalg.cho_factor(G, lower=True)
    mean = CAt @ linalg.cho_solve(factor, np.asarray(y_obs, dtype=float))
    cov = C0 - CAt @ linalg.cho_solve(factor, CAt.T)
    cov = 0.5 * (cov + cov.T)
    std = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return GaussianPosterior(GridField(fwd.grid, mean), GridField(fwd.grid, std), cov)


# ---------------------------------------------------------------------------
# images and masks


def emit_image(field: GridField, value_range, path) -> None:
    """Binary PGM; [lo, hi] maps linearly to 0..255 with pixel = floor(255 t + 1/2).

    Image rows follow the grid's y index, first row at y = lo.
    """
    if field.grid.input_dim != 2:
        raise ValueError("images need a 2D field")
    lo, hi = (float(v) for v in value_range)
    if not hi > lo:
        raise ValueError("image range needs hi > lo")
    t = (field.as_array() - lo) / (hi - lo)
    pix = np.clip(np.floor(255.0 * t + 0.5), 0, 255).astype(np.uint8)
    rows, cols = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    cols, rows = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)


def edge_masks(truth: GridField, band: int = 2, jump: float = 0.1):
    """Boolean masks (edge band, block interior) for a piecewise-constant 2D field.

    Edges are cells with a neighbour differing by more than ``jump``; the
    band is their ``band``-cell Chebyshev dilation.  Interior cells are
    non-background cells outside the band.
    """
    u = truth.as_array()
    edge = np.zeros(u.shape, dtype=bool)
    dx = np.abs(np.diff(u, axis=1)) > jump
    dy = np.abs(np.diff(u, axis=0)) > jump
    edge[:, :-1] |= dx
    edge[:, 1:] |= dx
    edge[:-1, :] |= dy
    edge[1:, :] |= dy
    near = ndimage.binary_dilation(edge, structure=np.ones((3, 3), bool), iterations=band)
    interior = (u != 0.0) & ~near
    return near.ravel(), interior.ravel()


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    method: str
    prior: str
    report: MetricReport | None
    artifacts: list
    extra: dict = field(default_factory=dict)


class _Run:
    """Output directory bookkeeping for one run."""

    def __init__(self, cfg: ExperimentConfig, method: str, out: Path):
        self.cfg, self.method, self.out = cfg, method, out
        self.artifacts: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def field(self, name: str, fld: GridField, image_range=None):
        save_field_csv(fld, self.path(name + ".csv"))
        if fld.grid.input_dim == 2 and image_range is not None:
            emit_image(fld, image_range, self.path(name + ".pgm"))

    def json(self, name: str, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def manifest(self, status: str, extra=None):
        doc = {"method": self.method, "status": status, "config": self.cfg.to_dict(),
               "seeds": {"data": self.cfg.problem.data_seed,
                         "init": self.cfg.optimizer.init_seed,
                         "chain": self.cfg.pcn.chain_seed},
               "metric_units": "percent",
               "artifacts": sorted(set(self.artifacts))}
        if extra:
            doc.update(extra)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _value_range(cfg, truth: GridField):
    lo = cfg.output.image_lo if cfg.output.image_lo is not None else float(truth.values.min())
    hi = cfg.output.image_hi if cfg.output.image_hi is not None else float(truth.values.max())
    return lo, hi if hi > lo else lo + 1.0


def run_experiment(cfg: ExperimentConfig, method: str, output_dir=None) -> RunResult:
    """Run one (problem, prior, method) cell and write its artifacts.

    On failure the partial artifacts stay in place, ``error.json`` records
    the stage and traceback, and the exception is re-raised.
    """
    cfg = cfg.resolved()
    out = Path(output_dir if output_dir is not None else cfg.output.dir)
    run = _Run(cfg, method, out)
    stage = "setup"
    try:
        if method == "tails":
            stage = "tails"
            result = _tails(cfg, run)
        else:
            stage = "problem"
            fwd, truth, y = build_problem(cfg)
            rng_range = _value_range(cfg, truth)
            run.field("truth", truth, rng_range)
            save_observations_csv(fwd, y, run.path("observations.csv"))
            stage = method
            handler = _METHODS.get(method)
            if handler is None:
                raise ValueError(f"unknown method {method!r}")
            result = handler(cfg, run, fwd, truth, y, rng_range)
            if result.report is not None:
                run.json("metrics.json", dict(result.report.as_dict(), method=method,
                                              prior=cfg.prior.kind, problem=cfg.problem.name,
                                              **result.extra))
    except Exception as exc:
        run.json("error.json", {"stage": stage, "type": type(exc).__name__, "error": str(exc),
                                "traceback": traceback.format_exc()})
        run.manifest("failed", {"failed_stage": stage})
        raise
    run.manifest("ok")
    result.artifacts = sorted(set(run.artifacts))
    return result


def _prior_samples(cfg, run, fwd, truth, y, rng_range):
    spec = build_spec(cfg)
    points = fwd.grid.points()
    draws = sample_weights(spec, cfg.optimizer.init_seed, n_draws=cfg.prior.n_draws)
    fields = np.array([forward(spec, w, points) for w in draws])
    for j, u in enumerate(fields):
        fld = GridField(fwd.grid, u)
        lim = float(np.max(np.abs(u))) or 1.0
        run.field(f"prior_sample_{j:02d}", fld, (-lim, lim))
    return RunResult("prior_samples", cfg.prior.kind, None, [])


def _map(cfg, run, fwd, truth, y, rng_range):
    spec = build_spec(cfg)
    w, trace = optimize(fwd, spec, y, objective_config(cfg))
    WeightVector(spec, w, cfg.optimizer.init_seed).save(run.path("minimizer.bipw"))
    _save_trace(trace, run.path("objective.csv"))
    u = GridField(fwd.grid, forward(spec, w, fwd.grid.points()))
    run.field("map", u, rng_range)
    return RunResult("map", cfg.prior.kind, metric_report([u], truth), [],
                     {"objective": float(trace[-1]), "misfit": fwd.misfit(u, y)})


def _save_trace(trace, path):
    np.savetxt(path, np.column_stack([np.arange(len(trace)), trace]), delimiter=",",
               header="iteration,objective", comments="", fmt=["%d", "%.17g"])


def _ensemble(cfg, run, fwd, truth, y, rng_range):
    spec = build_spec(cfg)
    o = cfg.optimizer
    res = ensemble(fwd, spec, y, objective_config(cfg), o.n_restarts, o.init_seed, n_jobs=o.n_jobs)
    for seed, w in zip(res.seeds, res.minimizers):
        WeightVector(spec, w, seed).save(run.path(f"minimizer_{seed:03d}.bipw"))
    run.field("mean", res.pointwise_mean, rng_range)
    run.field("std", res.pointwise_std, (0.0, max(float(res.pointwise_std.values.max()), 1e-12)))
    lo, hi = res.band()
    run.field("band_lo", GridField(fwd.grid, lo))
    run.field("band_hi", GridField(fwd.grid, hi))
    report = metric_report(res.fields, truth)
    extra = {"objective_values": res.objective_values, "restart_seeds": res.seeds,
             "failed_restarts": {str(k): v for k, v in res.failures.items()}}
    return RunResult("ensemble", cfg.prior.kind, report, [], extra)


def _load_or_optimize(cfg, fwd, spec, y):
    path = cfg.optimizer.checkpoint
    if path:
        wv = WeightVector.load(path)
        if wv.spec.digest() != spec.digest():
            raise ValueError(f"checkpoint {path} was written for a different network")
        return wv.values
    return optimize(fwd, spec, y, objective_config(cfg))[0]


def _last_layer(cfg, run, fwd, truth, y, rng_range):
    spec = build_spec(cfg)
    w = _load_or_optimize(cfg, fwd, spec, y)
    post = last_layer_posterior(fwd, spec, w, y, cfg.last_layer.prior_consistent_precision)
    mean, std = post.mean_field(), post.std_field()
    run.field("mean", mean, rng_range)
    run.field("std", std, (0.0, max(float(std.values.max()), 1e-12)))
    draws = post.sample_coeffs(cfg.last_layer.n_draws, make_rng(cfg.pcn.chain_seed))
    fields = draws @ post.basis_fields.T
    rep = metric_report(fields, truth)
    rep.rel_l1_of_mean = rel_l1(mean, truth)
    return RunResult("last_layer", cfg.prior.kind, rep, [])


def _gpr(cfg, run, fwd, truth, y, rng_range):
    post = gpr_baseline(y, fwd, cfg.gpr.amplitude, cfg.gpr.length)
    run.field("mean", post.mean)
    run.field("std", post.std)
    fields = post.sample(cfg.gpr.n_draws, make_rng(cfg.pcn.chain_seed))
    rep = metric_report(fields, truth)
    rep.rel_l1_of_mean = rel_l1(post.mean, truth)
    return RunResult("gpr_baseline", "matern", rep, [],
                     {"max_increment": float(np.max(np.abs(np.diff(post.mean.values))))})


def pcn_config(cfg: ExperimentConfig) -> PcnConfig:
    p = cfg.pcn
    return PcnConfig(p.n_samples, p.beta0, p.target_accept, p.adapt_rate, p.adapt_window,
                     p.thin, p.burn_in, p.init)


def _chain_job(args):
    fwd, spec, y, pc, seed, w0, dump = args
    return run_chain(fwd, spec, y, pc, seed, init_weights=w0, dump_path=dump)


def pooled_stats(chains: list[ChainResult]):
    """Combine per-chain fields into (mean, std, acceptance, kept fields)."""
    fields = np.concatenate([c.fields for c in chains])
    mean, std = pointwise_stats(fields)
    counts = np.array([c.stats.n_effective_samples for c in chains], dtype=float)
    accept = float(np.average([c.stats.acceptance_rate for c in chains], weights=counts))
    return mean, std, accept, fields


def _pcn(cfg, run, fwd, truth, y, rng_range):
    spec = build_spec(cfg)
    pc = pcn_config(cfg)
    w0 = _load_or_optimize(cfg, fwd, spec, y) if pc.init == "from_checkpoint" else None
    jobs = []
    for j in range(cfg.pcn.n_chains):
        dump = run.path(f"chain_{j:02d}.bin") if cfg.pcn.dump else None
        jobs.append((fwd, spec, y, pc, cfg.pcn.chain_seed + j, w0, dump))
    if cfg.pcn.n_chains > 1 and cfg.optimizer.n_jobs > 1:
        with ProcessPoolExecutor(cfg.optimizer.n_jobs) as pool:
            chains = list(pool.map(_chain_job, jobs))
    else:
        chains = [_chain_job(j) for j in jobs]
    mean, std, accept, fields = pooled_stats(chains)
    run.field("mean", GridField(fwd.grid, mean), rng_range)
    run.field("std", GridField(fwd.grid, std), (0.0, max(float(std.max()), 1e-12)))
    np.savetxt(run.path("stats.csv"), np.column_stack([np.arange(mean.size), mean, std]),
               delimiter=",", header="grid_index,mean,std", comments="", fmt=["%d", "%.17g", "%.17g"])
    extra = {"acceptance_rate": accept,
             "beta_final": [float(c.stats.beta_trace[-1]) for c in chains],
             "n_kept": int(fields.shape[0])}
    if fwd.grid.input_dim == 2:
        edge, interior = edge_masks(truth)
        extra["std_edge_mean"] = float(std[edge].mean())
        extra["std_interior_mean"] = float(std[interior].mean())
    return RunResult("pcn", cfg.prior.kind, metric_report(fields, truth), [], extra)


_METHODS = {
    "prior_samples": _prior_samples,
    "map": _map,
    "ensemble": _ensemble,
    "last_layer": _last_layer,
    "gpr_baseline": _gpr,
    "pcn": _pcn,
}


def _tails(cfg, run):
    t = cfg.tails
    rows = []
    for prior in t.priors:
        spec = NetworkSpec.from_prior(len(t.point), t.widths, prior, t.activation)
        rep = derivative_tail_experiment(spec, t.point, t.axis, t.n_samples, t.seed, t.k_fraction)
        expect = "light" if prior == "gaussian" else "heavy"
        ok = rep.light if expect == "light" else rep.heavy
        rows.append([prior, ";".join(repr(v) for v in t.point), t.axis, rep.hill_index,
                     *[rep.moment_estimates[p] for p in sorted(rep.moment_estimates)],
                     *[int(rep.divergence_flags[p]) for p in sorted(rep.divergence_flags)],
                     expect, "pass" if ok else "fail"])
    orders = sorted(rep.moment_estimates)
    header = (["spec", "point", "axis", "hill_index"] + [f"moment_{p:g}" for p in orders]
              + [f"diverges_{p:g}" for p in orders] + ["expected", "result"])
    with open(run.path("tails.csv"), "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")
    return RunResult("tails", ",".join(t.priors), None, [],
                     {"rows": [dict(zip(header, r)) for r in rows]})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def collect_reports(root) -> list[dict]:
    """All ``metrics.json`` files below ``root``, tagged with their directory."""
    rows = []
    for path in sorted(Path(root).rglob("metrics.json")):
        with open(path) as fh:
            doc = json.load(fh)
        doc["run"] = str(path.parent.relative_to(root)) or "."
        rows.append(doc)
    return rows
