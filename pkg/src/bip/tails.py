"""Tail-index diagnostics for network outputs and their input derivatives.

Heavy tails (moment generating function divergent for every t > 0) cannot be
certified from a finite sample.  The Hill index is used as the operational
surrogate: an index below 2 means an infinite second moment, and the
acceptance thresholds (1.5 heavy / 2.5 light) leave a guard band either side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkSpec, sample_weights
from .stable import CAUCHY, make_rng

MOMENT_ORDERS = (0.5, 1.0, 2.0, 4.0)
CHUNK = 2000


class DegenerateSampleError(ValueError):
    pass


def hill_estimate(samples, k_fraction: float = 0.05) -> float:
    """Hill tail index of ``|samples|`` using the top ``k_fraction`` order statistics.

    Returns 1 / mean(log X_(i) - log X_(k+1)) over the k largest values.
    """
    x = np.abs(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 100:
        raise ValueError(f"need at least 100 samples, got {n}")
    if not (0.0 < k_fraction <= 0.5):
        raise ValueError("k_fraction must lie in (0, 0.5]")
    k = max(int(k_fraction * n), 1)
    top = np.partition(x, n - k - 1)[n - k - 1:]
    threshold = top.min()
    if threshold <= 0.0 or not np.isfinite(threshold):
        raise DegenerateSampleError("tail threshold is zero or not finite")
    excess = np.log(top) - math.log(threshold)
    mean_excess = excess.sum() / k
    if mean_excess <= 0.0:
        raise DegenerateSampleError("no spread above the tail threshold")
    return 1.0 / mean_excess


@dataclass
class TailReport:
    hill_index: float
    k_fraction: float
    n_samples: int
    moment_estimates: dict = field(default_factory=dict)
    divergence_flags: dict = field(default_factory=dict)
    degenerate: bool = False

    @property
    def heavy(self) -> bool:
        return not self.degenerate and self.hill_index < 1.5

    @property
    def light(self) -> bool:
        return not self.degenerate and self.hill_index > 2.5


def tail_report(samples, k_fraction: float = 0.05) -> TailReport:
    """Hill index plus absolute moments.

    An order p is flagged divergent when the Hill index does not exceed p,
    i.e. the fitted power tail has no p-th moment.
    """
    x = np.asarray(samples, dtype=float).ravel()
    absx = np.abs(x)
    moments = {p: float(np.mean(absx ** p)) for p in MOMENT_ORDERS}
    try:
        alpha = hill_estimate(x, k_fraction)
    except DegenerateSampleError:
        return TailReport(math.nan, k_fraction, x.size, moments,
                          {p: False for p in MOMENT_ORDERS}, degenerate=True)
    flags = {p: bool(p >= alpha) for p in MOMENT_ORDERS}
    return TailReport(alpha, k_fraction, x.size, moments, flags)


def input_derivative_batch(spec: NetworkSpec, W: np.ndarray, point, axis: int) -> np.ndarray:
    """d u / d x_axis at ``point`` for each row of the weight batch ``W``.

    Forward-mode tangent propagation; deliberately independent of the
    reverse-mode path in :mod:`bip.network`.
    """
    x = np.asarray(point, dtype=float).reshape(spec.input_dim)
    vs, bs = spec.layout.unpack(W)
    act = spec.activation
    m = W.shape[0]
    h = np.broadcast_to(x, (m, x.size))
    dh = np.zeros((m, x.size))
    dh[:, axis] = 1.0
    for l in range(len(bs)):
        s = spec.layer_scaling[l]
        z = bs[l] + s * np.einsum("mij,mj->mi", vs[l], h)
        dz = s * np.einsum("mij,mj->mi", vs[l], dh)
        h = act(z)
        dh = act.derivative(z, h) * dz
    return spec.layer_scaling[-1] * np.einsum("mi,mi->m", vs[-1], dh)


def output_batch(spec: NetworkSpec, W: np.ndarray, point) -> np.ndarray:
    """u(point) for each row of the weight batch ``W``."""
    x = np.asarray(point, dtype=float).reshape(spec.input_dim)
    vs, bs = spec.layout.unpack(W)
    h = np.broadcast_to(x, (W.shape[0], x.size))
    for l in range(len(bs)):
        h = spec.activation(bs[l] + spec.layer_scaling[l] * np.einsum("mij,mj->mi", vs[l], h))
    return spec.layer_scaling[-1] * np.einsum("mi,mi->m", vs[-1], h)


def _chunked(fn, spec, n_samples, seed, chunk):
    n_chunks = -(-n_samples // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    out = np.empty(n_samples)
    for j, child in enumerate(children):
        lo = j * chunk
        m = min(chunk, n_samples - lo)
        # always draw a whole chunk so a shorter request is a prefix of a longer one
        out[lo:lo + m] = fn(sample_weights(spec, child, n_draws=chunk)[:m])
    return out


def sample_outputs(spec: NetworkSpec, point, n_samples: int, seed, chunk: int = 250) -> np.ndarray:
    """u(point) under ``n_samples`` independent prior weight draws."""
    return _chunked(lambda W: output_batch(spec, W, point), spec, n_samples, seed, chunk)


def sample_input_derivatives(spec, point, axis, n_samples, seed) -> np.ndarray:
    """Derivatives under ``n_samples`` independent prior weight draws.

    Draws are made in fixed chunks of 2000, each from its own child of the
    master seed, so the output does not depend on how the work is split and
    a shorter request returns a prefix of a longer one.
    """
    if not 0 <= axis < spec.input_dim:
        raise ValueError("axis out of range")
    return _chunked(lambda W: input_derivative_batch(spec, W, point, axis),
                    spec, n_samples, seed, CHUNK)


def derivative_tail_experiment(spec: NetworkSpec, point, axis: int = 0,
                               n_samples: int = 100_000, seed=0,
                               k_fraction: float = 0.05) -> TailReport:
    d = sample_input_derivatives(spec, point, axis, n_samples, seed)
    return tail_report(d, k_fraction)


def second_moment_doubling_ratio(spec, point, axis, n_samples, seed) -> float:
    """E|d|^2 estimated on the first n draws divided by that on all 2n."""
    d = sample_input_derivatives(spec, point, axis, 2 * n_samples, seed)
    return float(np.mean(d[:n_samples] ** 2) / np.mean(d ** 2))


@dataclass
class ClosureReport:
    product_heavy_normal: float
    sum_heavy_heavy: float
    product_normal_normal: float

    @property
    def passed(self) -> bool:
        return (self.product_heavy_normal < 1.5 and self.sum_heavy_heavy < 1.5
                and self.product_normal_normal > 2.0)


def product_sum_closure_test(n_samples: int = 100_000, seed=0,
                             k_fraction: float = 0.05) -> ClosureReport:
    """Hill indices for heavy*symmetric, heavy+heavy and normal*normal draws."""
    rng = make_rng(seed)
    x = CAUCHY.sample(n_samples, rng)
    y = rng.standard_normal(n_samples)
    x2 = CAUCHY.sample(n_samples, rng)
    a, b = rng.standard_normal((2, n_samples))
    return ClosureReport(
        hill_estimate(x * y, k_fraction),
        hill_estimate(x + x2, k_fraction),
        hill_estimate(a * b, k_fraction),
    )
