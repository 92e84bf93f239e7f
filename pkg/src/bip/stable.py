"""Symmetric alpha-stable laws: sampling, closed-form densities, and the
Gaussian-to-stable transforms used for non-centred MCMC.

Only the symmetric, zero-location family is covered.  Closed-form densities
exist for the Cauchy (alpha=1) and Gaussian (alpha=2) members, so the density
and transform routines are restricted to those two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

_MAX = np.finfo(np.float64).max


class UnsupportedDistributionError(ValueError):
    """Raised when an operation needs a closed form that does not exist."""


def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator. Accepts an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class StableDist:
    """St(alpha, gamma) with characteristic function exp(-gamma^alpha |t|^alpha).

    ``gamma=0`` is accepted and denotes the point mass at zero.
    """

    alpha: float
    gamma: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0) or not math.isfinite(self.alpha):
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not (self.gamma >= 0.0) or not math.isfinite(self.gamma):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")

    @property
    def tag(self) -> str:
        if self.alpha == 1.0:
            return f"cauchy({self.gamma!r})"
        if self.alpha == 2.0:
            return f"gaussian({self.gamma!r})"
        return f"stable({self.alpha!r},{self.gamma!r})"

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        a, g = self.alpha, self.gamma
        if a == 2.0:
            return (math.sqrt(2.0) * g) * rng.standard_normal(size)
        if a == 1.0:
            return g * np.tan(math.pi * (rng.random(size) - 0.5))
        # Chambers-Mallows-Stuck, symmetric case
        v = math.pi * (rng.random(size) - 0.5)
        w = rng.standard_exponential(size)
        x = np.sin(a * v) / np.cos(v) ** (1.0 / a)
        x *= (np.cos((1.0 - a) * v) / w) ** ((1.0 - a) / a)
        return g * x

    def log_density(self, x):
        if self.gamma == 0.0:
            raise UnsupportedDistributionError("degenerate distribution has no density")
        x = np.asarray(x, dtype=float)
        g = self.gamma
        if self.alpha == 1.0:
            return -math.log(math.pi * g) - np.log1p((x / g) ** 2)
        if self.alpha == 2.0:
            var = 2.0 * g * g
            return -0.5 * math.log(2.0 * math.pi * var) - 0.5 * x * x / var
        raise UnsupportedDistributionError(
            f"no closed-form density for alpha={self.alpha}"
        )


@dataclass(frozen=True)
class Uniform:
    """Uniform law on [-half_width, half_width]; a symmetric bias option."""

    half_width: float = 1.0

    @property
    def tag(self) -> str:
        return f"uniform({self.half_width!r})"

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        return self.half_width * (2.0 * rng.random(size) - 1.0)


CAUCHY = StableDist(1.0, 1.0)
GAUSSIAN = StableDist(2.0, 1.0 / math.sqrt(2.0))  # N(0, 1)


def sample(dist: StableDist, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return dist.sample(n, make_rng(seed))


def log_density(dist: StableDist, x):
    return dist.log_density(x)


def normal_cdf(p):
    """Standard normal CDF with full relative accuracy in the lower tail.

    Below -1 it is 0.5 * erfcx(-p / sqrt 2) * exp(-p^2 / 2) with p^2 split
    into two exact parts (Dekker), since rounding p^2 alone would cost
    |p|^2 ulps in the exponential.
    """
    scalar = np.ndim(p) == 0
    p = np.atleast_1d(np.asarray(p, dtype=float))
    out = special.ndtr(p)
    tail = p < -1.0
    if np.any(tail):
        x = p[tail]
        c = 134217729.0 * x  # 2^27 + 1
        xh = c - (c - x)
        xl = x - xh
        hi = x * x
        lo = ((xh * xh - hi) + 2.0 * xh * xl) + xl * xl
        out[tail] = 0.5 * special.erfcx(-x / math.sqrt(2.0)) * np.exp(-0.5 * hi) * np.exp(-0.5 * lo)
    return float(out[0]) if scalar else out


def noncentering_map(p):
    """Map standard-normal latents to standard-Cauchy values.

    Uses tan(pi/2 * erf(|p|/sqrt 2)) near the origin and cot(pi * Phi(-|p|))
    in the tails, with the sign of p, so relative accuracy holds everywhere
    and p = 0 maps to exactly 0.  Inputs whose tail mass underflows saturate
    to +-float max instead of producing inf.
    """
    p = np.asarray(p, dtype=float)
    a = np.abs(p)
    small = a < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        near = np.tan(0.5 * math.pi * special.erf(np.where(small, a, 0.0) / math.sqrt(2.0)))
        far = 1.0 / np.tan(math.pi * normal_cdf(-np.where(small, 1.0, a)))
    mag = np.minimum(np.where(small, near, far), _MAX)
    out = np.copysign(mag, p)
    return out if out.ndim else float(out)


def inverse_noncentering_map(w):
    """Inverse of :func:`noncentering_map`: standard Cauchy -> N(0, 1)."""
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        q = np.arctan2(1.0, np.abs(w)) / math.pi  # Cauchy upper-tail mass
    out = np.copysign(-special.ndtri(q), w)
    out = np.where(w == 0.0, 0.0, out)
    return out if out.ndim else float(out)


def noncentering_map_general(p, dist: StableDist):
    if dist.alpha == 2.0:
        out = (math.sqrt(2.0) * dist.gamma) * np.asarray(p, dtype=float)
        return out if out.ndim else float(out)
    if dist.alpha == 1.0:
        return dist.gamma * noncentering_map(p)
    raise UnsupportedDistributionError(
        f"non-centring needs a closed-form CDF; alpha={dist.alpha} has none"
    )


def inverse_noncentering_map_general(w, dist: StableDist):
    if dist.gamma == 0.0:
        raise UnsupportedDistributionError("degenerate distribution cannot be non-centred")
    if dist.alpha == 2.0:
        out = np.asarray(w, dtype=float) / (math.sqrt(2.0) * dist.gamma)
        return out if out.ndim else float(out)
    if dist.alpha == 1.0:
        return inverse_noncentering_map(np.asarray(w, dtype=float) / dist.gamma)
    raise UnsupportedDistributionError(
        f"non-centring needs a closed-form CDF; alpha={dist.alpha} has none"
    )
