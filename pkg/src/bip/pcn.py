"""Preconditioned Crank-Nicolson sampling in the non-centred parameterisation.

The chain runs on latent variables p with an independent N(0, 1) prior per
weight; each weight is recovered as w_i = Lambda_i(p_i) through its layer's
inverse-CDF transform, so the pCN proposal only ever sees a Gaussian prior.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .forward import LinearForward
from .network import GridField, NetworkSpec, forward
from .stable import (
    inverse_noncentering_map_general,
    make_rng,
    noncentering_map_general,
)


@dataclass
class PcnConfig:
    n_samples: int = 200_000
    beta0: float = 0.05
    target_accept: float = 0.3
    adapt_rate: float = 1.0
    adapt_window: int = 100
    thin: int = 100
    burn_in: int | None = None  # default: 10% of n_samples
    init: str = "prior_draw"

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.n_samples // 10
        if not (0.0 < self.beta0 <= 1.0):
            raise ValueError("beta0 must lie in (0, 1]")
        if not (0.0 < self.target_accept < 1.0):
            raise ValueError("target_accept must lie in (0, 1)")
        if self.adapt_rate < 0 or self.adapt_window < 1 or self.thin < 1:
            raise ValueError("adapt_rate >= 0, adapt_window >= 1 and thin >= 1 required")
        if not (0 <= self.burn_in < self.n_samples):
            raise ValueError("burn_in must be smaller than n_samples")
        if self.init not in ("prior_draw", "from_checkpoint"):
            raise ValueError("init must be prior_draw or from_checkpoint")


def pcn_step(latent, beta: float, potential, rng, current=None):
    """One pCN move.  Returns ``(latent', potential', accepted)``.

    A proposal whose potential is not finite is rejected.
    """
    if not (0.0 < beta <= 1.0):
        raise ValueError("beta must lie in (0, 1]")
    if current is None:
        current = potential(latent)
    xi = rng.standard_normal(latent.shape)
    proposal = math.sqrt(1.0 - beta * beta) * latent + beta * xi
    new = potential(proposal)
    log_u = math.log(rng.random())
    if math.isfinite(new) and log_u < current - new:
        return proposal, new, True
    return latent, current, False


def adapt_beta(beta: float, recent_accept_rate: float, config: PcnConfig) -> float:
    b = beta * math.exp(config.adapt_rate * (recent_accept_rate - config.target_accept))
    return min(max(b, 1e-6), 1.0)


class LatentMap:
    """Componentwise latent <-> weight transform following the layer priors."""

    def __init__(self, spec: NetworkSpec):
        lay = spec.layout
        self.blocks = []
        for l, (s, _) in enumerate(lay.weights):
            self.blocks.append((s, spec.weight_dists[l]))
            if l < len(lay.biases):
                self.blocks.append((lay.biases[l], spec.bias_dists[l]))
        self.size = lay.size

    def to_weights(self, p: np.ndarray) -> np.ndarray:
        w = np.empty(self.size)
        for s, dist in self.blocks:
            w[s] = noncentering_map_general(p[s], dist)
        return w

    def to_latent(self, w: np.ndarray) -> np.ndarray:
        p = np.empty(self.size)
        for s, dist in self.blocks:
            p[s] = inverse_noncentering_map_general(w[s], dist)
        return p


def make_potential(fwd: LinearForward, spec: NetworkSpec, y_obs, latent_map: LatentMap):
    points = fwd.grid.points()
    A = fwd.matrix
    y = np.asarray(y_obs, dtype=float)
    inv2var = 0.5 / fwd.noise_std ** 2

    def potential(p):
        with np.errstate(all="ignore"):
            u = forward(spec, latent_map.to_weights(p), points)
            r = A @ u - y
            return inv2var * float(r @ r)

    return potential


@dataclass
class ChainStats:
    pointwise_mean: GridField
    pointwise_second_moment: GridField
    acceptance_rate: float
    beta_trace: list
    n_effective_samples: int
    burn_in_acceptance_rate: float = math.nan

    @property
    def pointwise_std(self) -> GridField:
        m, s2 = self.pointwise_mean.values, self.pointwise_second_moment.values
        return GridField(self.pointwise_mean.grid, np.sqrt(np.maximum(s2 - m * m, 0.0)))

    def band(self, z: float = 1.96):
        m, s = self.pointwise_mean.values, self.pointwise_std.values
        return m - z * s, m + z * s


@dataclass
class ChainResult:
    stats: ChainStats
    fields: np.ndarray  # thinned post-burn-in fields, (n_kept, n_grid)
    final_latent: np.ndarray
    potential_trace: np.ndarray = field(repr=False, default=None)


class _Accumulator:
    """One-pass mean and second moment (Welford)."""

    def __init__(self, n):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def push(self, x):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def second_moment(self):
        return self.m2 / max(self.count, 1) + self.mean * self.mean


def run_chain(fwd: LinearForward, spec: NetworkSpec, y_obs, config: PcnConfig, seed,
              init_weights=None, dump_path=None, potential=None) -> ChainResult:
    """Adaptive pCN; beta adapts during burn-in only and is frozen afterwards.

    Every ``thin``-th post-burn-in state is pushed through the network and
    accumulated; those latent states are also written to ``dump_path``.
    ``potential`` overrides the data misfit (used for prior-only checks).
    """
    rng = make_rng(seed)
    lmap = LatentMap(spec)
    if potential is None:
        potential = make_potential(fwd, spec, y_obs, lmap)
    if config.init == "from_checkpoint":
        if init_weights is None:
            raise ValueError("init=from_checkpoint needs init_weights")
        p = lmap.to_latent(np.asarray(getattr(init_weights, "values", init_weights), dtype=float))
    else:
        p = rng.standard_normal(lmap.size)
    points = fwd.grid.points()
    acc = _Accumulator(fwd.grid.size)
    fields, phis, betas = [], [], []
    beta = config.beta0
    phi = potential(p)
    window_acc = 0
    n_acc_post = n_acc_burn = 0
    writer = DumpWriter(dump_path, config, spec) if dump_path else None
    try:
        for i in range(config.n_samples):
            p, phi, ok = pcn_step(p, beta, potential, rng, phi)
            if i < config.burn_in:
                n_acc_burn += ok
                window_acc += ok
                if (i + 1) % config.adapt_window == 0:
                    beta = adapt_beta(beta, window_acc / config.adapt_window, config)
                    betas.append(beta)
                    window_acc = 0
                continue
            n_acc_post += ok
            if (i - config.burn_in) % config.thin == 0:
                u = forward(spec, lmap.to_weights(p), points)
                acc.push(u)
                fields.append(u)
                phis.append(phi)
                if writer:
                    writer.write(p)
    finally:
        if writer:
            writer.close(complete=len(fields) == _expected_records(config))
    n_post = config.n_samples - config.burn_in
    stats = ChainStats(
        GridField(fwd.grid, acc.mean.copy()),
        GridField(fwd.grid, acc.second_moment()),
        n_acc_post / n_post,
        betas or [beta],
        acc.count,
        n_acc_burn / config.burn_in if config.burn_in else math.nan,
    )
    return ChainResult(stats, np.asarray(fields), p, np.asarray(phis))


def _expected_records(config: PcnConfig) -> int:
    return -(-(config.n_samples - config.burn_in) // config.thin)


# ---------------------------------------------------------------------------
# dump files: magic, header length, JSON header, float64 records, trailer

_MAGIC = b"BIPC"
_END = b"END\x00"
_TRUNC = b"TRNC"


class DumpWriter:
    def __init__(self, path, config: PcnConfig, spec: NetworkSpec):
        header = {"config": asdict(config), "spec": spec.describe(),
                  "spec_hash": spec.digest(), "record_length": spec.n_params}
        blob = json.dumps(header, sort_keys=True).encode()
        self.fh = open(path, "wb")
        self.fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
        self.count = 0

    def write(self, latent):
        self.fh.write(np.asarray(latent, dtype="<f8").tobytes())
        self.count += 1

    def close(self, complete: bool):
        self.fh.write((_END if complete else _TRUNC) + struct.pack("<Q", self.count))
        self.fh.close()


def read_dump(path):
    """Return ``(header, records, complete)``.

    A file cut off mid-write (no trailer) is read up to its last whole record
    and reported as incomplete.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a chain dump")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode())
    body = raw[8 + n:]
    rec = 8 * header["record_length"]
    complete = False
    if len(body) >= 12 and body[-12:-8] in (_END, _TRUNC) and (len(body) - 12) % rec == 0:
        complete = body[-12:-8] == _END
        body = body[:-12]
    n_rec = len(body) // rec
    records = np.frombuffer(body[:n_rec * rec], dtype="<f8").reshape(n_rec, -1).astype(float)
    return header, records, complete
