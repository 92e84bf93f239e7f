"""Fully connected scalar-output networks used as function priors.

Parameters live in one flat float64 vector.  Layer ``l < L`` contributes its
weight matrix (row-major, shape ``D_{l+1} x D_l``) followed by its bias; the
output layer contributes a single weight row and no bias.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .stable import CAUCHY, GAUSSIAN, StableDist, Uniform, make_rng


@dataclass(frozen=True)
class Activation:
    name: str = "tanh"
    slope: float = 0.01  # leaky_relu only

    def __post_init__(self):
        if self.name not in ("tanh", "leaky_relu"):
            raise ValueError(f"unknown activation {self.name!r}")

    @property
    def tag(self) -> str:
        return "tanh" if self.name == "tanh" else f"leaky_relu({self.slope!r})"

    def __call__(self, z):
        if self.name == "tanh":
            return np.tanh(z)
        return np.where(z >= 0.0, z, self.slope * z)

    def derivative(self, z, value=None):
        if self.name == "tanh":
            t = np.tanh(z) if value is None else value
            return 1.0 - t * t
        # tie at 0 goes to the positive branch
        return np.where(z >= 0.0, 1.0, self.slope)


def parse_activation(text: str) -> Activation:
    text = text.strip()
    if text == "tanh":
        return Activation("tanh")
    if text.startswith("leaky_relu"):
        inner = text[len("leaky_relu"):].strip("()")
        return Activation("leaky_relu", float(inner) if inner else 0.01)
    raise ValueError(f"unknown activation {text!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus the per-layer prior.

    ``weight_dists`` and ``layer_scaling`` have one entry per weight matrix
    (``L + 1`` of them); ``bias_dists`` has one entry per hidden layer.
    """

    input_dim: int
    hidden_widths: tuple
    activation: Activation
    weight_dists: tuple
    bias_dists: tuple
    layer_scaling: tuple = None

    def __post_init__(self):
        widths = tuple(int(d) for d in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if self.input_dim not in (1, 2):
            raise ValueError("input_dim must be 1 or 2")
        if not widths or min(widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive ints")
        n_layers = len(widths)
        if len(self.weight_dists) != n_layers + 1:
            raise ValueError("need one weight distribution per layer incl. output")
        if len(self.bias_dists) != n_layers:
            raise ValueError("need one bias distribution per hidden layer")
        scaling = self.layer_scaling
        if scaling is None:
            scaling = (1.0,) * (n_layers + 1)
        scaling = tuple(float(s) for s in scaling)
        if len(scaling) != n_layers + 1:
            raise ValueError("layer_scaling needs one entry per weight matrix")
        object.__setattr__(self, "layer_scaling", scaling)
        object.__setattr__(self, "weight_dists", tuple(self.weight_dists))
        object.__setattr__(self, "bias_dists", tuple(self.bias_dists))

    @classmethod
    def from_prior(
        cls,
        input_dim: int,
        hidden_widths: Sequence[int],
        prior: str = "cauchy",
        activation: Activation | str = "tanh",
        normalized: bool = False,
    ) -> "NetworkSpec":
        """Build one of the named priors: gaussian, cauchy_gaussian or cauchy.

        Gaussian layers are standard normal, Cauchy layers standard Cauchy and
        biases follow their layer's family.  With ``normalized=True`` each
        weight matrix is scaled by ``fan_in ** (-1/alpha)``.
        """
        if isinstance(activation, str):
            activation = parse_activation(activation)
        n_layers = len(hidden_widths)
        if prior == "gaussian":
            fams = [GAUSSIAN] * (n_layers + 1)
        elif prior == "cauchy":
            fams = [CAUCHY] * (n_layers + 1)
        elif prior == "cauchy_gaussian":
            fams = [CAUCHY] * n_layers + [GAUSSIAN]
        else:
            raise ValueError(f"unknown prior {prior!r}")
        scaling = None
        if normalized:
            dims = [input_dim, *hidden_widths]
            scaling = [dims[l] ** (-1.0 / fams[l].alpha) for l in range(n_layers + 1)]
        return cls(input_dim, tuple(hidden_widths), activation, tuple(fams),
                   tuple(fams[:n_layers]), scaling)

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_widths)

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def layout(self) -> "Layout":
        return Layout.from_dims(self.dims)

    def describe(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation.tag,
            "weight_dists": [d.tag for d in self.weight_dists],
            "bias_dists": [d.tag for d in self.bias_dists],
            "layer_scaling": list(self.layer_scaling),
        }

    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Layout:
    """Offsets of each block inside the flat parameter vector."""

    weights: tuple  # (slice, shape) per weight matrix, output row last
    biases: tuple   # slice per hidden layer
    size: int

    @classmethod
    def from_dims(cls, dims) -> "Layout":
        weights, biases = [], []
        pos = 0
        for l in range(len(dims) - 1):
            n_out, n_in = dims[l + 1], dims[l]
            weights.append((slice(pos, pos + n_out * n_in), (n_out, n_in)))
            pos += n_out * n_in
            biases.append(slice(pos, pos + n_out))
            pos += n_out
        weights.append((slice(pos, pos + dims[-1]), (dims[-1],)))
        pos += dims[-1]
        return cls(tuple(weights), tuple(biases), pos)

    def layer_slices(self):
        """Slices grouped per layer: weights and bias together, output last."""
        out = []
        for (ws, _), bs in zip(self.weights[:-1], self.biases):
            out.append(slice(ws.start, bs.stop))
        out.append(self.weights[-1][0])
        return out

    def unpack(self, w):
        """Views ``(Vs, bs)`` into ``w``; the last V is the output row."""
        vs = [w[..., s].reshape(w.shape[:-1] + shape) for s, shape in self.weights]
        bs = [w[..., s] for s in self.biases]
        return vs, bs


def sample_weights(spec: NetworkSpec, seed, n_draws: int | None = None) -> np.ndarray:
    """Draw a flat weight vector (or ``n_draws`` stacked rows) from the prior."""
    rng = make_rng(seed)
    lay = spec.layout
    lead = () if n_draws is None else (n_draws,)
    w = np.empty(lead + (lay.size,))
    for l, (s, _) in enumerate(lay.weights):
        w[..., s] = spec.weight_dists[l].sample(lead + (s.stop - s.start,), rng)
        if l < len(lay.biases):
            b = lay.biases[l]
            w[..., b] = spec.bias_dists[l].sample(lead + (b.stop - b.start,), rng)
    return w


def initial_weights(spec: NetworkSpec, seed) -> np.ndarray:
    """Optimizer starting point: every layer's weights and biases uniform on
    +-1/sqrt(fan_in), independent of the prior."""
    rng = make_rng(seed)
    lay = spec.layout
    w = np.empty(lay.size)
    for l, (s, _) in enumerate(lay.weights):
        bound = 1.0 / math.sqrt(spec.dims[l])
        w[s] = rng.uniform(-bound, bound, s.stop - s.start)
        if l < len(lay.biases):
            b = lay.biases[l]
            w[b] = rng.uniform(-bound, bound, b.stop - b.start)
    return w


def _as_points(spec: NetworkSpec, points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim == 1 and spec.input_dim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"points must have shape (n, {spec.input_dim}), got {np.shape(points)}"
        )
    return x


def _forward_cache(spec: NetworkSpec, w: np.ndarray, x: np.ndarray):
    vs, bs = spec.layout.unpack(w)
    act = spec.activation
    hs, zs = [x], []
    h = x
    for l in range(len(bs)):
        z = bs[l] + spec.layer_scaling[l] * (h @ vs[l].T)
        h = act(z)
        zs.append(z)
        hs.append(h)
    u = spec.layer_scaling[-1] * (h @ vs[-1])
    return u, hs, zs, vs


def forward(spec: NetworkSpec, w, points) -> np.ndarray:
    """Evaluate u(x) at every row of ``points``."""
    w = _check_w(spec, w)
    return _forward_cache(spec, w, _as_points(spec, points))[0]


def hidden_features(spec: NetworkSpec, w, points) -> np.ndarray:
    """Last hidden layer activations, shape ``(n_points, D_L)``."""
    w = _check_w(spec, w)
    return _forward_cache(spec, w, _as_points(spec, points))[1][-1]


def forward_and_vjp(spec: NetworkSpec, w, points):
    """Return ``u`` and a function mapping a cotangent on ``u`` to d/dw."""
    w = _check_w(spec, w)
    x = _as_points(spec, points)
    u, hs, zs, vs = _forward_cache(spec, w, x)

    def vjp(cotangent):
        c = np.asarray(cotangent, dtype=float)
        if c.shape != u.shape:
            raise ValueError("cotangent length must equal the number of points")
        return _backward(spec, c, hs, zs, vs, w.size)

    return u, vjp


def _backward(spec, c, hs, zs, vs, size, want_input=False):
    lay = spec.layout
    act = spec.activation
    grad = np.empty(size)
    s_out = spec.layer_scaling[-1]
    grad[lay.weights[-1][0]] = s_out * (c @ hs[-1])
    g = s_out * np.outer(c, vs[-1])  # d/dh_L, shape (n, D_L)
    for l in range(len(zs) - 1, -1, -1):
        dz = g * act.derivative(zs[l], hs[l + 1])
        s = spec.layer_scaling[l]
        grad[lay.weights[l][0]] = s * (dz.T @ hs[l]).ravel()
        grad[lay.biases[l]] = dz.sum(axis=0)
        if l > 0 or want_input:
            g = s * (dz @ vs[l])
    if want_input:
        return grad, g
    return grad


def grad_weights(spec: NetworkSpec, w, points, cotangent) -> np.ndarray:
    """Sum_k cotangent_k * du(x_k)/dw."""
    return forward_and_vjp(spec, w, points)[1](cotangent)


def grad_input(spec: NetworkSpec, w, points) -> np.ndarray:
    """du/dx at each point, shape ``(n_points, input_dim)``.

    A single coordinate (sequence of length ``input_dim``) returns a vector.
    """
    w = _check_w(spec, w)
    single = np.ndim(points) <= 1 and np.size(points) == spec.input_dim
    x = _as_points(spec, np.reshape(points, (1, -1)) if single else points)
    u, hs, zs, vs = _forward_cache(spec, w, x)
    _, gx = _backward(spec, np.ones_like(u), hs, zs, vs, w.size, want_input=True)
    return gx[0] if single else gx


def _check_w(spec: NetworkSpec, w) -> np.ndarray:
    w = np.asarray(getattr(w, "values", w), dtype=float)
    if w.shape != (spec.n_params,):
        raise ValueError(f"weight vector must have length {spec.n_params}, got {w.shape}")
    return w


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid:
    """Uniform nodal lattice on [lo, hi]^input_dim (end points included).

    2D values are stored row-major with the second coordinate as the slow
    index: ``values.reshape(n, n)[iy, ix]``.
    """

    input_dim: int
    resolution: int
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.input_dim not in (1, 2):
            raise ValueError("input_dim must be 1 or 2")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError("domain bounds must be finite with lo < hi")

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)

    @property
    def size(self) -> int:
        return self.resolution ** self.input_dim

    @property
    def shape(self) -> tuple:
        return (self.resolution,) * self.input_dim

    def points(self) -> np.ndarray:
        a = self.axis
        if self.input_dim == 1:
            return a[:, None]
        yy, xx = np.meshgrid(a, a, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def quadrature_weights(self) -> np.ndarray:
        """Tensor trapezoidal weights, flattened in value order."""
        w1 = np.full(self.resolution, self.spacing)
        w1[0] = w1[-1] = 0.5 * self.spacing
        if self.input_dim == 1:
            return w1
        return np.outer(w1, w1).ravel()


@dataclass
class GridField:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.grid.size:
            raise ValueError(
                f"expected {self.grid.size} values for {self.grid}, got {self.values.size}"
            )

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


def sample_prior_field(spec: NetworkSpec, grid: Grid, seed) -> GridField:
    if grid.input_dim != spec.input_dim:
        raise ValueError("grid and network input dimensions differ")
    w = sample_weights(spec, seed)
    return GridField(grid, forward(spec, w, grid.points()))


# ---------------------------------------------------------------------------
# checkpoint I/O

_MAGIC = b"BIPW"


@dataclass
class WeightVector:
    """A flat weight vector bundled with its architecture, for checkpointing."""

    spec: NetworkSpec
    values: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.values = _check_w(self.spec, self.values)

    def save(self, path) -> None:
        header = dict(self.spec.describe(), seed=self.seed, n_params=self.values.size)
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob)
            fh.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "WeightVector":
        header, values = read_checkpoint(path)
        return cls(spec_from_description(header), values, header.get("seed"))


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode())
    values = np.frombuffer(raw[8 + n:], dtype="<f8").astype(float)
    if values.size != header["n_params"]:
        raise ValueError(f"{path}: truncated checkpoint")
    return header, values


def parse_dist(tag: str):
    name, _, rest = tag.partition("(")
    args = [float(a) for a in rest.rstrip(")").split(",") if a]
    if name == "cauchy":
        return StableDist(1.0, args[0] if args else 1.0)
    if name == "gaussian":
        return StableDist(2.0, args[0] if args else GAUSSIAN.gamma)
    if name == "stable":
        return StableDist(args[0], args[1] if len(args) > 1 else 1.0)
    if name == "uniform":
        return Uniform(args[0] if args else 1.0)
    raise ValueError(f"unknown distribution tag {tag!r}")


def spec_from_description(d: dict) -> NetworkSpec:
    return NetworkSpec(
        d["input_dim"],
        tuple(d["hidden_widths"]),
        parse_activation(d["activation"]),
        tuple(parse_dist(t) for t in d["weight_dists"]),
        tuple(parse_dist(t) for t in d["bias_dists"]),
        tuple(d["layer_scaling"]),
    )
