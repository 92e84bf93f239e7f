"""Linear observation operators A = P o B for the two deblurring problems.

Both operators are stored as dense ``N_obs x N_grid`` matrices so the adjoint
is exact and the last-layer regression can reuse them directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import linalg, sparse

from .network import Grid, GridField
from .stable import make_rng


@dataclass(frozen=True)
class LinearForward:
    matrix: np.ndarray
    grid: Grid
    noise_std: float
    obs_points: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (len(self.obs_points), self.grid.size):
            raise ValueError("matrix shape does not match obs_points x grid")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("forward matrix has non-finite entries")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[0]

    def with_noise(self, noise_std: float) -> "LinearForward":
        return LinearForward(self.matrix, self.grid, noise_std, self.obs_points)

    def apply(self, u) -> np.ndarray:
        return self.matrix @ _values(self, u)

    def adjoint(self, v) -> np.ndarray:
        return self.matrix.T @ np.asarray(v, dtype=float)

    def observe(self, u, seed) -> np.ndarray:
        """A u plus i.i.d. N(0, noise_std^2) noise drawn from ``seed``."""
        clean = self.apply(u)
        if self.noise_std == 0:
            return clean
        return clean + self.noise_std * make_rng(seed).standard_normal(clean.size)

    def misfit_and_gradient(self, u, y_obs):
        """||A u - y||^2 / (2 eta^2) and its gradient with respect to u."""
        if self.noise_std <= 0:
            raise ValueError("misfit needs noise_std > 0")
        y = np.asarray(y_obs, dtype=float)
        if y.shape != (self.n_obs,):
            raise ValueError(f"y_obs must have shape ({self.n_obs},)")
        r = self.apply(u) - y
        inv_var = 1.0 / self.noise_std ** 2
        return 0.5 * inv_var * float(r @ r), inv_var * self.adjoint(r)

    def misfit(self, u, y_obs) -> float:
        r = self.apply(u) - np.asarray(y_obs, dtype=float)
        return 0.5 * float(r @ r) / self.noise_std ** 2


def _values(fwd: LinearForward, u) -> np.ndarray:
    if isinstance(u, GridField):
        if u.grid != fwd.grid:
            raise ValueError("field lives on a different grid")
        u = u.values
    u = np.asarray(u, dtype=float)
    if u.shape != (fwd.grid.size,):
        raise ValueError(f"expected {fwd.grid.size} grid values, got {u.shape}")
    return u


# ---------------------------------------------------------------------------
# 1D Gaussian blur


def blur_matrix_1d(grid: Grid, obs_points, kernel_std: float) -> np.ndarray:
    """Rows: Gaussian kernel at each site times trapezoid weights, renormalised.

    The kernel is truncated at the domain boundary and every row is scaled to
    unit sum, so constants are reproduced exactly.  Weights are formed in log
    space so a vanishing ``kernel_std`` degrades to nearest-node sampling.
    """
    x = grid.axis
    q = grid.quadrature_weights()
    d = (np.asarray(obs_points, dtype=float)[:, None] - x[None, :]) / kernel_std
    logk = -0.5 * d * d + np.log(q)[None, :]
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    return k / k.sum(axis=1, keepdims=True)


def build_blur_1d(resolution: int = 128, kernel_std: float = 0.03,
                  obs_count: int = 50, noise_std: float = 0.05) -> LinearForward:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    grid = Grid(1, resolution)
    sites = np.linspace(grid.lo, grid.hi, obs_count)
    return LinearForward(blur_matrix_1d(grid, sites, kernel_std), grid,
                         noise_std, sites[:, None])


# ---------------------------------------------------------------------------
# 2D Helmholtz smoothing with Neumann boundary


def neumann_laplacian_1d(n: int, h: float) -> sparse.csr_matrix:
    """Second-difference matrix with mirrored ghost nodes at both ends."""
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    return sparse.diags([lower, main, upper], [-1, 0, 1], format="csr") / (h * h)


def boundary_weights_1d(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


class FactorizationError(RuntimeError):
    pass


class PdeOperator2D:
    """Solver for (I - kappa * Lap_h) y = u on the nodal grid of [-1, 1]^2.

    Mirrored ghost nodes make the stencil matrix M non-symmetric along the
    boundary; left-multiplying by the diagonal trapezoid weights W gives the
    symmetric positive definite S = W M, whose banded Cholesky factor is
    computed once and reused for every solve.
    """

    def __init__(self, resolution: int, kappa: float = 0.01, lo: float = -1.0, hi: float = 1.0):
        if resolution < 3:
            raise ValueError("resolution must be >= 3")
        self.kappa = kappa
        self.resolution = n = resolution
        self.grid = Grid(2, n, lo, hi)
        h = self.grid.spacing
        d1 = neumann_laplacian_1d(n, h)
        eye = sparse.identity(n, format="csr")
        self.laplacian = (sparse.kron(eye, d1) + sparse.kron(d1, eye)).tocsr()
        self.system = (sparse.identity(n * n) - kappa * self.laplacian).tocsr()
        w1 = boundary_weights_1d(n)
        self.weights = np.outer(w1, w1).ravel()
        self.symmetric = sparse.diags(self.weights) @ self.system
        self.factor = self._factorize()

    def _factorize(self) -> np.ndarray:
        n, S = self.resolution, self.symmetric.todia()
        N = n * n
        ab = np.zeros((n + 1, N))
        for k in range(n + 1):
            ab[k, :N - k] = S.diagonal(-k)
        try:
            return linalg.cholesky_banded(ab, lower=True)
        except linalg.LinAlgError as exc:
            raise FactorizationError(
                f"Cholesky failed for resolution={n}, kappa={self.kappa}: {exc}"
            ) from exc

    def dense_factor(self) -> np.ndarray:
        """Lower-triangular factor as a dense matrix (small grids only)."""
        N = self.resolution ** 2
        L = np.zeros((N, N))
        for k in range(self.resolution + 1):
            idx = np.arange(N - k)
            L[idx + k, idx] = self.factor[k, :N - k]
        return L

    def solve_symmetric(self, rhs) -> np.ndarray:
        return linalg.cho_solve_banded((self.factor, True), rhs)

    def solve(self, u) -> np.ndarray:
        """y with (I - kappa Lap_h) y = u; ``u`` may carry extra columns."""
        u = np.asarray(u, dtype=float)
        w = self.weights if u.ndim == 1 else self.weights[:, None]
        return self.solve_symmetric(w * u)


def bilinear_matrix(grid: Grid, points) -> np.ndarray:
    """Rows interpolate nodal values bilinearly at ``points`` (x, y)."""
    pts = np.asarray(points, dtype=float)
    n, h = grid.resolution, grid.spacing
    P = np.zeros((len(pts), grid.size))
    for r, (x, y) in enumerate(pts):
        ix = min(max(int(math.floor((x - grid.lo) / h)), 0), n - 2)
        iy = min(max(int(math.floor((y - grid.lo) / h)), 0), n - 2)
        tx = (x - (grid.lo + ix * h)) / h
        ty = (y - (grid.lo + iy * h)) / h
        P[r, iy * n + ix] += (1 - tx) * (1 - ty)
        P[r, iy * n + ix + 1] += tx * (1 - ty)
        P[r, (iy + 1) * n + ix] += (1 - tx) * ty
        P[r, (iy + 1) * n + ix + 1] += tx * ty
    return P


def build_pde_2d(resolution: int = 50, kappa: float = 0.01, obs_per_axis: int = 14,
                 noise_std: float = 0.01, pde: PdeOperator2D | None = None) -> LinearForward:
    pde = pde or PdeOperator2D(resolution, kappa)
    grid = pde.grid
    a = np.linspace(grid.lo, grid.hi, obs_per_axis)
    yy, xx = np.meshgrid(a, a, indexing="ij")
    sites = np.column_stack([xx.ravel(), yy.ravel()])
    P = bilinear_matrix(grid, sites)
    # A = P M^{-1} = P S^{-1} W, so A^T = W S^{-1} P^T with S symmetric
    At = pde.weights[:, None] * pde.solve_symmetric(P.T)
    return LinearForward(np.ascontiguousarray(At.T), grid, noise_std, sites)


# ---------------------------------------------------------------------------
# field files


def save_field_csv(field: GridField, path) -> None:
    g = field.grid
    header = f"input_dim={g.input_dim},resolution={g.resolution},lo={g.lo!r},hi={g.hi!r}"
    data = field.values if g.input_dim == 1 else field.as_array()
    np.savetxt(path, np.atleast_1d(data), delimiter=",", header=header, fmt="%.17g")


def _parse_header(line: str) -> Grid:
    meta = dict(item.split("=") for item in line.lstrip("#").strip().split(","))
    return Grid(int(meta["input_dim"]), int(meta["resolution"]),
                float(meta.get("lo", -1.0)), float(meta.get("hi", 1.0)))


def load_field_csv(path_or_text) -> GridField:
    if hasattr(path_or_text, "read_text"):
        text = path_or_text.read_text()
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    first, _, body = text.partition("\n")
    grid = _parse_header(first)
    values = np.loadtxt(body.splitlines(), delimiter=",", ndmin=1)
    return GridField(grid, values)


def _bundled(name: str):
    path = resources.files("bip") / "data" / name
    if not path.is_file():
        raise FileNotFoundError(f"no bundled phantom {name!r}")
    return path


def truth_field_1d(resolution: int = 128) -> GridField:
    return load_field_csv(_bundled(f"truth_1d_{resolution}.csv"))


def truth_field_2d(resolution: int = 50) -> GridField:
    return load_field_csv(_bundled(f"truth_2d_{resolution}.csv"))


def save_observations_csv(fwd: LinearForward, y, path) -> None:
    cols = ["x", "y"][: fwd.obs_points.shape[1]] + ["value"]
    data = np.column_stack([fwd.obs_points, np.asarray(y, dtype=float)])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def load_observations_csv(path) -> tuple:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]
