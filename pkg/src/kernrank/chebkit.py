"""Chebyshev grids on [0, 1]: nodes, value/coefficient transforms, evaluation
and Clenshaw-Curtis (Fejer first-kind) quadrature in one and two dimensions.

Functions on the unit interval are expanded in ``T_a(2x - 1)``. Grid values
are stored at the first-kind nodes ``x_k = 1/2 - cos((k + 1/2) pi / L) / 2``,
which are ascending and symmetric about 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as npcheb

DEFAULT_L = 32


@dataclass(frozen=True, eq=False)
class ChebGrid:
    """Chebyshev grid of order ``L`` on [0, 1].

    Attributes
    ----------
    L : int
        Number of nodes (polynomials of degree < L are represented exactly).
    nodes : ndarray, shape (L,)
        Ascending first-kind Chebyshev nodes in (0, 1).
    quad_weights : ndarray, shape (L,)
        Quadrature weights, exact for polynomials of degree < L on [0, 1].
    """

    L: int
    nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    # Dense transform matrices: values = vander @ coeffs, coeffs = inv_vander @ values.
    vander: np.ndarray = field(repr=False, compare=False)
    inv_vander: np.ndarray = field(repr=False, compare=False)

    @property
    def cell_edges(self) -> np.ndarray:
        """Boundaries of the cells around each node (midpoints, plus 0 and 1)."""
        mid = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        return np.concatenate([[0.0], mid, [1.0]])


@lru_cache(maxsize=16)
def make_grid(L: int = DEFAULT_L) -> ChebGrid:
    """Build the order-``L`` grid. Grids are cached and treated as immutable."""
    if int(L) != L or L < 1:
        raise ValueError(f"grid order must be a positive integer, got {L!r}")
    L = int(L)
    k = np.arange(L)
    theta = (k + 0.5) * np.pi / L
    nodes = 0.5 - 0.5 * np.cos(theta)
    # Enforce the reflection symmetry exactly rather than up to cos() rounding.
    nodes = 0.5 * (nodes + (1.0 - nodes[::-1]))

    # Fejer's first rule on [-1, 1], halved for [0, 1].
    j = np.arange(1, L // 2 + 1)
    w = 1.0 - 2.0 * np.sum(np.cos(2.0 * np.outer(theta, j)) / (4.0 * j**2 - 1.0), axis=1)
    w = w / L
    w = 0.5 * (w + w[::-1])

    t = 2.0 * nodes - 1.0
    vander = npcheb.chebvander(t, L - 1)
    # Discrete orthogonality of T_a at first-kind nodes.
    inv_vander = (2.0 / L) * vander.T
    inv_vander[0] *= 0.5

    for arr in (nodes, w, vander, inv_vander):
        arr.setflags(write=False)
    return ChebGrid(L=L, nodes=nodes, quad_weights=w, vander=vander, inv_vander=inv_vander)


@dataclass(frozen=True, eq=False)
class ChebFun1D:
    """Chebyshev expansion ``sum_a c_a T_a(2x - 1)``."""

    coeffs: np.ndarray

    def __call__(self, x):
        return evaluate(self, x)


@dataclass(frozen=True, eq=False)
class ChebFun2D:
    """Tensor expansion ``sum_ab c_ab T_a(2x - 1) T_b(2y - 1)``."""

    coeffs: np.ndarray

    def __call__(self, x, y):
        return evaluate(self, x, y)


def _check_length(values: np.ndarray, grid: ChebGrid, ndim: int) -> None:
    if values.shape != (grid.L,) * ndim:
        raise ValueError(f"expected shape {(grid.L,) * ndim}, got {values.shape}")


def vals_to_coeffs(values, grid: ChebGrid) -> ChebFun1D:
    values = np.asarray(values, dtype=float)
    _check_length(values, grid, 1)
    return ChebFun1D(grid.inv_vander @ values)


def coeffs_to_vals(fun: ChebFun1D | np.ndarray, grid: ChebGrid) -> np.ndarray:
    c = fun.coeffs if isinstance(fun, ChebFun1D) else np.asarray(fun, dtype=float)
    _check_length(c, grid, 1)
    return grid.vander @ c


def vals_to_coeffs_2d(values, grid: ChebGrid) -> ChebFun2D:
    values = np.asarray(values, dtype=float)
    _check_length(values, grid, 2)
    return ChebFun2D(grid.inv_vander @ values @ grid.inv_vander.T)


def coeffs_to_vals_2d(fun: ChebFun2D | np.ndarray, grid: ChebGrid) -> np.ndarray:
    c = fun.coeffs if isinstance(fun, ChebFun2D) else np.asarray(fun, dtype=float)
    _check_length(c, grid, 2)
    return grid.vander @ c @ grid.vander.T


def integrate(f, grid: ChebGrid) -> float:
    """Integral over [0, 1] of a ChebFun1D or a vector of node values."""
    vals = coeffs_to_vals(f, grid) if isinstance(f, ChebFun1D) else np.asarray(f, dtype=float)
    _check_length(vals, grid, 1)
    return float(grid.quad_weights @ vals)


def integrate_2d(f, grid: ChebGrid) -> float:
    """Integral over [0, 1]^2 of a ChebFun2D or an L x L array of node values."""
    vals = coeffs_to_vals_2d(f, grid) if isinstance(f, ChebFun2D) else np.asarray(f, dtype=float)
    _check_length(vals, grid, 2)
    w = grid.quad_weights
    return float(w @ vals @ w)


def _clamp(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("evaluation points must be finite")
    return np.clip(x, 0.0, 1.0)


def evaluate(fun: ChebFun1D | ChebFun2D, x, y=None):
    """Clenshaw evaluation; points outside [0, 1] are clamped to the boundary."""
    if isinstance(fun, ChebFun1D):
        if y is not None:
            raise TypeError("one-dimensional function takes a single coordinate")
        out = npcheb.chebval(2.0 * _clamp(x) - 1.0, fun.coeffs)
    elif isinstance(fun, ChebFun2D):
        if y is None:
            raise TypeError("two-dimensional function needs both coordinates")
        tx, ty = np.broadcast_arrays(2.0 * _clamp(x) - 1.0, 2.0 * _clamp(y) - 1.0)
        out = npcheb.chebval2d(tx, ty, fun.coeffs)
    else:
        raise TypeError(f"cannot evaluate {type(fun).__name__}")
    return float(out) if np.ndim(out) == 0 else out


def interp_matrix(points, grid: ChebGrid) -> np.ndarray:
    """Matrix mapping node values to values at ``points`` (clamped to [0, 1])."""
    t = 2.0 * _clamp(np.atleast_1d(points)) - 1.0
    return npcheb.chebvander(t, grid.L - 1) @ grid.inv_vander


@dataclass(frozen=True, eq=False)
class Density:
    """Probability density on [0, 1] held as node values on a grid."""

    values: np.ndarray
    grid: ChebGrid = field(repr=False)

    @classmethod
    def uniform(cls, grid: ChebGrid) -> "Density":
        return cls(np.ones(grid.L), grid)

    @property
    def coeffs(self) -> np.ndarray:
        return vals_to_coeffs(self.values, self.grid).coeffs

    def mass(self) -> float:
        return integrate(self.values, self.grid)

    def mean(self) -> float:
        return float(self.grid.quad_weights @ (self.grid.nodes * self.values))

    def sd(self) -> float:
        m = self.mean()
        var = float(self.grid.quad_weights @ ((self.grid.nodes - m) ** 2 * self.values))
        return float(np.sqrt(max(var, 0.0)))

    def __call__(self, x):
        return evaluate(ChebFun1D(self.coeffs), x)
