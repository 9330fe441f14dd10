"""Kernel refit under the Chebyshev prior.

The log-odds f is stored at node pairs through a monotone, antisymmetric
parameterization by an unconstrained upper-triangular matrix g:

    A(k, m) = (sum_{k <= i < j <= m} |g_ij|^p)^(1/p),   k < m
    f(x_k, x_m) = -A(k, m),   f(x_m, x_k) = A(k, m),   f(x_k, x_k) = 0

so b = sigmoid(f) is non-decreasing in its first argument. The smoothness
penalty acts on the Chebyshev coefficients induced by these node values, and
the penalized quadrature objective is maximized over g by a damped Newton
method with exact first and second derivatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .chebkit import ChebGrid
from .model import Kernel

log = logging.getLogger(__name__)

DEFAULT_P = 8
PENALTY_SCALE = 1.0 / 64.0
_G_FLOOR = 1e-3


class MStepError(RuntimeError):
    """The kernel optimizer could not make progress on a finite objective."""

    def __init__(self, message: str, grad_norm: float = float("nan")):
        super().__init__(f"{message} (gradient norm {grad_norm:.3g})")
        self.grad_norm = grad_norm


@dataclass(frozen=True, eq=False)
class MonotoneParams:
    g: np.ndarray  # L x L, only the strict upper triangle is used
    p: int = DEFAULT_P

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be at least 1")
        g = np.triu(np.asarray(self.g, dtype=float), 1)
        if not np.all(np.isfinite(g)):
            raise ValueError("monotone parameters must be finite")
        object.__setattr__(self, "g", g)

    @property
    def L(self) -> int:
        return self.g.shape[0]

    @classmethod
    def zeros(cls, L: int, p: int = DEFAULT_P) -> "MonotoneParams":
        return cls(np.zeros((L, L)), p)

    def vector(self) -> np.ndarray:
        return self.g[np.triu_indices(self.L, 1)]

    @classmethod
    def from_vector(cls, vec, L: int, p: int = DEFAULT_P) -> "MonotoneParams":
        g = np.zeros((L, L))
        g[np.triu_indices(L, 1)] = vec
        return cls(g, p)


def penalty_weights(L: int, scale: float = PENALTY_SCALE) -> np.ndarray:
    """lambda_ab = scale * (a^2 + b^2)^2; coefficients at or beyond L are absent."""
    a = np.arange(L, dtype=float)
    return scale * (a[:, None] ** 2 + a[None, :] ** 2) ** 2


def _block_sums(u: np.ndarray) -> np.ndarray:
    """S[k, m] = sum of u[i, j] over k <= i and j <= m (u strictly upper triangular)."""
    return np.cumsum(np.cumsum(u[::-1], axis=0)[::-1], axis=1)


def monotone_values(params: MonotoneParams, grid: ChebGrid | None = None) -> np.ndarray:
    """Log-odds f(x_k, x_m) at node pairs; exactly antisymmetric and monotone."""
    p = params.p
    S = _block_sums(np.abs(params.g) ** p)
    A = np.triu(S, 1) ** (1.0 / p)
    return A.T - A


def params_from_log_odds(log_odds: np.ndarray, p: int = DEFAULT_P, floor: float = _G_FLOOR) -> MonotoneParams:
    """Invert the parameterization for a monotone target by differencing block sums.

    Exact whenever the target is representable; otherwise negative block
    increments are clipped. Entries are kept away from zero, where the
    p-th power flattens every derivative.
    """
    L = log_odds.shape[0]
    A = np.triu(np.maximum(-np.asarray(log_odds, dtype=float), 0.0), 1)
    S = A**p
    Sp = np.zeros((L + 1, L + 1))
    Sp[:L, 1:] = S  # Sp[i, j + 1] = S[i, j]
    u = Sp[:L, 1:] - Sp[1:, 1:] - Sp[:L, :L] + Sp[1:, :L]
    u = np.triu(np.maximum(u, 0.0), 1)
    g = np.maximum(u ** (1.0 / p), floor)
    return MonotoneParams(np.triu(g, 1), p)


def penalty(f_vals: np.ndarray, grid: ChebGrid, scale: float = PENALTY_SCALE) -> float:
    """R[f] = -scale * sum_ab ((a^2 + b^2) c_ab)^2 over the induced coefficients."""
    V = grid.inv_vander
    c = V @ np.asarray(f_vals, dtype=float) @ V.T
    lam = penalty_weights(grid.L, 1.0)
    return float(-scale * np.sum((lam * c) ** 2))


def objective(f_vals: np.ndarray, q_values: np.ndarray, grid: ChebGrid, scale: float = PENALTY_SCALE) -> float:
    """Quadrature of Q log sigmoid(f) over [0,1]^2 plus the smoothness penalty."""
    w = grid.quad_weights
    wq = q_values * np.outer(w, w)
    return float(np.sum(wq * -np.logaddexp(0.0, -f_vals))) + penalty(f_vals, grid, scale)


@lru_cache(maxsize=8)
def _structure(L: int, scale: float):
    """Constant pieces of the derivatives for grid order L.

    Returns upper-triangle indices, the 0/1 block-sum map M (S = M u), and the
    penalty Hessian with respect to the upper-triangle amplitudes A.
    """
    from .chebkit import make_grid

    iu = np.triu_indices(L, 1)
    ki, mi = iu
    # M[(k,m),(i,j)] = 1 iff k <= i and j <= m
    M = ((ki[:, None] <= ki[None, :]) & (mi[None, :] <= mi[:, None])).astype(float)
    V = make_grid(L).inv_vander
    # Coefficients induced by unit A(k,m): c = -V e_k e_m^T V^T + V e_m e_k^T V^T
    Vk, Vm = V[:, ki], V[:, mi]  # L x N
    Bcols = (-np.einsum("an,bn->abn", Vk, Vm) + np.einsum("an,bn->abn", Vm, Vk)).reshape(L * L, -1)
    lam2 = (penalty_weights(L, 1.0) ** 2).ravel()
    HR = -2.0 * scale * (Bcols.T * lam2) @ Bcols
    return iu, M, HR


@dataclass
class _Eval:
    value: float
    grad: np.ndarray
    hess: np.ndarray | None


def _evaluate(gvec: np.ndarray, wq: np.ndarray, grid: ChebGrid, p: int, scale: float, hessian: bool = True) -> _Eval:
    L = grid.L
    iu, M, HR = _structure(L, scale)
    ag = np.abs(gvec)
    u = ag**p
    S = M @ u
    S = np.maximum(S, 1e-300)
    a = S ** (1.0 / p)
    F = np.zeros((L, L))
    F[iu] = -a
    F = F - F.T

    V = grid.inv_vander
    c = V @ F @ V.T
    lam = penalty_weights(L, 1.0)
    value = float(np.sum(wq * -np.logaddexp(0.0, -F)) - scale * np.sum((lam * c) ** 2))

    G = wq * expit(-F) - 2.0 * scale * (V.T @ (lam**2 * c) @ V)
    gamma = G.T[iu] - G[iu]  # dJ/dA
    da = (1.0 / p) * a / S  # = (1/p) S^(1/p - 1)
    du = M.T @ (da * gamma)
    dg = p * ag ** (p - 1) * np.sign(gvec)
    grad = du * dg
    if not hessian:
        return _Eval(value, grad, None)

    s = expit(F)
    curv = -wq * s * (1.0 - s)
    HA = HR.copy()
    HA[np.diag_indices_from(HA)] += curv[iu] + curv.T[iu]
    d2a = (1.0 / p) * (1.0 / p - 1.0) * a / S**2
    Md = M * da[:, None]
    Hu = Md.T @ HA @ Md + (M.T * (gamma * d2a)) @ M
    H = Hu * np.outer(dg, dg)
    H[np.diag_indices_from(H)] += du * p * (p - 1) * ag ** (p - 2)
    return _Eval(value, grad, H)


def objective_and_gradient(params: MonotoneParams, q_values, grid: ChebGrid, scale: float = PENALTY_SCALE):
    """Penalized objective at ``params`` and its gradient over the upper-triangle g entries."""
    w = grid.quad_weights
    wq = np.asarray(q_values, dtype=float) * np.outer(w, w)
    ev = _evaluate(params.vector(), wq, grid, params.p, scale, hessian=False)
    return ev.value, ev.grad


@dataclass
class ChebFitResult:
    kernel: Kernel
    params: MonotoneParams
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)  # objective after each accepted step


def maximize(
    q_values: np.ndarray,
    init: MonotoneParams,
    grid: ChebGrid,
    scale: float = PENALTY_SCALE,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> ChebFitResult:
    """Damped Newton ascent on the penalized objective over g.

    The step solves (-H + mu D) d = grad with D the Hessian diagonal
    magnitudes, raising mu until the system is positive definite; a
    backtracking line search keeps every accepted step an ascent step.
    """
    q_values = np.asarray(q_values, dtype=float)
    L, p = grid.L, init.p
    if init.L != L:
        raise ValueError(f"parameters are {init.L}x{init.L} but the grid has order {L}")
    if not np.any(q_values > 0):
        params = MonotoneParams.zeros(L, p)
        return ChebFitResult(Kernel(np.zeros((L, L)), grid), params, 0.0, 0.0, 0, True, [0.0])

    w = grid.quad_weights
    wq = q_values * np.outer(w, w)
    if not np.any(np.abs(init.g) >= _G_FLOOR):
        # Near g = 0 the p-th powers flatten every derivative, and rough starts
        # carry a huge penalty; begin from the smooth ramp f = x - y instead.
        init = params_from_log_odds(grid.nodes[:, None] - grid.nodes[None, :], p)
    gvec = init.vector().copy()
    gvec = np.where(np.abs(gvec) < _G_FLOOR, np.where(gvec < 0, -_G_FLOOR, _G_FLOOR), gvec)
    ev = _evaluate(gvec, wq, grid, p, scale)
    if not np.isfinite(ev.value):
        raise MStepError("objective is not finite at the starting point")
    converged = False
    trace = [ev.value]
    it = 0
    for it in range(1, max_iter + 1):
        g, H = ev.grad, ev.hess
        Hn = -0.5 * (H + H.T)
        D = np.abs(np.diag(Hn)) + 1e-12 * (np.abs(np.diag(Hn)).max() + 1e-300)
        step = None
        for mu in (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4):
            try:
                cf = cho_factor(Hn + mu * np.diag(D), lower=True, check_finite=False)
            except LinAlgError:
                continue
            step = cho_solve(cf, g, check_finite=False)
            if np.all(np.isfinite(step)) and g @ step > 0:
                break
            step = None
        if step is None:
            step = g / D
        decrement = float(g @ step)
        if decrement <= tol * max(1.0, abs(ev.value)):
            converged = True
            break

        t = 1.0
        accepted = None
        while t > 1e-12:
            trial = _evaluate(gvec + t * step, wq, grid, p, scale, hessian=False)
            if np.isfinite(trial.value) and trial.value >= ev.value + 1e-4 * t * decrement:
                accepted = gvec + t * step
                break
            t *= 0.5
        if accepted is None:
            log.debug("line search underflow after %d Newton steps", it)
            break
        gvec = accepted
        ev = _evaluate(gvec, wq, grid, p, scale)
        if not np.isfinite(ev.value):
            raise MStepError(f"objective became non-finite at Newton step {it}", float(np.linalg.norm(g)))
        trace.append(ev.value)

    params = MonotoneParams.from_vector(gvec, L, p)
    kernel = Kernel(monotone_values(params), grid)
    return ChebFitResult(kernel, params, ev.value, float(np.linalg.norm(ev.grad)), it, converged, trace)


def fit_kernel_cheb(q, init: MonotoneParams, grid: ChebGrid, **kwargs) -> Kernel:
    """Refit the kernel to an E-step grid ``q`` (a QGrid or an L x L array)."""
    values = getattr(q, "values", q)
    return maximize(values, init, grid, **kwargs).kernel
