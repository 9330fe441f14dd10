"""Expectation-maximization over the kernel: BP joint marginals feed a
pair-weighted grid Q(x, y), and a prior-specific M-step refits b(x, y)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bp import BPOptions, MessageSet, SkillPosterior, bethe_log_evidence, run_bp
from .chebkit import ChebGrid, make_grid
from .model import DEFAULT_SLOPE, Kernel, WinMatrix, logistic_kernel
from . import mstep_cheb

log = logging.getLogger(__name__)

BACKENDS = ("chebyshev", "neural")


@dataclass(frozen=True, eq=False)
class QGrid:
    """Sum over observed ordered pairs of w_ij times the joint density of (x_i, x_j)."""

    values: np.ndarray
    total_weight: float
    grid: ChebGrid = field(repr=False)

    def mass(self) -> float:
        w = self.grid.quad_weights
        return float(w @ self.values @ w)

    def cell_mass(self) -> np.ndarray:
        """Quadrature mass carried by each node pair."""
        w = self.grid.quad_weights
        return self.values * np.outer(w, w)


def accumulate_q(w: WinMatrix, msgs: MessageSet, kernel: Kernel) -> QGrid:
    grid = kernel.grid
    L = grid.L
    qw = grid.quad_weights
    edges = msgs.edges
    Q = np.zeros((L, L))
    lb = kernel.log_b()
    for (wins, losses), idx in edges.groups:
        idx = idx[idx % 2 == 0]  # one edge (a <- b) per pair, a < b
        if len(idx) == 0:
            continue
        logk = wins * lb + losses * lb.T
        K = np.exp(logk - logk.max())
        cav_a = msgs.messages[edges.rev[idx]]  # densities over x_a
        cav_b = msgs.messages[idx]  # densities over x_b
        Z = np.einsum("px,px->p", (cav_a * qw) @ K, cav_b * qw)
        outer = (cav_a / Z[:, None]).T @ cav_b
        joint_sum = outer * K
        Q += wins * joint_sum + losses * joint_sum.T
    return QGrid(Q, w.total, grid)


@dataclass
class EMOptions:
    backend: str = "chebyshev"
    tol: float = 1e-3
    max_iters: int = 50
    L: int = 32
    init_slope: float = DEFAULT_SLOPE
    bp: BPOptions = field(default_factory=BPOptions)
    warm_start_bp: bool = True
    seed: int = 0
    # Chebyshev prior
    p: int = mstep_cheb.DEFAULT_P
    penalty_scale: float = mstep_cheb.PENALTY_SCALE
    newton_tol: float = 1e-9
    newton_max_iter: int = 200
    # Neural prior; None means TrainOptions() defaults
    train: object = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {', '.join(BACKENDS)}")
        if not self.tol > 0 or self.max_iters < 1:
            raise ValueError("EM tolerance must be positive and max_iters at least 1")


@dataclass
class EMState:
    kernel: Kernel
    iteration: int = 0
    bound_trace: list = field(default_factory=list)
    surrogate_trace: list = field(default_factory=list)
    kernel_delta: float = float("inf")
    converged: bool = False
    q: QGrid | None = None
    model_state: object = None  # MonotoneParams or MLP of the last M-step


def expected_log_b(q: QGrid, kernel: Kernel) -> float:
    return float(np.sum(q.cell_mass() * kernel.log_b()))


class _ChebyshevStep:
    def __init__(self, grid: ChebGrid, opts: EMOptions):
        self.grid = grid
        self.opts = opts
        self.params = None

    def penalty(self, kernel: Kernel) -> float:
        return mstep_cheb.penalty(kernel.log_odds, self.grid, self.opts.penalty_scale)

    def __call__(self, q: QGrid, kernel: Kernel, iteration: int) -> Kernel:
        if self.params is None:
            self.params = mstep_cheb.params_from_log_odds(kernel.log_odds, self.opts.p)
        res = mstep_cheb.maximize(
            q.values, self.params, self.grid, self.opts.penalty_scale, self.opts.newton_tol, self.opts.newton_max_iter
        )
        log.debug("M-step %d: objective %.6f after %d Newton steps", iteration, res.objective, res.iterations)
        if not res.converged:
            log.warning("M-step %d stopped before convergence (gradient norm %.3g)", iteration, res.grad_norm)
        self.params = res.params
        return res.kernel

    @property
    def state(self):
        return self.params


class _NeuralStep:
    def __init__(self, grid: ChebGrid, opts: EMOptions):
        from . import mstep_nn

        self.grid = grid
        self.opts = opts
        self.train = opts.train or mstep_nn.TrainOptions(seed=opts.seed)
        self.mlp = None

    def penalty(self, kernel: Kernel) -> float:
        # Gaussian prior on the weights in units of whole matches.
        return 0.0 if self.mlp is None else -self.mlp.sq_norm()

    def __call__(self, q: QGrid, kernel: Kernel, iteration: int) -> Kernel:
        from . import mstep_nn

        train = self.train.with_seed(self.train.seed + 7919 * iteration)
        result = mstep_nn.train_kernel(q, train, self.grid, init=self.mlp)
        self.mlp = result.mlp
        return result.kernel

    @property
    def state(self):
        return self.mlp


def em_fit(
    w: WinMatrix,
    backend: str | None = None,
    opts: EMOptions | None = None,
    init_kernel: Kernel | None = None,
) -> tuple[Kernel, SkillPosterior, EMState]:
    """Alternate BP and kernel refits until the kernel stops moving.

    Returns the final kernel, the BP posterior under it, and the run trace.
    ``bound_trace`` holds the Bethe estimate of log P_b(w) plus the prior
    term R[b] at every E-step; ``surrogate_trace`` the b-dependent part
    int Q log b + R[b].
    """
    opts = opts or EMOptions()
    if backend is not None and backend != opts.backend:
        opts = EMOptions(**{**opts.__dict__, "backend": backend})
    grid = init_kernel.grid if init_kernel is not None else make_grid(opts.L)
    kernel = init_kernel if init_kernel is not None else logistic_kernel(grid, opts.init_slope)
    step = _ChebyshevStep(grid, opts) if opts.backend == "chebyshev" else _NeuralStep(grid, opts)
    state = EMState(kernel=kernel)

    msgs = None
    for it in range(1, opts.max_iters + 1):
        msgs = run_bp(w, kernel, opts.bp, msgs if opts.warm_start_bp else None)
        log.debug("EM iteration %d: BP %d sweeps, residual %.3g", it, msgs.sweeps, msgs.residual)
        q = accumulate_q(w, msgs, kernel)
        prior = step.penalty(kernel)
        state.bound_trace.append(bethe_log_evidence(msgs, kernel) + prior)
        state.surrogate_trace.append(expected_log_b(q, kernel) + prior)
        state.q = q
        if w.total == 0:
            state.kernel_delta = 0.0
            state.converged = True
            state.iteration = it
            break

        new_kernel = step(q, kernel, it)
        state.kernel_delta = float(np.max(np.abs(new_kernel.node_values - kernel.node_values)))
        kernel = new_kernel
        state.kernel = kernel
        state.iteration = it
        state.model_state = step.state
        log.info("EM iteration %d: bound %.6f, kernel change %.3g", it, state.bound_trace[-1], state.kernel_delta)
        if state.kernel_delta < opts.tol:
            state.converged = True
            break

    msgs = run_bp(w, kernel, opts.bp, msgs if opts.warm_start_bp else None)
    if w.total > 0:
        q = accumulate_q(w, msgs, kernel)
        prior = step.penalty(kernel)
        state.bound_trace.append(bethe_log_evidence(msgs, kernel) + prior)
        state.surrogate_trace.append(expected_log_b(q, kernel) + prior)
        state.q = q
    posterior = SkillPosterior.from_messages(w, kernel, msgs)
    return kernel, posterior, state
