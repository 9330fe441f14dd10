"""Belief propagation for skill posteriors on the match graph.

Message ``mu_{i<-j}`` is a density over the skill of j given every match
except those against i (the cavity distribution of j). Messages live as node
values on the kernel's Chebyshev grid, so each integral over an opponent's
skill is a quadrature-weighted matrix product.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .chebkit import ChebGrid, Density
from .model import Kernel, WinMatrix

log = logging.getLogger(__name__)

_TINY = 1e-300


class BPDivergenceError(FloatingPointError):
    """Non-finite values appeared during message passing."""


@dataclass(frozen=True)
class BPOptions:
    tol: float = 1e-8
    max_sweeps: int = 1000
    damping: float = 0.2
    schedule: str = "synchronous"  # or "random": sequential updates in a shuffled order
    seed: int = 0
    # Geometric extrapolation along a slow, steadily contracting mode.
    accelerate: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.schedule not in ("synchronous", "random"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True, eq=False)
class EdgeIndex:
    """Directed-edge bookkeeping for a win matrix.

    Pair p = (a, b), a < b, owns edges 2p = (a <- b) and 2p + 1 = (b <- a).
    Edge e = (i <- j) carries a density over x_j; ``wins[e]`` and ``losses[e]``
    are w_ij and w_ji, the exponents of b(x_i, x_j) and b(x_j, x_i).
    """

    n: int
    pair_i: np.ndarray
    pair_j: np.ndarray
    tgt: np.ndarray
    src: np.ndarray
    wins: np.ndarray
    losses: np.ndarray
    rev: np.ndarray
    incidence: sp.csr_matrix = field(repr=False)  # n x E, sums edge terms into their target
    groups: tuple = field(repr=False)  # ((wins, losses), edge indices) per exponent pair

    @classmethod
    def from_wins(cls, w: WinMatrix) -> "EdgeIndex":
        i, j, wij, wji = w.pairs()
        P = len(i)
        tgt = np.empty(2 * P, dtype=np.int64)
        src = np.empty(2 * P, dtype=np.int64)
        tgt[0::2], src[0::2] = i, j
        tgt[1::2], src[1::2] = j, i
        wins = np.empty(2 * P)
        losses = np.empty(2 * P)
        wins[0::2], losses[0::2] = wij, wji
        wins[1::2], losses[1::2] = wji, wij
        rev = np.arange(2 * P) ^ 1
        incidence = sp.csr_matrix((np.ones(2 * P), (tgt, np.arange(2 * P))), shape=(w.n, 2 * P))
        keys = np.stack([wins, losses], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True) if P else (np.zeros((0, 2)), np.zeros(0, int))
        inverse = np.asarray(inverse).ravel()
        groups = tuple((tuple(uniq[g]), np.flatnonzero(inverse == g)) for g in range(len(uniq)))
        return cls(w.n, i, j, tgt, src, wins, losses, rev, incidence, groups)

    @property
    def n_edges(self) -> int:
        return len(self.tgt)

    def edge(self, i: int, j: int) -> int:
        """Index of edge (i <- j); raises KeyError if the pair never played."""
        a, b = (i, j) if i < j else (j, i)
        lo = np.searchsorted(self.pair_i, a, side="left")
        hi = np.searchsorted(self.pair_i, a, side="right")
        k = lo + np.searchsorted(self.pair_j[lo:hi], b)
        if k >= hi or self.pair_j[k] != b:
            raise KeyError(f"players {i} and {j} have no recorded matches")
        return int(2 * k + (0 if i < j else 1))


def _pair_log_kernel(kernel: Kernel, wins: float, losses: float) -> np.ndarray:
    """log of b(x, y)^wins * b(y, x)^losses on the node grid."""
    lb = kernel.log_b()
    return wins * lb + losses * lb.T


@dataclass(eq=False)
class MessageSet:
    """Messages for every directed observed edge, plus run diagnostics."""

    edges: EdgeIndex
    messages: np.ndarray  # E x L node values, each integrating to 1
    grid: ChebGrid
    sweeps: int = 0
    converged: bool = False
    residual: float = float("inf")

    def message(self, i: int, j: int) -> Density:
        """mu_{i<-j}, a density over the skill of j."""
        return Density(self.messages[self.edges.edge(i, j)].copy(), self.grid)


def _normalize_log(logv: np.ndarray, qw: np.ndarray) -> np.ndarray:
    """Turn rows of log node values into densities with unit quadrature mass."""
    m = np.exp(logv - logv.max(axis=-1, keepdims=True))
    np.clip(m, 0.0, None, out=m)
    z = m @ qw
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise BPDivergenceError("message normalization failed; consider a larger probability floor")
    return m / z[..., None]


def evidence_logs(edges: EdgeIndex, messages: np.ndarray, kernel: Kernel) -> np.ndarray:
    """log h_e(x_i) = log int mu_e(y) b(x_i, y)^w_ij b(y, x_i)^w_ji dy for each edge e = (i <- j)."""
    qw = kernel.grid.quad_weights
    out = np.empty_like(messages)
    weighted = messages * qw
    for (wins, losses), idx in edges.groups:
        logk = _pair_log_kernel(kernel, wins, losses)
        shift = logk.max()
        k = np.exp(logk - shift)
        h = weighted[idx] @ k.T
        out[idx] = np.log(np.maximum(h, _TINY)) + shift
    return out


def _check_finite(arr: np.ndarray, sweep: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise BPDivergenceError(f"non-finite message values in sweep {sweep}")


def _sweep_synchronous(edges, messages, kernel, damping):
    qw = kernel.grid.quad_weights
    logh = evidence_logs(edges, messages, kernel)
    totals = edges.incidence @ logh
    cavity = (totals[edges.tgt] - logh)[edges.rev]
    new = _normalize_log(cavity, qw)
    if damping:
        new = (1.0 - damping) * new + damping * messages
    return new


def _sweep_random(edges, messages, kernel, damping, rng):
    qw = kernel.grid.quad_weights
    messages = messages.copy()
    logh = evidence_logs(edges, messages, kernel)
    incoming = [[] for _ in range(edges.n)]
    for e, t in enumerate(edges.tgt):
        incoming[t].append(e)
    logks = {}
    for e in rng.permutation(edges.n_edges):
        # e = (i <- j) is j's cavity: every edge into j except the one from i.
        j, r = edges.src[e], edges.rev[e]
        into = incoming[j]
        cav = logh[into].sum(axis=0) - logh[r]
        upd = _normalize_log(cav[None, :], qw)[0]
        messages[e] = (1.0 - damping) * upd + damping * messages[e]
        key = (edges.wins[e], edges.losses[e])
        if key not in logks:
            logks[key] = _pair_log_kernel(kernel, *key)
        logk = logks[key]
        logh[e] = logsumexp(logk + np.log(np.maximum(messages[e] * qw, _TINY)), axis=1)
    return messages


def _extrapolate(previous, current, history, qw, max_factor=1000.0):
    """Jump ahead along a mode contracting at a steady rate rho per sweep.

    Works on log node values so the result stays positive; returns None when
    the recent residual ratios are not steady enough to trust.
    """
    r = np.asarray(history[-4:])
    ratios = r[1:] / r[:-1]
    rho = ratios[-1]
    if not 0.5 < rho < 1.0 or np.ptp(ratios) > 1e-3 * (1.0 - rho) + 1e-4:
        return None
    with np.errstate(divide="ignore"):
        lc = np.log(np.maximum(current, _TINY))
        lp = np.log(np.maximum(previous, _TINY))
    jump = lc + (lc - lp) * min(rho / (1.0 - rho), max_factor)
    return _normalize_log(jump, qw)


def run_bp(w: WinMatrix, kernel: Kernel, opts: BPOptions | None = None, init: MessageSet | None = None) -> MessageSet:
    """Iterate the message equations to a fixed point.

    ``init`` warm-starts from an earlier run on the same match graph.
    """
    opts = opts or BPOptions()
    grid = kernel.grid
    edges = init.edges if init is not None and init.edges.n == w.n else EdgeIndex.from_wins(w)
    if init is not None and init.messages.shape == (edges.n_edges, grid.L):
        messages = init.messages.copy()
    else:
        messages = np.ones((edges.n_edges, grid.L))
    if edges.n_edges == 0:
        return MessageSet(edges, messages, grid, sweeps=0, converged=True, residual=0.0)

    rng = np.random.default_rng(opts.seed)
    residual = float("inf")
    history: list[float] = []
    accelerate = opts.accelerate
    backup = None
    for sweep in range(1, opts.max_sweeps + 1):
        if opts.schedule == "synchronous":
            new = _sweep_synchronous(edges, messages, kernel, opts.damping)
        else:
            new = _sweep_random(edges, messages, kernel, opts.damping, rng)
        _check_finite(new, sweep)
        residual = float(np.max(np.abs(new - messages)))
        if backup is not None:
            saved, saved_residual = backup
            backup = None
            if residual > 10.0 * saved_residual:
                # The jump overshot; return to the pre-jump state for good.
                log.debug("BP extrapolation rejected at sweep %d", sweep)
                accelerate = False
                messages = saved
                history.clear()
                continue
        previous, messages = messages, new
        history.append(residual)
        if residual <= opts.tol:
            return MessageSet(edges, messages, grid, sweeps=sweep, converged=True, residual=residual)
        if accelerate and len(history) >= 4 and sweep % 5 == 0:
            jumped = _extrapolate(previous, messages, history, grid.quad_weights)
            if jumped is not None:
                backup = (messages, residual)
                messages = jumped
                history.clear()
    log.warning("BP stopped after %d sweeps with residual %.3g", opts.max_sweeps, residual)
    return MessageSet(edges, messages, grid, sweeps=opts.max_sweeps, converged=False, residual=residual)


def marginals(msgs: MessageSet, kernel: Kernel) -> np.ndarray:
    """Node values of every player's posterior marginal, shape (n, L)."""
    edges = msgs.edges
    qw = kernel.grid.quad_weights
    if edges.n_edges == 0:
        return np.ones((edges.n, kernel.L))
    logh = evidence_logs(edges, msgs.messages, kernel)
    totals = edges.incidence @ logh
    return _normalize_log(totals, qw)


def marginal(msgs: MessageSet, w: WinMatrix, kernel: Kernel, i: int) -> Density:
    edges = msgs.edges
    into = np.flatnonzero(edges.tgt == i)
    if len(into) == 0:
        return Density.uniform(kernel.grid)
    logh = evidence_logs(edges, msgs.messages, kernel)
    vals = _normalize_log(logh[into].sum(axis=0)[None, :], kernel.grid.quad_weights)[0]
    return Density(vals, kernel.grid)


def joint_marginal(msgs: MessageSet, w: WinMatrix, kernel: Kernel, i: int, j: int) -> np.ndarray:
    """Joint density of (x_i, x_j) at node pairs for an observed pair, unit mass on [0,1]^2."""
    if i == j:
        raise ValueError("a joint marginal needs two distinct players")
    e = msgs.edges.edge(i, j)  # (i <- j): density over x_j
    wins, losses = msgs.edges.wins[e], msgs.edges.losses[e]
    cav_i = msgs.messages[msgs.edges.rev[e]]
    cav_j = msgs.messages[e]
    logk = _pair_log_kernel(kernel, wins, losses)
    joint = cav_i[:, None] * cav_j[None, :] * np.exp(logk - logk.max())
    qw = kernel.grid.quad_weights
    z = qw @ joint @ qw
    if not np.isfinite(z) or z <= 0:
        raise BPDivergenceError(f"joint marginal for ({i}, {j}) has no mass")
    return joint / z


def bethe_log_evidence(msgs: MessageSet, kernel: Kernel) -> float:
    """Bethe approximation of log P_b(w) from the messages (exact on trees at convergence).

    Binomial multiplicity factors are omitted.
    """
    edges = msgs.edges
    if edges.n_edges == 0:
        return 0.0
    log_qw = np.log(kernel.grid.quad_weights)
    logh = evidence_logs(edges, msgs.messages, kernel)
    totals = edges.incidence @ logh
    played = np.asarray(edges.incidence.sum(axis=1)).ravel() > 0
    node_terms = logsumexp(totals[played] + log_qw, axis=1).sum()
    # z_pair = int mu_{j<-i}(x) h_{(i<-j)}(x) dx over the even edges (a <- b).
    e = np.arange(0, edges.n_edges, 2)
    with np.errstate(divide="ignore"):
        log_cav = np.log(msgs.messages[edges.rev[e]])
    pair_terms = logsumexp(log_cav + logh[e] + log_qw, axis=1).sum()
    return float(node_terms - pair_terms)


@dataclass(eq=False)
class SkillPosterior:
    """Posterior marginals for every player, with joints available per observed pair."""

    wins: WinMatrix
    kernel: Kernel
    messages: MessageSet
    marginal_values: np.ndarray  # n x L

    @classmethod
    def from_messages(cls, w: WinMatrix, kernel: Kernel, msgs: MessageSet) -> "SkillPosterior":
        return cls(w, kernel, msgs, marginals(msgs, kernel))

    @property
    def grid(self) -> ChebGrid:
        return self.kernel.grid

    def marginal(self, i: int) -> Density:
        return Density(self.marginal_values[i].copy(), self.grid)

    def joint(self, i: int, j: int) -> np.ndarray:
        return joint_marginal(self.messages, self.wins, self.kernel, i, j)

    def has_pair(self, i: int, j: int) -> bool:
        try:
            self.messages.edges.edge(i, j)
        except KeyError:
            return False
        return True

    def means(self) -> np.ndarray:
        g = self.grid
        return self.marginal_values @ (g.quad_weights * g.nodes)

    def sds(self) -> np.ndarray:
        g = self.grid
        m = self.means()
        second = self.marginal_values @ (g.quad_weights * g.nodes**2)
        return np.sqrt(np.maximum(second - m**2, 0.0))


def infer_skills(w: WinMatrix, kernel: Kernel, opts: BPOptions | None = None, init: MessageSet | None = None) -> SkillPosterior:
    """Run BP and package the result as a posterior."""
    msgs = run_bp(w, kernel, opts, init)
    return SkillPosterior.from_messages(w, kernel, msgs)
