"""Win matrices, kernels b(x, y) and the logistic baseline."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logit

from .chebkit import ChebFun2D, ChebGrid, evaluate, make_grid, vals_to_coeffs_2d

EPS = 1e-9
DEFAULT_SLOPE = 5.0


class MatchFormatError(ValueError):
    """A match record could not be parsed."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass(frozen=True, eq=False)
class WinMatrix:
    """Directed win counts ``w[i, j]`` = number of times i beat j."""

    counts: sp.csr_matrix
    labels: tuple[str, ...]

    def __post_init__(self):
        n = len(self.labels)
        if self.counts.shape != (n, n):
            raise ValueError(f"count matrix shape {self.counts.shape} does not match {n} labels")
        if self.counts.nnz and (self.counts.data < 0).any():
            raise ValueError("win counts must be non-negative")
        if self.counts.diagonal().any():
            raise ValueError("self-matches are not allowed")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def index(self, label: str) -> int:
        return self._index[label]

    @property
    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {lab: i for i, lab in enumerate(self.labels)}
            object.__setattr__(self, "_index_cache", cache)
        return cache

    def __getitem__(self, ij) -> int:
        i, j = ij
        return int(self.counts[i, j])

    def to_dense(self) -> np.ndarray:
        return self.counts.toarray()

    def pairs(self):
        """Observed unordered pairs as arrays ``(i, j, w_ij, w_ji)`` with i < j."""
        sym = (self.counts + self.counts.T).tocoo()
        mask = sym.row < sym.col
        i = sym.row[mask].astype(np.int64)
        j = sym.col[mask].astype(np.int64)
        order = np.lexsort((j, i))
        i, j = i[order], j[order]
        w = self.counts.tocsr()
        wij = np.asarray(w[i, j]).ravel().astype(float) if len(i) else np.zeros(0)
        wji = np.asarray(w[j, i]).ravel().astype(float) if len(i) else np.zeros(0)
        return i, j, wij, wji

    def match_counts(self) -> np.ndarray:
        """Number of matches played by each player."""
        c = self.counts
        return np.asarray(c.sum(axis=0)).ravel() + np.asarray(c.sum(axis=1)).ravel()

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, int]], labels: Iterable[str] = ()) -> "WinMatrix":
        """Build from (winner, loser, count) triples; ``labels`` adds players with no matches."""
        triples = list(triples)
        names = sorted(set(labels) | {t[0] for t in triples} | {t[1] for t in triples})
        index = {lab: k for k, lab in enumerate(names)}
        n = len(names)
        rows, cols, data = [], [], []
        for winner, loser, count in triples:
            if winner == loser:
                raise ValueError(f"player {winner!r} cannot play themself")
            if count < 0:
                raise ValueError("win counts must be non-negative")
            rows.append(index[winner])
            cols.append(index[loser])
            data.append(count)
        counts = sp.csr_matrix(
            (np.asarray(data, dtype=np.int64), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
            shape=(n, n),
        )
        counts.sum_duplicates()
        counts.eliminate_zeros()
        return cls(counts=counts, labels=tuple(names))

    @classmethod
    def from_dense(cls, w, labels: Iterable[str] | None = None) -> "WinMatrix":
        w = np.asarray(w)
        n = w.shape[0]
        if labels is None:
            width = len(str(max(n - 1, 0)))
            labels = [f"p{k:0{width}d}" for k in range(n)]
        counts = sp.csr_matrix(w.astype(np.int64))
        counts.eliminate_zeros()
        return cls(counts=counts, labels=tuple(labels))


def parse_match_lines(lines: Iterable[str], source: str | None = None) -> list[tuple[str, str, int]]:
    triples = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
            raise MatchFormatError(f"expected 'winner,loser[,count]', got {line!r}", lineno, source)
        winner, loser = parts[0], parts[1]
        if winner == loser:
            raise MatchFormatError(f"winner and loser are both {winner!r}", lineno, source)
        count = 1
        if len(parts) == 3:
            try:
                count = int(parts[2])
            except ValueError:
                raise MatchFormatError(f"count {parts[2]!r} is not an integer", lineno, source) from None
            if count < 0:
                raise MatchFormatError(f"negative count {count}", lineno, source)
        triples.append((winner, loser, count))
    return triples


def load_matches(source) -> WinMatrix:
    """Read match records from a path, an open text stream, or an iterable of lines.

    Each record is ``winner,loser`` or ``winner,loser,count``; ``#`` starts a
    comment line. Player ids are compacted to ``0..n-1`` in sorted order.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            triples = parse_match_lines(fh, source=os.fspath(source))
    elif isinstance(source, io.IOBase):
        triples = parse_match_lines(source, source=getattr(source, "name", None))
    else:
        triples = parse_match_lines(source)
    return WinMatrix.from_triples(triples)


def write_matches(path, w: WinMatrix, aggregated: bool = True) -> None:
    """Write ``winner,loser,count`` rows, or one ``winner,loser`` line per match."""
    coo = w.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        if aggregated:
            fh.write("# winner,loser,count\n")
        for k in order:
            a, b, c = w.labels[coo.row[k]], w.labels[coo.col[k]], int(coo.data[k])
            if aggregated:
                fh.write(f"{a},{b},{c}\n")
            else:
                fh.write(f"{a},{b}\n" * c)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Win-probability kernel b(x, y) = sigmoid(f(x, y)) on a Chebyshev grid.

    ``log_odds`` holds f at node pairs and is exactly antisymmetric.
    """

    log_odds: np.ndarray
    grid: ChebGrid
    f_fun: ChebFun2D = field(init=False, repr=False, compare=False)
    node_values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        f = np.array(self.log_odds, dtype=float)
        if f.shape != (self.grid.L, self.grid.L):
            raise ValueError(f"log-odds grid must be {self.grid.L}x{self.grid.L}, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("kernel log-odds must be finite")
        bound = logit(1.0 - EPS)
        f = np.clip(0.5 * (f - f.T), -bound, bound)
        f.setflags(write=False)
        b = np.clip(expit(f), EPS, 1.0 - EPS)
        b.setflags(write=False)
        object.__setattr__(self, "log_odds", f)
        object.__setattr__(self, "node_values", b)
        object.__setattr__(self, "f_fun", vals_to_coeffs_2d(f, self.grid))

    @property
    def L(self) -> int:
        return self.grid.L

    def log_b(self) -> np.ndarray:
        """log b(x_k, x_m) at node pairs, computed stably from the log-odds."""
        return -np.logaddexp(0.0, -self.log_odds)

    def __call__(self, x, y):
        return kernel_eval(self, x, y)

    @classmethod
    def from_values(cls, b, grid: ChebGrid) -> "Kernel":
        b = np.clip(np.asarray(b, dtype=float), EPS, 1.0 - EPS)
        return cls(logit(b), grid)

    @classmethod
    def from_function(cls, fn, grid: ChebGrid) -> "Kernel":
        """Sample a callable b(x, y) at the node pairs."""
        X, Y = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
        return cls.from_values(fn(X, Y), grid)


def kernel_eval(kernel: Kernel, x, y):
    f = evaluate(kernel.f_fun, x, y)
    return np.clip(expit(f), EPS, 1.0 - EPS) if np.ndim(f) else float(np.clip(expit(f), EPS, 1.0 - EPS))


def logistic(x, y, slope: float = DEFAULT_SLOPE):
    """Bradley-Terry win probability on the percentile scale."""
    return expit(slope * (np.asarray(x) - np.asarray(y)))


def logistic_kernel(grid: ChebGrid | None = None, slope: float = DEFAULT_SLOPE) -> Kernel:
    grid = grid or make_grid()
    X, Y = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
    return Kernel(slope * (X - Y), grid)
