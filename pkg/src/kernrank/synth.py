"""Synthetic tournaments with known skills and closed-form kernels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .model import WinMatrix

STEP_NOISE = 0.05


def _logistic(x, y, slope=5.0):
    return expit(slope * (x - y))


def _step(x, y, noise=STEP_NOISE):
    # Ties sit at 1/2 so that b(x, x) = 1/2 exactly.
    return noise + (1.0 - 2.0 * noise) * np.heaviside(np.asarray(x) - np.asarray(y), 0.5)


def _uniform(x, y):
    return 0.5 * (1.0 + (np.asarray(x) - np.asarray(y)))


def _complex(x, y):
    x, y = np.asarray(x), np.asarray(y)
    return expit((2.0 + 10.0 * x * y) * (x - y))


@dataclass(frozen=True)
class GroundTruthKernel:
    name: str
    fn: Callable = field(repr=False)

    def __call__(self, x, y):
        return self.fn(x, y)


_BUILTINS = {
    "logistic": _logistic,
    "step": _step,
    "uniform": _uniform,
    "complex": _complex,
}

KERNEL_NAMES = tuple(_BUILTINS)


def builtin_kernel(name: str) -> GroundTruthKernel:
    try:
        return GroundTruthKernel(name, _BUILTINS[name])
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {', '.join(_BUILTINS)}") from None


@dataclass(frozen=True)
class SynthConfig:
    n: int = 1024
    k: int = 64
    kernel: str = "logistic"
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two players")
        if self.k < 0:
            raise ValueError("matches per player must be non-negative")
        if (self.n * self.k) % 2:
            raise ValueError(f"n*k must be even for a {self.k}-regular pairing of {self.n} players")


def regular_pairing(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random k-regular multigraph as an (n*k/2) x 2 array of player pairs.

    Even n: k independent random perfect matchings. Odd n (k even): k/2
    random Hamiltonian cycles, each adding two matches per player.
    """
    if (n * k) % 2:
        raise ValueError(f"no {k}-regular pairing exists on {n} players")
    rounds = []
    if n % 2 == 0:
        for _ in range(k):
            perm = rng.permutation(n)
            rounds.append(perm.reshape(-1, 2))
    else:
        for _ in range(k // 2):
            perm = rng.permutation(n)
            rounds.append(np.stack([perm, np.roll(perm, -1)], axis=1))
    if not rounds:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(rounds).astype(np.int64)


def player_labels(n: int) -> tuple[str, ...]:
    width = len(str(max(n - 1, 0)))
    return tuple(f"p{k:0{width}d}" for k in range(n))


def simulate_outcomes(skills: np.ndarray, pairs: np.ndarray, kernel: GroundTruthKernel, rng: np.random.Generator) -> np.ndarray:
    """Winner/loser rows for each scheduled pair."""
    a, b = pairs[:, 0], pairs[:, 1]
    p_a = kernel(skills[a], skills[b])
    a_wins = rng.random(len(pairs)) < p_a
    return np.where(a_wins[:, None], pairs, pairs[:, ::-1])


def generate(config: SynthConfig) -> tuple[WinMatrix, np.ndarray]:
    """Simulate a tournament; returns the win matrix and the true skills."""
    rng = np.random.default_rng(config.seed)
    kernel = builtin_kernel(config.kernel)
    skills = rng.random(config.n)
    pairs = regular_pairing(config.n, config.k, rng)
    results = simulate_outcomes(skills, pairs, kernel, rng)
    counts = sp.csr_matrix(
        (np.ones(len(results), dtype=np.int64), (results[:, 0], results[:, 1])), shape=(config.n, config.n)
    )
    counts.sum_duplicates()
    return WinMatrix(counts=counts, labels=player_labels(config.n)), skills


def write_truth(path, labels, skills) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,skill\n")
        for lab, s in zip(labels, skills):
            fh.write(f"{lab},{float(s)!r}\n")


def bookmaker_odds(p_true, margin: float = 0.05, noise: float = 0.0, rng: np.random.Generator | None = None):
    """Decimal odds (o_a, o_b) quoted from true win probabilities.

    The book's estimate of p is the truth times a uniform factor in
    [1 - noise, 1 + noise]. Implied probabilities are scaled up by
    1 + margin, so 1/o_a + 1/o_b = 1 + margin. Lopsided matches can come out
    with odds at or below 1; callers decide whether to offer them.
    """
    p = np.asarray(p_true, dtype=float)
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        p = p * rng.uniform(1.0 - noise, 1.0 + noise, size=p.shape)
    with np.errstate(divide="ignore"):
        return 1.0 / (p * (1.0 + margin)), 1.0 / ((1.0 - p) * (1.0 + margin))


def priced_matches(
    skills: np.ndarray,
    labels,
    kernel: str | GroundTruthKernel,
    count: int,
    start,
    days: int = 1,
    margin: float = 0.05,
    noise: float = 0.0,
    seed: int = 0,
):
    """Random pairings with outcomes drawn from the kernel and odds from a
    synthetic bookmaker, spread evenly over ``days`` consecutive dates.

    Pairs the book would have to price at odds of 1 or less are not offered
    and are redrawn, which leaves the expected return of a random bet at
    exactly -margin / (1 + margin).
    """
    import datetime as dt

    from .predict import OddsRecord

    truth = builtin_kernel(kernel) if isinstance(kernel, str) else kernel
    rng = np.random.default_rng(seed)
    n = len(skills)
    if n < 2:
        raise ValueError("need at least two players")
    chunks, have = [], 0
    for _ in range(1000):
        if have >= count:
            break
        m = 2 * (count - have) + 16
        a = rng.integers(0, n, size=m)
        b = (a + rng.integers(1, n, size=m)) % n
        p = truth(skills[a], skills[b])
        a_wins = rng.random(m) < p
        o_a, o_b = bookmaker_odds(p, margin, noise, rng)
        ok = (o_a > 1.0) & (o_b > 1.0) & np.isfinite(o_a) & np.isfinite(o_b)
        chunks.append((a[ok], b[ok], a_wins[ok], o_a[ok], o_b[ok]))
        have += int(ok.sum())
    if have < count:
        raise ValueError("the bookmaker declines almost every pairing; lower the margin")
    a, b, a_wins, o_a, o_b = (np.concatenate(c)[:count] for c in zip(*chunks))
    day_of = np.arange(count) * days // max(count, 1)
    out = []
    for k in range(count):
        la, lb = labels[a[k]], labels[b[k]]
        date = start + dt.timedelta(days=int(day_of[k]))
        out.append(OddsRecord(date, la, lb, float(o_a[k]), float(o_b[k]), la if a_wins[k] else lb))
    return out
