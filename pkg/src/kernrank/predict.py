"""Rankings, pairwise win probabilities and a rolling-window betting backtest."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bp import BPOptions, SkillPosterior, infer_skills
from .chebkit import ChebGrid
from .model import DEFAULT_SLOPE, Kernel, MatchFormatError, WinMatrix, logistic_kernel

log = logging.getLogger(__name__)

STRATEGIES = ("chance", "bradley-terry", "kernel")
MAX_EDGE = 1.0  # expected profit above 100% is treated as a model error


# ---------------------------------------------------------------- rankings


def percentile(posterior: SkillPosterior | None, i: int | None) -> float:
    """100 times the posterior mean skill; 50 for a player the posterior does not know."""
    if posterior is None or i is None:
        return 50.0
    return float(100.0 * posterior.means()[i])


@dataclass(frozen=True)
class RankingRow:
    rank: int
    player: str
    percentile: float
    mean: float
    sd: float
    matches: int


@dataclass
class RankingTable:
    rows: list = field(default_factory=list)

    @classmethod
    def from_posterior(cls, posterior: SkillPosterior) -> "RankingTable":
        w = posterior.wins
        means = posterior.means()
        sds = posterior.sds()
        counts = w.match_counts()
        labels = w.labels or tuple(str(k) for k in range(w.n))
        # Ties broken by label so the table does not depend on input order.
        order = sorted(range(w.n), key=lambda k: (-means[k], labels[k]))
        rows = [
            RankingRow(r + 1, labels[k], float(100.0 * means[k]), float(means[k]), float(sds[k]), int(counts[k]))
            for r, k in enumerate(order)
        ]
        return cls(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def top(self, count: int) -> list:
        return [row.player for row in self.rows[:count]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rank,id,percentile,mean,sd,matches\n")
        for row in self.rows:
            buf.write(f"{row.rank},{row.player},{row.percentile:.4f},{row.mean:.6f},{row.sd:.6f},{row.matches}\n")
        return buf.getvalue()


def rank_players(posterior: SkillPosterior) -> RankingTable:
    return RankingTable.from_posterior(posterior)


# ---------------------------------------------------------------- win probabilities


def _kernel_quad(kernel: Kernel) -> np.ndarray:
    qw = kernel.grid.quad_weights
    return kernel.node_values * np.outer(qw, qw)


def _marginal_or_prior(posterior: SkillPosterior | None, i: int | None, grid: ChebGrid) -> np.ndarray:
    if posterior is None or i is None:
        return np.ones(grid.L)
    return posterior.marginal_values[i]


def win_probability(
    posterior: SkillPosterior | None,
    kernel: Kernel | None,
    i: int | None,
    j: int | None,
    use_joint: bool = True,
) -> float:
    """Expected probability that player i beats player j.

    Integrates b against the pair joint when the two have played each other
    (and ``use_joint`` is set), otherwise against the product of the two
    marginals. A player index of None stands for someone with no record and
    gets the uniform prior.
    """
    if kernel is None:
        if posterior is None:
            raise ValueError("need a kernel or a posterior")
        kernel = posterior.kernel
    if i is not None and i == j:
        return 0.5
    if use_joint and posterior is not None and i is not None and j is not None and posterior.has_pair(i, j):
        joint = posterior.joint(i, j)
        return float(np.sum(joint * _kernel_quad(kernel)))
    mi = _marginal_or_prior(posterior, i, kernel.grid)
    mj = _marginal_or_prior(posterior, j, kernel.grid)
    return float(mi @ _kernel_quad(kernel) @ mj)


# ---------------------------------------------------------------- odds data


@dataclass(frozen=True)
class OddsRecord:
    """One priced match. ``winner`` is the id of player a or player b."""

    date: dt.date
    player_a: str
    player_b: str
    odds_a: float
    odds_b: float
    winner: str

    def __post_init__(self):
        if self.player_a == self.player_b:
            raise ValueError(f"player {self.player_a!r} cannot face themselves")
        if not (self.odds_a > 1.0 and self.odds_b > 1.0):
            raise ValueError(f"decimal odds must exceed 1, got {self.odds_a}, {self.odds_b}")
        if self.winner not in (self.player_a, self.player_b):
            raise ValueError(f"winner {self.winner!r} is neither {self.player_a!r} nor {self.player_b!r}")

    @property
    def loser(self) -> str:
        return self.player_b if self.winner == self.player_a else self.player_a


ODDS_HEADER = ("date", "player_a", "player_b", "odds_a", "odds_b", "winner")


def parse_odds_lines(lines: Iterable[str], source: str | None = None) -> list[OddsRecord]:
    """Parse ``date,player_a,player_b,odds_a,odds_b,winner`` rows.

    A header row, blank lines and ``#`` comments are skipped. The winner may
    be given as a player id or as the literal ``a`` / ``b``.
    """
    records = []
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = [p.strip() for p in next(csv.reader([text]))]
        if tuple(p.lower() for p in parts) == ODDS_HEADER:
            continue
        if len(parts) != 6:
            raise MatchFormatError(f"expected 6 fields, got {len(parts)}", lineno, source)
        date, a, b, oa, ob, winner = parts
        if winner == "a" and "a" not in (a, b):
            winner = a
        elif winner == "b" and "b" not in (a, b):
            winner = b
        try:
            rec = OddsRecord(dt.date.fromisoformat(date), a, b, float(oa), float(ob), winner)
        except ValueError as exc:
            raise MatchFormatError(str(exc), lineno, source) from None
        records.append(rec)
    return records


def load_odds(source) -> list[OddsRecord]:
    if isinstance(source, (list, tuple)):
        return parse_odds_lines(source)
    if hasattr(source, "read"):
        return parse_odds_lines(source, getattr(source, "name", None))
    with open(source, encoding="utf-8") as fh:
        return parse_odds_lines(fh, str(source))


def write_odds(path, records: Sequence[OddsRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ODDS_HEADER) + "\n")
        for r in records:
            fh.write(f"{r.date.isoformat()},{r.player_a},{r.player_b},{r.odds_a!r},{r.odds_b!r},{r.winner}\n")


# ---------------------------------------------------------------- betting


def expected_profit(p: float, odds: float) -> float:
    """Expected profit per unit staked on a side with win probability p."""
    return p * odds - 1.0


def should_bet(p: float, odds: float) -> bool:
    edge = expected_profit(p, odds)
    return 0.0 < edge <= MAX_EDGE


def choose_side(p_a: float, rec: OddsRecord):
    """Side to back under the edge rule, or None. Returns (side, p, odds)."""
    options = []
    for side, p, o in (("a", p_a, rec.odds_a), ("b", 1.0 - p_a, rec.odds_b)):
        if should_bet(p, o):
            options.append((expected_profit(p, o), side, p, o))
    if not options:
        return None
    _, side, p, o = max(options)
    return side, p, o


@dataclass(frozen=True)
class Bet:
    date: dt.date
    player_a: str
    player_b: str
    side: str  # id of the backed player
    probability: float
    odds: float
    stake: float
    payoff: float  # gross return: stake * odds on a win, 0 on a loss

    @property
    def net(self) -> float:
        return self.payoff - self.stake


@dataclass
class BacktestLedger:
    strategy: str
    bets: list = field(default_factory=list)
    matches_seen: int = 0

    def add(self, bet: Bet) -> None:
        if not bet.stake > 0:
            raise ValueError("stakes must be positive")
        self.bets.append(bet)

    @property
    def total_staked(self) -> float:
        return float(sum(b.stake for b in self.bets))

    @property
    def total_payoff(self) -> float:
        return float(sum(b.payoff for b in self.bets))

    @property
    def total_return(self) -> float:
        return self.total_payoff - self.total_staked

    def cumulative(self) -> np.ndarray:
        """Running bankroll change after each bet."""
        return np.cumsum([b.net for b in self.bets]) if self.bets else np.zeros(0)

    def return_per_stake(self) -> float:
        """Total return divided by total staked; comparable across strategies."""
        staked = self.total_staked
        return self.total_return / staked if staked > 0 else 0.0

    def normalized_cumulative(self) -> np.ndarray:
        staked = self.total_staked
        return self.cumulative() / staked if staked > 0 else self.cumulative()

    def daily_series(self) -> list[tuple[dt.date, float]]:
        """Cumulative return at the end of each betting day."""
        out: list[tuple[dt.date, float]] = []
        running = 0.0
        for bet in self.bets:
            running += bet.net
            if out and out[-1][0] == bet.date:
                out[-1] = (bet.date, running)
            else:
                out.append((bet.date, running))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("date,player_a,player_b,side,probability,odds,stake,payoff,cumulative\n")
        running = 0.0
        for b in self.bets:
            running += b.net
            buf.write(
                f"{b.date.isoformat()},{b.player_a},{b.player_b},{b.side},{b.probability:.6f},"
                f"{b.odds:.6g},{b.stake:.6g},{b.payoff:.6g},{running:.6g}\n"
            )
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "matches": self.matches_seen,
            "bets": len(self.bets),
            "staked": self.total_staked,
            "payoff": self.total_payoff,
            "return": self.total_return,
            "return_per_stake": self.return_per_stake(),
        }


def _group_by_day(records: Sequence[OddsRecord]):
    day, batch = None, []
    for rec in records:
        if rec.date != day and batch:
            yield day, batch
            batch = []
        day = rec.date
        batch.append(rec)
    if batch:
        yield day, batch


def _window_posterior(results, kernel: Kernel, bp_opts: BPOptions | None):
    if not results:
        return None, {}
    w = WinMatrix.from_triples(((winner, loser, 1) for _, winner, loser in results))
    index = {lab: k for k, lab in enumerate(w.labels)}
    return infer_skills(w, kernel, bp_opts), index


def backtest(
    records: Sequence[OddsRecord],
    strategy: str = "kernel",
    kernel: Kernel | None = None,
    window_days: int = 365,
    history: Iterable[tuple[dt.date, str, str]] = (),
    stake: float = 1.0,
    seed: int = 0,
    slope: float = DEFAULT_SLOPE,
    use_joint: bool = True,
    bp_opts: BPOptions | None = None,
) -> BacktestLedger:
    """Replay priced matches day by day and bet a fixed stake on positive edges.

    Before each match day the skills are re-inferred by BP on all results in
    the trailing ``window_days`` (matches on the day itself are excluded),
    under a fixed kernel: ``kernel`` for the kernel strategy, the logistic
    kernel with ``slope`` for ``bradley-terry``. ``history`` supplies
    ``(date, winner, loser)`` results that precede the priced records.
    The chance strategy backs a uniformly random side in every match.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if window_days < 1:
        raise ValueError("window must be at least one day")
    if not stake > 0:
        raise ValueError("stake must be positive")
    records = list(records)
    if any(b.date < a.date for a, b in zip(records, records[1:])):
        raise ValueError("odds records must be in date order")
    if strategy == "kernel" and kernel is None:
        raise ValueError("the kernel strategy needs a fitted kernel")
    if strategy == "bradley-terry":
        kernel = logistic_kernel(kernel.grid if kernel is not None else None, slope)

    ledger = BacktestLedger(strategy)
    rng = np.random.default_rng(seed)
    results = sorted(history)
    window = dt.timedelta(days=window_days)

    for day, batch in _group_by_day(records):
        ledger.matches_seen += len(batch)
        if strategy == "chance":
            sides = rng.random(len(batch)) < 0.5
            for rec, pick_a in zip(batch, sides):
                side, o = (rec.player_a, rec.odds_a) if pick_a else (rec.player_b, rec.odds_b)
                ledger.add(Bet(day, rec.player_a, rec.player_b, side, 0.5, o, stake, stake * o if rec.winner == side else 0.0))
        else:
            recent = [r for r in results if day - window <= r[0] < day]
            posterior, index = _window_posterior(recent, kernel, bp_opts)
            for rec in batch:
                p_a = win_probability(posterior, kernel, index.get(rec.player_a), index.get(rec.player_b), use_joint)
                choice = choose_side(p_a, rec)
                if choice is None:
                    continue
                side_key, p, o = choice
                side = rec.player_a if side_key == "a" else rec.player_b
                ledger.add(Bet(day, rec.player_a, rec.player_b, side, p, o, stake, stake * o if rec.winner == side else 0.0))
            log.debug("%s: %d results in window, %d bets so far", day, len(recent), len(ledger.bets))
        results.extend((rec.date, rec.winner, rec.loser) for rec in batch)
    return ledger
