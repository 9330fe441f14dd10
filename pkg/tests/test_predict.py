import datetime as dt
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import dblquad

from kernrank.bp import infer_skills
from kernrank.chebkit import make_grid
from kernrank.model import MatchFormatError, WinMatrix, logistic, logistic_kernel
from kernrank.predict import (
    Bet,
    BacktestLedger,
    OddsRecord,
    RankingTable,
    backtest,
    choose_side,
    expected_profit,
    load_odds,
    parse_odds_lines,
    percentile,
    should_bet,
    win_probability,
    write_odds,
)

D = dt.date(2024, 3, 1)


@pytest.fixture(scope="module")
def duel():
    grid = make_grid(32)
    k = logistic_kernel(grid)
    w = WinMatrix.from_triples([("a", "b", 1)], labels=["c"])
    return k, infer_skills(w, k)


def test_percentiles(duel):
    _, post = duel
    ia, ib, ic = (post.wins.index(x) for x in "abc")
    assert percentile(post, ic) == pytest.approx(50.0, abs=1e-9)
    assert percentile(post, None) == 50.0
    assert percentile(post, ia) > 50 > percentile(post, ib)


def test_win_probability_new_players(duel):
    k, post = duel
    assert win_probability(None, k, None, None) == pytest.approx(0.5, abs=1e-15)
    assert win_probability(post, k, None, None) == pytest.approx(0.5, abs=1e-15)
    ic = post.wins.index("c")
    assert win_probability(post, k, ic, None) == pytest.approx(0.5, abs=1e-12)


def test_win_probability_complement(duel):
    k, post = duel
    ia, ib, ic = (post.wins.index(x) for x in "abc")
    for i, j in [(ia, ib), (ia, ic), (ib, ic)]:
        for joint in (True, False):
            total = win_probability(post, k, i, j, joint) + win_probability(post, k, j, i, joint)
            assert total == pytest.approx(1.0, abs=1e-8)


def test_win_probability_matches_quadrature_oracle(duel):
    k, post = duel
    num = dblquad(lambda y, x: logistic(x, y) ** 2, 0, 1, 0, 1, epsabs=1e-12)[0]
    den = dblquad(lambda y, x: logistic(x, y), 0, 1, 0, 1, epsabs=1e-12)[0]
    ia, ib = post.wins.index("a"), post.wins.index("b")
    assert win_probability(post, k, ia, ib) == pytest.approx(num / den, abs=1e-6)


def test_kernel_defaults_to_posterior_kernel(duel):
    k, post = duel
    ia, ib = post.wins.index("a"), post.wins.index("b")
    assert win_probability(post, None, ia, ib) == win_probability(post, k, ia, ib)
    with pytest.raises(ValueError):
        win_probability(None, None, None, None)


def test_ranking_table(duel):
    _, post = duel
    table = RankingTable.from_posterior(post)
    assert table.top(3) == ["a", "c", "b"]
    pct = [r.percentile for r in table.rows]
    assert pct == sorted(pct, reverse=True)
    assert all(0 <= p <= 100 for p in pct)
    assert [r.matches for r in table.rows] == [1, 0, 1]
    text = table.to_csv()
    assert text.splitlines()[0] == "rank,id,percentile,mean,sd,matches"
    assert text.splitlines()[1].startswith("1,a,")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_ranking_invariant_under_relabeling(seed):
    rng = np.random.default_rng(seed)
    names = [f"x{k}" for k in range(6)]
    triples = [(names[a], names[b], 1) for a, b in rng.integers(0, 6, size=(10, 2)) if a != b]
    k = logistic_kernel(make_grid(16))
    base = {r.player: r.percentile for r in RankingTable.from_posterior(infer_skills(WinMatrix.from_triples(triples), k)).rows}
    rename = {n: f"z{(7 * i) % 6}{n}" for i, n in enumerate(names)}
    moved = [(rename[a], rename[b], c) for a, b, c in triples]
    other = {r.player: r.percentile for r in RankingTable.from_posterior(infer_skills(WinMatrix.from_triples(moved), k)).rows}
    for n, p in base.items():
        assert other[rename[n]] == pytest.approx(p, abs=1e-7)


def test_betting_rule_examples():
    assert expected_profit(0.5, 2.0) == 0.0 and not should_bet(0.5, 2.0)
    assert expected_profit(0.6, 2.0) == pytest.approx(0.2) and should_bet(0.6, 2.0)
    assert expected_profit(0.9, 3.0) == pytest.approx(1.7) and not should_bet(0.9, 3.0)
    assert should_bet(0.5, 4.0)  # exactly 100% expected profit is still taken
    rec = OddsRecord(D, "a", "b", 2.0, 2.0, "a")
    assert choose_side(0.6, rec) == ("a", 0.6, 2.0)
    assert choose_side(0.4, rec)[0] == "b"
    assert choose_side(0.5, rec) is None


def test_bet_payoffs():
    win = Bet(D, "a", "b", "a", 0.6, 2.0, 1.0, 2.0)
    lose = Bet(D, "a", "b", "a", 0.6, 2.0, 1.0, 0.0)
    assert win.net == pytest.approx(1.0 * (2.0 - 1.0)) and lose.net == -1.0
    ledger = BacktestLedger("kernel")
    ledger.add(win)
    ledger.add(lose)
    assert ledger.total_return == pytest.approx(0.0)
    with pytest.raises(ValueError):
        ledger.add(Bet(D, "a", "b", "a", 0.6, 2.0, 0.0, 0.0))


def test_odds_records_validate():
    with pytest.raises(ValueError):
        OddsRecord(D, "a", "b", 1.0, 2.0, "a")
    with pytest.raises(ValueError):
        OddsRecord(D, "a", "b", 1.5, 2.0, "c")
    with pytest.raises(ValueError):
        OddsRecord(D, "a", "a", 1.5, 2.0, "a")
    assert OddsRecord(D, "a", "b", 1.5, 2.5, "b").loser == "a"


def test_parse_odds_file(tmp_path):
    lines = [
        "date,player_a,player_b,odds_a,odds_b,winner",
        "# comment",
        "2024-01-02,x,y,1.5,2.6,x",
        "2024-01-03,x,y,1.8,2.0,b",
    ]
    recs = parse_odds_lines(lines)
    assert [r.winner for r in recs] == ["x", "y"]
    path = tmp_path / "odds.csv"
    write_odds(path, recs)
    assert load_odds(path) == recs
    assert load_odds(io.StringIO("\n".join(lines))) == recs


@pytest.mark.parametrize(
    "bad",
    ["2024-01-02,x,y,1.5,2.6", "2024-13-02,x,y,1.5,2.6,x", "2024-01-02,x,y,0.9,2.6,x", "2024-01-02,x,y,1.5,2.6,z"],
)
def test_parse_odds_errors(bad):
    with pytest.raises(MatchFormatError) as err:
        parse_odds_lines(["# c", bad], source="o.csv")
    assert err.value.line == 2


def test_backtest_uses_trailing_window():
    k = logistic_kernel(make_grid(16))
    recs = [
        OddsRecord(dt.date(2024, 1, 1), "a", "b", 2.5, 1.6, "a"),
        OddsRecord(dt.date(2024, 1, 1), "a", "b", 2.5, 1.6, "a"),
        OddsRecord(dt.date(2024, 1, 2), "a", "b", 2.5, 1.6, "a"),
    ]
    ledger = backtest(recs, "kernel", kernel=k)
    # day one: nothing known, p = 1/2, edge 0.25 on a; the same-day result is not used
    assert [b.probability for b in ledger.bets[:2]] == [pytest.approx(0.5), pytest.approx(0.5)]
    assert ledger.bets[2].probability > 0.5
    # a result older than the window is forgotten
    old = [(dt.date(2022, 1, 1), "a", "b")] * 2
    ledger = backtest(recs[:1], "kernel", kernel=k, history=old, window_days=365)
    assert ledger.bets[0].probability == pytest.approx(0.5)
    ledger = backtest(recs[:1], "kernel", kernel=k, history=old, window_days=1000)
    assert ledger.bets[0].probability > 0.5


def test_backtest_accounting_and_rules():
    rng = np.random.default_rng(3)
    players = [f"p{k}" for k in range(8)]
    recs = []
    for d in range(20):
        for _ in range(5):
            a, b = rng.choice(players, 2, replace=False)
            recs.append(OddsRecord(D + dt.timedelta(days=d), a, b, 1 + 3 * rng.random() + 0.01, 1 + 3 * rng.random() + 0.01, a if rng.random() < 0.5 else b))
    k = logistic_kernel(make_grid(16))
    for strat in ("chance", "bradley-terry", "kernel"):
        ledger = backtest(recs, strat, kernel=k, seed=1)
        assert ledger.matches_seen == len(recs)
        assert ledger.cumulative()[-1] == pytest.approx(sum(b.payoff for b in ledger.bets) - sum(b.stake for b in ledger.bets))
        assert ledger.total_return == ledger.total_payoff - ledger.total_staked
        if strat == "chance":
            assert len(ledger.bets) == len(recs)
        else:
            assert all(0 < b.probability * b.odds - 1 <= 1 for b in ledger.bets)
        s = ledger.summary()
        assert s["bets"] == len(ledger.bets)
        assert ledger.daily_series()[-1][1] == pytest.approx(ledger.total_return)
        assert ledger.to_csv().count("\n") == len(ledger.bets) + 1


def test_backtest_argument_checks():
    rec = [OddsRecord(D, "a", "b", 2.0, 2.0, "a")]
    with pytest.raises(ValueError):
        backtest(rec, "martingale")
    with pytest.raises(ValueError):
        backtest(rec, "kernel")
    with pytest.raises(ValueError):
        backtest(rec[::-1] + [OddsRecord(D - dt.timedelta(days=1), "a", "b", 2.0, 2.0, "a")], "chance")
    with pytest.raises(ValueError):
        backtest(rec, "chance", window_days=0)
