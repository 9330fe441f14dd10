"""Acceptance criteria 1-11, one pass/fail line each (see the pytest summary)."""

import csv
import datetime as dt
import os
import time
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp

from kernrank import bp, em, mstep_nn, predict, synth
from kernrank.chebkit import integrate_2d, make_grid
from kernrank.mstep_cheb import MonotoneParams, monotone_values, objective_and_gradient
from kernrank.model import Kernel, WinMatrix, load_matches, logistic, logistic_kernel
from oracles import count_local_maxima, gauss_legendre01, labeled_trees, masked_mae, tensor_posterior, weighted_rms
from reporting import record, skipped

N_SYNTH, K_SYNTH, SYNTH_SEED = 256, 64, 1
MAE_LIMIT = {"logistic": 0.05, "uniform": 0.05, "step": 0.10, "complex": 0.10}
MARGIN = 0.05


@pytest.fixture(scope="session")
def fits():
    """Chebyshev EM on each built-in truth; shared by criteria 4, 5, 7 and 10."""
    out = {}
    for name in synth.KERNEL_NAMES:
        w, skills = synth.generate(synth.SynthConfig(n=N_SYNTH, k=K_SYNTH, kernel=name, seed=SYNTH_SEED))
        t0 = time.perf_counter()
        kernel, post, state = em.em_fit(w)
        out[name] = dict(w=w, skills=skills, kernel=kernel, post=post, state=state, seconds=time.perf_counter() - t0)
    return out


def test_criterion_1_quadrature():
    t0 = time.perf_counter()
    grid = make_grid.__wrapped__(32)
    u = grid.nodes
    err = 0.0
    for a in range(32):
        for b in range(32):
            val = integrate_2d(np.outer(u**a, u**b), grid)
            err = max(err, abs(val - 1.0 / ((a + 1) * (b + 1))))
    secs = time.perf_counter() - t0
    ok = err <= 1e-10 and secs < 1.0
    assert record(1, "quadrature exactness", ok, f"max error {err:.2e}, {secs:.3f} s")


def _tree_cases(rng):
    for n in (1, 2, 3, 4):
        for edges in labeled_trees(n):
            recs = []
            for i, j in edges:
                a = b = 0
                while a + b == 0:
                    a, b = (int(v) for v in rng.integers(0, 6, size=2))
                recs.append((i, j, a, b))
            yield n, recs


def test_criterion_2_bp_matches_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    kernel = logistic_kernel(make_grid(32))
    nodes, weights = gauss_legendre01(40)
    worst, cases = 0.0, 0
    for n, recs in _tree_cases(rng):
        W = np.zeros((n, n), dtype=int)
        for i, j, a, b in recs:
            W[i, j], W[j, i] = a, b
        post = bp.infer_skills(WinMatrix.from_dense(W), kernel)
        dens = tensor_posterior(n, recs, logistic, nodes, weights)
        oracle_means = dens @ (weights * nodes)
        worst = max(worst, float(np.abs(post.means() - oracle_means).max()))
        cases += 1
    secs = time.perf_counter() - t0
    ok = worst <= 1e-4 and secs < 30.0
    assert record(2, "BP vs tensor-quadrature oracle", ok, f"{cases} trees, max mean error {worst:.2e}, {secs:.1f} s")


def test_criterion_3_null_data():
    w = WinMatrix(sp.csr_matrix((5, 5), dtype=np.int64), tuple("abcde"))
    _, post, _ = em.em_fit(w)
    dev = float(np.abs(post.marginal_values - 1.0).max())
    table = predict.RankingTable.from_posterior(post)
    pct = np.array([row.percentile for row in table.rows])
    ok = dev <= 1e-6 and np.all(np.abs(pct - 50.0) <= 0.1)
    assert record(3, "null data gives uniform marginals", ok, f"max deviation {dev:.1e}, percentiles {pct.min():.3f}..{pct.max():.3f}")


def _truth_at_nodes(name):
    x = make_grid(32).nodes
    return synth.builtin_kernel(name)(x[:, None], x[None, :])


def test_criterion_4_synthetic_recovery(fits):
    parts, ok = [], True
    for name, fit in fits.items():
        mae = masked_mae(fit["kernel"].node_values, _truth_at_nodes(name), fit["state"].q.cell_mass())
        ok &= mae <= MAE_LIMIT[name]
        parts.append(f"{name} {mae:.4f}/{MAE_LIMIT[name]} in {fit['seconds']:.0f} s")
    total = sum(f["seconds"] for f in fits.values())
    ok &= total < 600
    assert record(4, "synthetic kernel recovery", ok, "; ".join(parts))


def test_criterion_5_cross_backend(fits):
    ref = fits["logistic"]
    opts = em.EMOptions(backend="neural", max_iters=4, train=mstep_nn.TrainOptions(epochs=5))
    t0 = time.perf_counter()
    nn_kernel, _, _ = em.em_fit(ref["w"], opts=opts)
    secs = time.perf_counter() - t0
    rms = weighted_rms(ref["kernel"].node_values, nn_kernel.node_values, ref["state"].q.cell_mass())
    assert record(5, "Chebyshev vs neural backend", rms <= 0.1, f"weighted RMS {rms:.4f}, neural fit {secs:.0f} s")


def test_criterion_6_monotone_parameterization():
    L = 32
    grid = make_grid(L)
    rng = np.random.default_rng(6)
    anti = mono = True
    for _ in range(1000):
        f = monotone_values(MonotoneParams(rng.normal(scale=rng.uniform(0.05, 3.0), size=(L, L))))
        anti &= bool(np.array_equal(f, -f.T)) and bool(np.all(np.diag(f) == 0))
        mono &= bool(np.all(np.diff(f, axis=0) >= 0) and np.all(np.diff(f, axis=1) <= 0))
    worst = 0.0
    for _ in range(1000):
        params = MonotoneParams(rng.normal(scale=rng.uniform(0.1, 1.0), size=(L, L)))
        Q = 100.0 * rng.random((L, L))
        _, grad = objective_and_gradient(params, Q, grid)
        vec = params.vector()
        d = rng.normal(size=vec.size)
        d /= np.linalg.norm(d)
        h = 1e-4 * np.linalg.norm(vec) / np.sqrt(vec.size)
        fp = objective_and_gradient(MonotoneParams.from_vector(vec + h * d, L), Q, grid)[0]
        fm = objective_and_gradient(MonotoneParams.from_vector(vec - h * d, L), Q, grid)[0]
        fd = (fp - fm) / (2 * h)
        an = grad @ d
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-12 * np.abs(grad).sum()))
    ok = anti and mono and worst <= 1e-4
    detail = f"antisymmetric {anti}, monotone {mono}, max relative gradient error {worst:.1e}"
    assert record(6, "monotone parameterization", ok, detail)


def test_criterion_7_em_ascent(fits):
    worst, parts = np.inf, []
    for name, fit in fits.items():
        diffs = np.diff(fit["state"].bound_trace)
        low = float(diffs.min()) if diffs.size else 0.0
        worst = min(worst, low)
        parts.append(f"{name} {len(diffs)} steps")
    ok = worst >= -1e-3
    assert record(7, "EM bound is non-decreasing", ok, f"smallest step {worst:.2e}; " + ", ".join(parts))


def _newcomer_modes(w, truth):
    grid = make_grid(32)
    kernel = Kernel.from_function(synth.builtin_kernel(truth), grid)
    post = bp.infer_skills(w, kernel)
    order = np.argsort(post.means())
    n = w.n
    C = sp.lil_matrix((n + 1, n + 1), dtype=np.int64)
    C[:n, :n] = w.counts
    for h in order[-3:]:
        C[n, h] = 1
    for lo in order[:3]:
        C[lo, n] = 1
    post2 = bp.infer_skills(WinMatrix(C.tocsr(), w.labels + ("newcomer",)), kernel)
    return count_local_maxima(post2.marginal_values[n])


def test_criterion_8_multimodality():
    w, _ = synth.generate(synth.SynthConfig(n=N_SYNTH, k=K_SYNTH, kernel="step", seed=2))
    step_modes = _newcomer_modes(w, "step")
    logistic_modes = _newcomer_modes(w, "logistic")
    ok = step_modes >= 2 and logistic_modes == 1
    assert record(8, "multimodal marginal under step kernel", ok, f"step {step_modes} modes, logistic {logistic_modes}")


def test_criterion_9_chance_margin():
    w, skills = synth.generate(synth.SynthConfig(n=N_SYNTH, k=2, kernel="complex", seed=9))
    recs = synth.priced_matches(skills, w.labels, "complex", 10_000, dt.date(2024, 1, 1), days=10, margin=MARGIN, seed=5)
    ledger = predict.backtest(recs, "chance", seed=1)
    nets = np.array([b.net / b.stake for b in ledger.bets])
    mean, sigma = nets.mean(), nets.std(ddof=1) / np.sqrt(len(nets))
    target = -MARGIN / (1 + MARGIN)
    within = abs(mean - target) <= 3 * sigma
    # accounting: payoff is stake * odds on a win and nothing on a loss; totals add up exactly
    per_bet = all(b.payoff == (b.stake * b.odds if b.side == rec.winner else 0.0) for b, rec in zip(ledger.bets, recs))
    exact = sum(Fraction(b.payoff) - Fraction(b.stake) for b in ledger.bets) == sum(map(Fraction, (b.payoff for b in ledger.bets))) - sum(
        map(Fraction, (b.stake for b in ledger.bets))
    )
    summed = ledger.total_return == ledger.total_payoff - ledger.total_staked
    ok = within and per_bet and exact and summed and len(ledger.bets) == 10_000
    detail = f"mean {mean:+.4f} vs {target:+.4f}, sigma {sigma:.4f}, accounting {per_bet and exact and summed}"
    assert record(9, "chance strategy pays the margin", ok, detail)


def test_criterion_10_kernel_beats_chance(fits):
    fit = fits["complex"]
    w, skills = fit["w"], fit["skills"]
    coo = w.counts.tocoo()
    history = [(dt.date(2023, 6, 1), w.labels[i], w.labels[j]) for i, j, c in zip(coo.row, coo.col, coo.data) for _ in range(int(c))]
    recs = synth.priced_matches(skills, w.labels, "complex", 10_000, dt.date(2024, 1, 1), days=5, margin=MARGIN, noise=0.1, seed=7)
    results = {}
    for strategy in ("chance", "bradley-terry", "kernel"):
        ledger = predict.backtest(recs, strategy, kernel=fit["kernel"], history=history, seed=1)
        results[strategy] = ledger
    ok = results["kernel"].total_return > results["chance"].total_return
    detail = ", ".join(f"{s} {l.total_return:+.1f} over {len(l.bets)} bets" for s, l in results.items())
    assert record(10, "inferred kernel beats chance", ok, detail)


TABLE_TOP10 = ("Sinner", "Alcaraz", "Zverev", "Medvedev", "Djokovic", "De Minaur", "Fritz", "Dimitrov", "Paul", "Hurkacz")


def _load_atp(path):
    with open(path, newline="") as fh:
        head = fh.readline()
    if "winner_name" not in head:
        return load_matches(path)
    with open(path, newline="") as fh:
        triples = [(r["winner_name"], r["loser_name"], 1) for r in csv.DictReader(fh) if r["winner_name"] and r["loser_name"]]
    return WinMatrix.from_triples(triples)


def adjacent_swaps_only(got, want) -> bool:
    i = 0
    while i < len(want):
        if got[i] == want[i]:
            i += 1
        elif i + 1 < len(want) and got[i] == want[i + 1] and got[i + 1] == want[i]:
            i += 2
        else:
            return False
    return True


def test_adjacent_swap_helper():
    assert adjacent_swaps_only("abcd", "abcd")
    assert adjacent_swaps_only("bacd", "abcd")
    assert not adjacent_swaps_only("cabd", "abcd")


def test_criterion_11_atp_2024():
    path = os.environ.get("KERNRANK_ATP2024")
    title = "ATP 2024 ranking"
    if not path or not os.path.exists(path):
        skipped(11, title, "set KERNRANK_ATP2024 to a 2024 match file")
        pytest.skip("ATP 2024 data not available")
    w = _load_atp(path)
    _, post, _ = em.em_fit(w)
    table = predict.RankingTable.from_posterior(post)
    top = table.top(10)

    def surname(label):
        return next((s for s in TABLE_TOP10 if label.endswith(s)), label)

    got = tuple(surname(label) for label in top)
    top_pct = table.rows[0].percentile
    ok = abs(top_pct - 99.7) <= 0.5 and adjacent_swaps_only(got, TABLE_TOP10)
    assert record(11, title, ok, f"top percentile {top_pct:.2f}, order {', '.join(got)}")
