"""Command-line interface: ``kernrank <fit|rank|predict|synth|backtest|export-kernel>``.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines
(option names with dashes or underscores); flags given on the command line
take precedence. Failures print one line ``kernrank: error: <code>: <message>``
to stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import configparser
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bp import BPOptions, infer_skills
from .chebkit import ChebGrid, make_grid
from .em import BACKENDS, EMOptions, em_fit
from .model import DEFAULT_SLOPE, Kernel, MatchFormatError, WinMatrix, load_matches, logistic_kernel, write_matches
from .predict import STRATEGIES, RankingTable, backtest, load_odds, win_probability, write_odds

log = logging.getLogger("kernrank")


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- tables


def kernel_table(kernel: Kernel) -> str:
    """b(x_k, y_m) at node pairs; the header row holds the y nodes, the first column the x nodes."""
    nodes = kernel.grid.nodes
    lines = ["x\\y," + ",".join(repr(float(v)) for v in nodes)]
    for k, x in enumerate(nodes):
        lines.append(repr(float(x)) + "," + ",".join(repr(float(v)) for v in kernel.node_values[k]))
    return "\n".join(lines) + "\n"


def write_kernel_table(path, kernel: Kernel) -> None:
    write_text(path, kernel_table(kernel))


def read_kernel_table(path) -> Kernel:
    with open(path, encoding="utf-8") as fh:
        rows = [line.strip().split(",") for line in fh if line.strip() and not line.startswith("#")]
    if not rows or rows[0][0] != "x\\y":
        raise CLIError("kernel-format", f"{path}: missing 'x\\y' header row")
    try:
        ys = np.array([float(v) for v in rows[0][1:]])
        body = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise CLIError("kernel-format", f"{path}: {exc}") from None
    L = len(ys)
    if body.shape != (L, L + 1):
        raise CLIError("kernel-format", f"{path}: expected {L} rows of {L + 1} values")
    grid = make_grid(L)
    if not (np.allclose(ys, grid.nodes, atol=1e-12) and np.allclose(body[:, 0], grid.nodes, atol=1e-12)):
        raise CLIError("kernel-format", f"{path}: coordinates are not the order-{L} Chebyshev nodes")
    return Kernel.from_values(body[:, 1:], grid)


def write_marginals(path, posterior) -> None:
    grid: ChebGrid = posterior.grid
    labels = posterior.wins.labels
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id," + ",".join(f"{x:.12g}" for x in grid.nodes) + "\n")
        for lab, vals in zip(labels, posterior.marginal_values):
            fh.write(lab + "," + ",".join(f"{v:.10g}" for v in vals) + "\n")


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_results(path) -> list[tuple[dt.date, str, str]]:
    """Dated results ``date,winner,loser``; header and ``#`` lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#") or text.lower().startswith("date,"):
                continue
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != 3:
                raise MatchFormatError("expected 'date,winner,loser'", lineno, str(path))
            try:
                day = dt.date.fromisoformat(parts[0])
            except ValueError:
                raise MatchFormatError(f"bad date {parts[0]!r}", lineno, str(path)) from None
            if parts[1] == parts[2]:
                raise MatchFormatError(f"winner and loser are both {parts[1]!r}", lineno, str(path))
            out.append((day, parts[1], parts[2]))
    return out


# ---------------------------------------------------------------- helpers


def _read_wins(path) -> WinMatrix:
    w = load_matches(path)
    if w.total == 0:
        raise CLIError("no-matches", f"{path}: no matches")
    return w


def _kernel_arg(args, grid_L: int | None = None) -> Kernel:
    if getattr(args, "kernel", None):
        return read_kernel_table(args.kernel)
    return logistic_kernel(make_grid(grid_L or args.L), args.slope)


def _bp_options(args) -> BPOptions:
    return BPOptions(tol=args.bp_tol, max_sweeps=args.max_sweeps, damping=args.damping)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    w = _read_wins(args.matches)
    out = _out_dir(args)
    train = None
    if args.backend == "neural":
        from .mstep_nn import TrainOptions

        train = TrainOptions(samples=args.samples, epochs=args.epochs, seed=args.seed)
    opts = EMOptions(
        backend=args.backend,
        tol=args.tol,
        max_iters=args.max_iters,
        L=args.L,
        init_slope=args.slope,
        bp=_bp_options(args),
        seed=args.seed,
        train=train,
    )
    kernel, posterior, state = em_fit(w, opts=opts)
    write_kernel_table(out / "kernel.csv", kernel)
    write_marginals(out / "marginals.csv", posterior)
    write_text(out / "ranking.csv", RankingTable.from_posterior(posterior).to_csv())
    if args.backend == "neural" and state.model_state is not None:
        from .mstep_nn import save_mlp

        save_mlp(out / "mlp.txt", state.model_state)
    report = {
        "backend": args.backend,
        "players": w.n,
        "matches": int(w.total),
        "iterations": state.iteration,
        "converged": state.converged,
        "kernel_delta": state.kernel_delta,
        "bound_trace": state.bound_trace,
        "L": args.L,
        "seed": args.seed,
    }
    write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"fit: {state.iteration} iterations, converged={state.converged}, outputs in {out}")
    return 0


def cmd_rank(args) -> int:
    w = _read_wins(args.matches)
    posterior = infer_skills(w, _kernel_arg(args), _bp_options(args))
    table = RankingTable.from_posterior(posterior)
    if args.top:
        table = RankingTable(table.rows[: args.top])
    text = table.to_csv()
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _read_pairs(args) -> list[tuple[str, str]]:
    pairs = [tuple(p) for p in args.pair or []]
    if args.pairs:
        with open(args.pairs, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                parts = [p.strip() for p in text.split(",")]
                if len(parts) != 2:
                    raise MatchFormatError("expected 'player_a,player_b'", lineno, args.pairs)
                pairs.append((parts[0], parts[1]))
    if not pairs:
        raise CLIError("no-pairs", "give --pair A B or --pairs FILE")
    return pairs


def cmd_predict(args) -> int:
    pairs = _read_pairs(args)
    kernel = _kernel_arg(args)
    posterior, index = None, {}
    if args.matches:
        w = load_matches(args.matches)
        if w.total > 0:
            posterior = infer_skills(w, kernel, _bp_options(args))
            index = {lab: k for k, lab in enumerate(w.labels)}
    lines = ["player_a,player_b,probability"]
    for a, b in pairs:
        p = win_probability(posterior, kernel, index.get(a), index.get(b), use_joint=not args.product)
        lines.append(f"{a},{b},{p:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate, player_labels, priced_matches, write_truth

    out = _out_dir(args)
    w, skills = generate(SynthConfig(n=args.n, k=args.k, kernel=args.truth, seed=args.seed))
    write_matches(out / "matches.csv", w, aggregated=args.aggregated)
    write_truth(out / "truth.csv", w.labels, skills)
    if args.odds_matches:
        start = dt.date.fromisoformat(args.start)
        # Synthetic history: every simulated match is dated the day before betting starts.
        day = (start - dt.timedelta(days=1)).isoformat()
        coo = w.counts.tocoo()
        with open(out / "history.csv", "w", encoding="utf-8") as fh:
            fh.write("date,winner,loser\n")
            for k in np.lexsort((coo.col, coo.row)):
                fh.write(f"{day},{w.labels[coo.row[k]]},{w.labels[coo.col[k]]}\n" * int(coo.data[k]))
        records = priced_matches(
            skills, player_labels(args.n), args.truth, args.odds_matches, start, args.days, args.margin, args.noise, args.seed + 1
        )
        write_odds(out / "odds.csv", records)
    print(f"synth: {args.n} players, {int(w.total)} matches, outputs in {out}")
    return 0


def cmd_backtest(args) -> int:
    records = load_odds(args.odds)
    if not records:
        raise CLIError("no-matches", f"{args.odds}: no priced matches")
    history = load_results(args.history) if args.history else []
    kernel = read_kernel_table(args.kernel) if args.kernel else None
    if args.strategy == "kernel" and kernel is None:
        raise CLIError("usage", "the kernel strategy needs --kernel")
    ledger = backtest(
        records,
        args.strategy,
        kernel=kernel,
        window_days=args.window_days,
        history=history,
        stake=args.stake,
        seed=args.seed,
        slope=args.slope,
        use_joint=not args.product,
        bp_opts=_bp_options(args),
    )
    out = _out_dir(args)
    write_text(out / f"ledger_{args.strategy}.csv", ledger.to_csv())
    series = "date,cumulative,normalized\n" + "".join(
        f"{d.isoformat()},{v:.6g},{v / ledger.total_staked if ledger.total_staked else 0.0:.6g}\n"
        for d, v in ledger.daily_series()
    )
    write_text(out / f"series_{args.strategy}.csv", series)
    summary = ledger.summary()
    write_text(out / f"summary_{args.strategy}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"backtest {args.strategy}: {summary['bets']} bets on {summary['matches']} matches, "
        f"return {summary['return']:.4f} ({summary['return_per_stake']:.4%} of stake)"
    )
    return 0


def cmd_export_kernel(args) -> int:
    if args.mlp:
        from .mstep_nn import kernel_from_mlp, load_mlp

        kernel = kernel_from_mlp(load_mlp(args.mlp), make_grid(args.L))
    else:
        kernel = _kernel_arg(args)
    if args.resolution:
        xs = (np.arange(args.resolution) + 0.5) / args.resolution
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        b = kernel(X, Y)
        lines = ["x\\y," + ",".join(f"{v:.6g}" for v in xs)]
        lines += [f"{x:.6g}," + ",".join(f"{v:.8g}" for v in row) for x, row in zip(xs, b)]
        text = "\n".join(lines) + "\n"
    else:
        text = kernel_table(kernel)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    """Usage errors as a single parsable line, like every other failure."""

    def error(self, message):
        self.exit(2, f"kernrank: error: usage: {_one_line(message)}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_kernel_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", help="kernel node table written by 'fit' (default: logistic)")
    p.add_argument("--slope", type=float, default=DEFAULT_SLOPE, help="logistic slope s")
    p.add_argument("--L", type=int, default=32, help="grid order")


def _add_bp_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bp-tol", type=float, default=1e-8)
    p.add_argument("--max-sweeps", type=int, default=1000)
    p.add_argument("--damping", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kernrank", description="Skill percentiles and outcome kernels from win-loss records.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="jointly fit the kernel and the skills by EM")
    _add_common(p)
    p.add_argument("matches", help="match file: winner,loser[,count] per line")
    p.add_argument("-o", "--out-dir", default="fit_out")
    p.add_argument("--backend", choices=BACKENDS, default="chebyshev")
    p.add_argument("--L", type=int, default=32)
    p.add_argument("--slope", type=float, default=DEFAULT_SLOPE, help="slope of the initial logistic kernel")
    p.add_argument("--tol", type=float, default=1e-3, help="stop when the kernel moves less than this")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20, help="neural backend: epochs per M-step")
    p.add_argument("--samples", type=int, default=None, help="neural backend: training pairs per M-step")
    _add_bp_opts(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rank", help="ranking table under a fixed kernel")
    _add_common(p)
    p.add_argument("matches")
    _add_kernel_opts(p)
    _add_bp_opts(p)
    p.add_argument("--top", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("predict", help="win probabilities for player pairs")
    _add_common(p)
    p.add_argument("--matches", help="match history (players without one get the uniform prior)")
    p.add_argument("--pair", nargs=2, action="append", metavar=("A", "B"))
    p.add_argument("--pairs", help="file of 'player_a,player_b' lines")
    p.add_argument("--product", action="store_true", help="always use the product of marginals")
    _add_kernel_opts(p)
    _add_bp_opts(p)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="simulate a tournament with known skills")
    _add_common(p)
    p.add_argument("--n", type=int, default=1024, help="players")
    p.add_argument("--k", type=int, default=64, help="matches per player")
    p.add_argument("--truth", default="logistic", help="logistic, step, uniform or complex")
    p.add_argument("--aggregated", action="store_true", help="write winner,loser,count rows")
    p.add_argument("--odds-matches", type=int, default=0, help="also write this many priced matches")
    p.add_argument("--start", default="2024-01-01", help="first betting day")
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("-o", "--out-dir", default="synth_out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("backtest", help="replay priced matches with a fixed-stake strategy")
    _add_common(p)
    p.add_argument("odds", help="date,player_a,player_b,odds_a,odds_b,winner file")
    p.add_argument("--strategy", choices=STRATEGIES, default="kernel")
    p.add_argument("--history", help="earlier results: date,winner,loser")
    p.add_argument("--window-days", type=int, default=365)
    p.add_argument("--stake", type=float, default=1.0)
    p.add_argument("--product", action="store_true")
    _add_kernel_opts(p)
    _add_bp_opts(p)
    p.add_argument("-o", "--out-dir", default="backtest_out")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("export-kernel", help="write a kernel as a node table or on a uniform grid")
    _add_common(p)
    _add_kernel_opts(p)
    p.add_argument("--mlp", help="network parameters written by 'fit --backend neural'")
    p.add_argument("--resolution", type=int, default=0, help="evaluate on this many uniform points per axis")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_export_kernel)
    return parser


def read_config(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not text.lstrip().startswith("["):
        text = "[kernrank]\n" + text
    cp.read_string(text, source=str(path))
    values = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args) -> argparse.Namespace:
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise CLIError("config", f"{args.config}: unknown option {key!r} for '{args.command}'")
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.nargs not in (None, "?"):
            raise CLIError("config", f"{args.config}: option {key!r} cannot be set from a config file")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except ValueError:
                raise CLIError("config", f"{args.config}: bad value {raw!r} for {key!r}") from None
            if action.choices is not None and defaults[key] not in action.choices:
                raise CLIError("config", f"{args.config}: {key} must be one of {', '.join(map(str, action.choices))}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _one_line(msg: object) -> str:
    return " ".join(str(msg).split())


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "config", None):
            args = _apply_config(parser, argv, args)
        return args.func(args)
    except CLIError as exc:
        code, msg = exc.code, str(exc)
    except MatchFormatError as exc:
        code, msg = "parse", str(exc)
    except FileNotFoundError as exc:
        code, msg = "not-found", f"{exc.filename}: no such file"
    except OSError as exc:
        code, msg = "io", f"{exc.filename or ''}: {exc.strerror or exc}"
    except (ValueError, FloatingPointError) as exc:
        code, msg = "invalid", str(exc)
    print(f"kernrank: error: {code}: {_one_line(msg)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
