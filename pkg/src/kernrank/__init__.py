"""Joint inference of skill percentiles and the outcome kernel b(x, y) from
pairwise win-loss records."""

from .bp import BPOptions, SkillPosterior, infer_skills, run_bp
from .chebkit import ChebGrid, Density, make_grid
from .em import EMOptions, EMState, QGrid, em_fit
from .model import Kernel, MatchFormatError, WinMatrix, load_matches, logistic_kernel
from .predict import BacktestLedger, OddsRecord, RankingTable, backtest, percentile, win_probability

__version__ = "0.1.0"

__all__ = [
    "BPOptions",
    "BacktestLedger",
    "ChebGrid",
    "Density",
    "EMOptions",
    "EMState",
    "Kernel",
    "MatchFormatError",
    "OddsRecord",
    "QGrid",
    "RankingTable",
    "SkillPosterior",
    "WinMatrix",
    "backtest",
    "em_fit",
    "infer_skills",
    "load_matches",
    "logistic_kernel",
    "make_grid",
    "percentile",
    "run_bp",
    "win_probability",
]
