"""Post-hoc model evaluation, significance testing and report emission."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .benchmarks import PROBLEM_NAMES, Problem
from .deploy import METHODS, ALTrace
from .fit import FitResult, fit_gp_type2, posterior_mean
from .kernel_gp import Dataset

__all__ = [
    "ReportRow",
    "build_report",
    "evaluation_set",
    "fit_gp_type2",
    "rmse",
    "standard_error",
    "wilcoxon_signed_rank",
]

EVAL_SEED = 7
EVAL_POINTS = 2000
ALPHA = 0.05
EXACT_MAX_N = 20
REPORT_COLUMNS = ["problem", "method", "n_seeds", "rmse_mean", "rmse_se", "time_mean_ms", "p_vs_random", "star"]


class ReportError(ValueError):
    pass


class UndefinedTestError(ValueError):
    pass


def rmse(fit: FitResult, data: Dataset, X_eval, Y_eval) -> float:
    """RMSE of the noise-free posterior mean against ``Y_eval``."""
    Y_eval = np.asarray(Y_eval, dtype=float)
    if Y_eval.size == 0:
        raise ValueError("evaluation set is empty")
    pred = posterior_mean(fit.config, data, X_eval)
    return float(np.sqrt(np.mean((pred - Y_eval) ** 2)))


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of the doubled positive-rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b, alternative: str = "less") -> float:
    """Paired signed-rank test of ``a`` against ``b``.

    The default one-sided alternative is that ``a`` tends to be smaller than
    ``b``. Zero differences are dropped and tied magnitudes share their mean
    rank. Up to 20 nonzero pairs the null distribution is counted exactly over
    all sign assignments; beyond that a tie-corrected normal approximation is
    used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D with equal lengths")
    if len(a) < 5:
        raise ValueError("need at least 5 pairs")
    if alternative not in ("less", "greater", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise UndefinedTestError("all paired differences are zero; the test is undefined")
    ranks = rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    n = d.size

    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_counts(doubled)
        obs = int(round(2 * w_plus))
        total = 2**n
        p_less = float(sum(counts[: obs + 1]) / total)
        p_greater = float(sum(counts[obs:]) / total)
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts**3 - tie_counts).sum() / 48
        z = (w_plus - mean) / math.sqrt(var)
        p_less, p_greater = float(norm.cdf(z)), float(norm.sf(z))
    if alternative == "less":
        return p_less
    if alternative == "greater":
        return p_greater
    return min(1.0, 2 * min(p_less, p_greater))


def standard_error(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float("nan")
    return float(v.std(ddof=1) / math.sqrt(v.size))


def evaluation_set(problem: Problem, trace: ALTrace | None = None, seed: int = EVAL_SEED,
                   n_points: int = EVAL_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free held-out points for functions; unlabeled pool points for pools."""
    if problem.is_pool:
        used = set()
        if trace is not None:
            used = set(trace.init_pool_indices or []) | set(trace.pool_indices or [])
        keep = [i for i in range(problem.pool_size) if i not in used]
        return problem.pool_X[keep], problem.pool_Y[keep]
    X = np.random.default_rng(seed).uniform(size=(n_points, problem.dim))
    return X, problem.noise_free(X)


@dataclass
class ReportRow:
    problem: str
    method: str
    n_seeds: int
    rmse_mean: float
    rmse_se: float
    time_mean_ms: float
    p_vs_random: float
    star: bool
    rmses: tuple = ()
    seeds: tuple = ()

    def as_csv(self) -> list:
        def fmt(x):
            return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.10g}"

        return [self.problem, self.method, self.n_seeds, fmt(self.rmse_mean), fmt(self.rmse_se),
                fmt(self.time_mean_ms), fmt(self.p_vs_random), int(self.star)]


def trace_rmse(trace: ALTrace, problem: Problem, eval_seed: int = EVAL_SEED) -> float:
    data = trace.final_dataset()
    fit = fit_gp_type2(data, np.random.default_rng([eval_seed, trace.seed]))
    X, Y = evaluation_set(problem, trace, eval_seed)
    return rmse(fit, data, X, Y)


def _method_order(m: str) -> tuple:
    base = m.split(":")[0]
    return (METHODS.index(base) if base in METHODS else len(METHODS), m)


def _problem_order(p: str) -> tuple:
    return (PROBLEM_NAMES.index(p) if p in PROBLEM_NAMES else len(PROBLEM_NAMES), p)


def build_report(
    traces: Iterable[ALTrace],
    problems: Mapping[str, Problem],
    out_dir=None,
    eval_seed: int = EVAL_SEED,
    plots: bool = True,
) -> list[ReportRow]:
    """Aggregate RMSE and query time per (problem, method) and test against Random."""
    groups: dict[tuple, dict[int, ALTrace]] = defaultdict(dict)
    for tr in traces:
        key = (tr.problem, tr.method)
        if tr.seed in groups[key]:
            raise ReportError(f"duplicate trace for {key} seed {tr.seed}")
        groups[key][tr.seed] = tr
    if not groups:
        raise ReportError("no traces given")

    rows = []
    for prob in sorted({p for p, _ in groups}, key=_problem_order):
        if prob not in problems:
            raise ReportError(f"no problem definition for {prob!r}")
        methods = sorted((m for p, m in groups if p == prob), key=_method_order)
        if "random" not in methods:
            raise ReportError(
                f"problem {prob!r} has no 'random' traces; the significance test compares every method against Random"
            )
        ref_seeds = sorted(groups[(prob, "random")])
        scores = {}
        for m in methods:
            seeds = sorted(groups[(prob, m)])
            if seeds != ref_seeds:
                raise ReportError(
                    f"{prob}/{m}: seeds {seeds} do not match Random's seeds {ref_seeds}"
                )
            scores[m] = [trace_rmse(groups[(prob, m)][s], problems[prob], eval_seed) for s in seeds]
        for m in methods:
            r = scores[m]
            times = [groups[(prob, m)][s].total_wall_ms for s in ref_seeds]
            p = float("nan")
            if m != "random" and len(r) >= 5:
                try:
                    p = wilcoxon_signed_rank(r, scores["random"], alternative="less")
                except UndefinedTestError:
                    pass
            rows.append(ReportRow(
                prob, m, len(r), float(np.mean(r)), standard_error(r), float(np.mean(times)),
                p, bool(p < ALPHA), tuple(r), tuple(ref_seeds),
            ))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv(rows, out / "report.csv")
        if plots:
            plot_report(rows, out)
    return rows


def write_report_csv(rows: Sequence[ReportRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def plot_report(rows: Sequence[ReportRow], out_dir) -> list[Path]:
    """One figure per problem: RMSE (mean +- SE, starred if significant) and query time."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    by_problem = defaultdict(list)
    for r in rows:
        by_problem[r.problem].append(r)
    for prob, rs in by_problem.items():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        names = [r.method for r in rs]
        pos = np.arange(len(rs))
        ax1.bar(pos, [r.rmse_mean for r in rs], yerr=[0 if math.isnan(r.rmse_se) else r.rmse_se for r in rs])
        for i, r in enumerate(rs):
            if r.star:
                ax1.text(i, r.rmse_mean, "*", ha="center", va="bottom", fontsize=14)
        ax1.set_title(f"{prob}: RMSE")
        ax2.bar(pos, [r.time_mean_ms / 1e3 for r in rs])
        ax2.set_title(f"{prob}: query time [s]")
        for ax in (ax1, ax2):
            ax.set_xticks(pos)
            ax.set_xticklabels(names, rotation=30)
        fig.tight_layout()
        path = Path(out_dir) / f"{prob}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
