"""Evaluation statistics: AUROC, AUPRC, calibration error, bootstrap lift.

AUROC is the exact rank statistic (ties count one half).  AUPRC is the
average-precision form: the mean, over positives in descending-score
order, of precision at that rank; no interpolation between PR points, so
an independent rank-scan oracle can match it bit for bit.  Score ties are
broken by stable input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateVarianceError, UndefinedMetricError


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    return s, y


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties at 1/2."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("undefined metric: auroc needs both classes")

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over positives in descending-score order."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("undefined metric: auprc needs at least one positive")

    order = np.argsort(-s, kind="mergesort")
    hits = y[order].astype(np.float64)
    precision_at_k = np.cumsum(hits) / np.arange(1, len(s) + 1)
    return float(precision_at_k[hits == 1].sum() / n_pos)


def ece(scores, labels, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins on [0, 1]."""
    s, y = _as_arrays(scores, labels)
    if len(s) == 0:
        raise UndefinedMetricError("undefined metric: ece on empty input")
    bins = np.clip((s * n_bins).astype(np.int64), 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        n = int(mask.sum())
        if n == 0:
            continue
        confidence = float(s[mask].mean())
        accuracy = float(y[mask].mean())
        total += (n / len(s)) * abs(accuracy - confidence)
    return total


# --- paired t-test -----------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    # Lentz continued fraction for the incomplete beta function.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), abs error well under 1e-8."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability P(|T_df| >= |t|)."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if not math.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return betainc_regularized(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_value: float


def paired_t_test(diffs) -> TTestResult:
    """Two-sided one-sample t-test on paired differences."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim != 1 or len(d) < 2:
        raise ValueError("need at least two paired differences")
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("degenerate: zero variance")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=t, df=n - 1, p_value=student_t_sf_two_sided(t, n - 1))


# --- bootstrap lift harness --------------------------------------------

CONDITIONS = ("local", "remote", "transferred")
METRIC_NAMES = ("auroc", "auprc")


@dataclass
class BootstrapFold:
    fold: int
    seed: int
    metrics: dict[str, dict[str, float]]  # condition -> metric -> value
    failed: bool = False
    error: str = ""

    def lift_pct(self, condition: str, metric: str) -> float:
        base = self.metrics["local"][metric]
        return 100.0 * (self.metrics[condition][metric] - base) / base


@dataclass
class BootstrapLiftReport:
    folds: list[BootstrapFold]
    failed_folds: list[BootstrapFold] = field(default_factory=list)

    def mean_metric(self, condition: str, metric: str) -> float:
        return float(np.mean([f.metrics[condition][metric] for f in self.folds]))

    def mean_lift_pct(self, condition: str, metric: str) -> float:
        return float(np.mean([f.lift_pct(condition, metric) for f in self.folds]))

    def positive_lift_fraction(self, condition: str, metric: str) -> float:
        lifts = [f.lift_pct(condition, metric) for f in self.folds]
        return float(np.mean([lift > 0.0 for lift in lifts]))

    def lift_t_test(self, condition: str, metric: str) -> TTestResult | None:
        diffs = [f.metrics[condition][metric] - f.metrics["local"][metric]
                 for f in self.folds]
        try:
            return paired_t_test(diffs)
        except (DegenerateVarianceError, ValueError):
            return None

    def summary(self) -> dict:
        out: dict = {
            "n_folds": len(self.folds),
            "n_failed": len(self.failed_folds),
            "failed": [{"fold": f.fold, "error": f.error} for f in self.failed_folds],
            "mean": {}, "mean_lift_pct": {}, "positive_lift_fraction": {}, "t_test": {},
        }
        for cond in CONDITIONS:
            out["mean"][cond] = {m: self.mean_metric(cond, m) for m in METRIC_NAMES}
            if cond == "local":
                continue
            out["mean_lift_pct"][cond] = {m: self.mean_lift_pct(cond, m)
                                          for m in METRIC_NAMES}
            out["positive_lift_fraction"][cond] = {
                m: self.positive_lift_fraction(cond, m) for m in METRIC_NAMES}
            tests = {}
            for m in METRIC_NAMES:
                res = self.lift_t_test(cond, m)
                tests[m] = ({"t": res.t, "df": res.df, "p_value": res.p_value}
                            if res else {"error": "degenerate: zero variance"})
            out["t_test"][cond] = tests
        return out

    def table_rows(self) -> list[dict]:
        rows = []
        for f in self.folds:
            for m in METRIC_NAMES:
                rows.append({
                    "fold": f.fold,
                    "metric": m,
                    "local": f.metrics["local"][m],
                    "remote": f.metrics["remote"][m],
                    "transferred": f.metrics["transferred"][m],
                    "lift_pct": f.lift_pct("transferred", m),
                })
        return rows


def bootstrap_lift(runner: Callable[[int], dict[str, dict[str, float]]],
                   seeds: list[int], threads: int = 1) -> BootstrapLiftReport:
    """Run one re-split/retrain/transfer cycle per seed and collect lifts.

    ``runner(seed)`` must return ``{condition: {metric: value}}`` for the
    three conditions, and be deterministic given the seed, which makes the
    result independent of worker count and fold execution order.  A failing
    fold is excluded from the aggregates and reported.
    """
    def run_one(item: tuple[int, int]) -> BootstrapFold:
        i, seed = item
        try:
            return BootstrapFold(fold=i, seed=seed, metrics=runner(seed))
        except Exception as exc:  # fold failure must not sink the harness
            return BootstrapFold(fold=i, seed=seed, metrics={},
                                 failed=True, error=str(exc))

    items = list(enumerate(seeds))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(run_one, items))
    else:
        folds = [run_one(it) for it in items]

    report = BootstrapLiftReport(folds=[])
    for fold in folds:
        (report.failed_folds if fold.failed else report.folds).append(fold)
    return report
