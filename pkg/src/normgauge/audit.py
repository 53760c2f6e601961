"""Subgroup audits: extreme-deviation summaries, Welch tests, FDR, parity.

Group comparisons use Welch's unequal-variance two-sample t statistic with
Welch-Satterthwaite degrees of freedom; subgroup sizes here are routinely very
unbalanced, which is exactly where the pooled-variance test misbehaves.
Multiple testing across regions is handled per contrast-metric pair with the
Benjamini-Hochberg step-up rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .blr import NormativeModel, deviations, fit_metrics
from .cohort import Cohort
from .errors import InputError

log = logging.getLogger(__name__)

DEFAULT_EXTREME_THRESHOLD = 2.0


@dataclass
class GroupSummary:
    """Per group x region: mean deviation and extreme-score proportions.

    Declared groups with no members carry NaN rows; a missing group is
    reported as missing, never as a zero rate.
    """

    groups: tuple[str, ...]
    regions: tuple[str, ...]
    group_sizes: dict[str, int]
    mean_deviation: dict[str, np.ndarray]
    pct_extreme_pos: dict[str, np.ndarray]
    pct_extreme_neg: dict[str, np.ndarray]
    pct_extreme_total: dict[str, np.ndarray]
    threshold: float


def group_summary(
    z_matrix: np.ndarray,
    groups: Sequence[str],
    regions: Sequence[str] | None = None,
    threshold: float = DEFAULT_EXTREME_THRESHOLD,
    group_labels: Sequence[str] | None = None,
) -> GroupSummary:
    """Summarize deviations per group; proportions count |Z| beyond threshold."""
    if threshold <= 0:
        raise InputError(f"extreme threshold must be positive, got {threshold}")
    z_matrix = np.atleast_2d(np.asarray(z_matrix, dtype=float))
    groups = list(groups)
    if len(groups) != z_matrix.shape[0]:
        raise InputError(
            f"{len(groups)} group labels for {z_matrix.shape[0]} deviation rows"
        )
    d_count = z_matrix.shape[1]
    if regions is None:
        regions = tuple(f"region_{i}" for i in range(d_count))
    labels = tuple(group_labels) if group_labels else tuple(sorted(set(groups)))

    sizes: dict[str, int] = {}
    mean_dev: dict[str, np.ndarray] = {}
    pos: dict[str, np.ndarray] = {}
    neg: dict[str, np.ndarray] = {}
    total: dict[str, np.ndarray] = {}
    group_arr = np.asarray(groups)
    for label in labels:
        rows = z_matrix[group_arr == label]
        sizes[label] = rows.shape[0]
        if rows.shape[0] == 0:
            nan_row = np.full(d_count, np.nan)
            mean_dev[label] = nan_row
            pos[label] = nan_row.copy()
            neg[label] = nan_row.copy()
            total[label] = nan_row.copy()
            continue
        mean_dev[label] = rows.mean(axis=0)
        pos[label] = np.mean(rows > threshold, axis=0)
        neg[label] = np.mean(rows < -threshold, axis=0)
        total[label] = pos[label] + neg[label]
    return GroupSummary(
        groups=labels,
        regions=tuple(regions),
        group_sizes=sizes,
        mean_deviation=mean_dev,
        pct_extreme_pos=pos,
        pct_extreme_neg=neg,
        pct_extreme_total=total,
        threshold=threshold,
    )


@dataclass
class WelchResult:
    """Per-region Welch t, two-sided p, and degrees of freedom.

    Untestable regions (a group below 2 members) carry NaN in all three.
    The t sign follows group_one minus group_two.
    """

    contrast: tuple[str, str]
    t: np.ndarray
    p: np.ndarray
    df: np.ndarray

    @property
    def testable(self) -> np.ndarray:
        return np.isfinite(self.p)


def group_difference(
    values: np.ndarray,
    groups: Sequence[str],
    contrast: tuple[str, str],
) -> WelchResult:
    """Welch two-sample test per region (column) for group_one vs group_two."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    group_arr = np.asarray(list(groups))
    if group_arr.shape[0] != values.shape[0]:
        raise InputError(
            f"{group_arr.shape[0]} group labels for {values.shape[0]} rows"
        )
    g1, g2 = contrast
    x = values[group_arr == g1]
    y = values[group_arr == g2]
    d_count = values.shape[1]
    if x.shape[0] < 2 or y.shape[0] < 2:
        nan_row = np.full(d_count, np.nan)
        log.warning(
            "contrast %s vs %s untestable: group sizes %d and %d",
            g1, g2, x.shape[0], y.shape[0],
        )
        return WelchResult(contrast=(g1, g2), t=nan_row, p=nan_row.copy(), df=nan_row.copy())

    n1, n2 = x.shape[0], y.shape[0]
    mean_diff = x.mean(axis=0) - y.mean(axis=0)
    v1 = x.var(axis=0, ddof=1) / n1
    v2 = y.var(axis=0, ddof=1) / n2
    se2 = v1 + v2
    t = np.empty(d_count)
    p = np.empty(d_count)
    df = np.empty(d_count)
    degenerate = se2 == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_reg = mean_diff / np.sqrt(se2)
        df_reg = np.square(se2) / (np.square(v1) / (n1 - 1) + np.square(v2) / (n2 - 1))
    ok = ~degenerate
    t[ok] = t_reg[ok]
    df[ok] = df_reg[ok]
    p[ok] = 2.0 * stats.t.sf(np.abs(t_reg[ok]), df_reg[ok])
    # zero variance in both groups: equal means are a perfect null, unequal
    # means are an unambiguous difference
    for j in np.nonzero(degenerate)[0]:
        if mean_diff[j] == 0.0:
            t[j], p[j], df[j] = 0.0, 1.0, float(n1 + n2 - 2)
        else:
            t[j] = np.inf if mean_diff[j] > 0 else -np.inf
            p[j], df[j] = 0.0, float(n1 + n2 - 2)
    return WelchResult(contrast=(g1, g2), t=t, p=p, df=df)


def bh_fdr(p_values: np.ndarray, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up: boolean flags at FDR level q.

    Flags every p at or below the largest p(k) with p(k) <= k*q/m. All-ones
    input yields no flags; ties at the cutoff are all flagged.
    """
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise InputError("p-values must be one-dimensional")
    if not (0.0 < q < 1.0):
        raise InputError(f"FDR level must be in (0, 1), got {q}")
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any(~np.isfinite(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise InputError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    thresholds = np.arange(1, m + 1) * (q / m)
    passing = np.nonzero(sorted_p <= thresholds)[0]
    if passing.size == 0:
        return np.zeros(m, dtype=bool)
    cutoff = sorted_p[passing[-1]]
    return p <= cutoff


def significant_fraction(flags: np.ndarray) -> float:
    """Share of testable regions flagged; exactly flagged / total."""
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return float("nan")
    return float(np.count_nonzero(flags)) / flags.size


@dataclass
class ParityReport:
    """Per-group aggregate performance plus max-min gaps across groups."""

    groups: tuple[str, ...]
    per_group: dict[str, dict]
    gaps: dict[str, float]
    threshold: float


_PARITY_METRICS = ("explained_variance", "msll", "mean_abs_deviation", "extreme_rate")


def parity_report(
    model: NormativeModel,
    cohort: Cohort,
    threshold: float = DEFAULT_EXTREME_THRESHOLD,
    groups: Sequence[str] | None = None,
) -> ParityReport:
    """Evaluate the model per race group and report between-group gaps.

    EV and MSLL are means over regions of the per-region metrics on that
    group's subjects; mean |Z| and the extreme rate pool all group cells.
    """
    group_of = list(groups) if groups is not None else list(cohort.races())
    if len(group_of) != cohort.n_subjects:
        raise InputError(
            f"{len(group_of)} group labels for {cohort.n_subjects} subjects"
        )
    labels = tuple(sorted(set(group_of)))
    group_arr = np.asarray(group_of)
    per_group: dict[str, dict] = {}
    for label in labels:
        idx = np.nonzero(group_arr == label)[0]
        entry: dict = {"n": int(idx.size)}
        if idx.size == 0:
            entry.update({m: None for m in _PARITY_METRICS})
            entry["mean_deviation"] = None
            per_group[label] = entry
            continue
        sub = cohort.subset(idx)
        metrics = fit_metrics(model, sub)
        evs = [m.explained_variance for m in metrics if m.explained_variance is not None]
        entry["explained_variance"] = float(np.mean(evs)) if evs else None
        entry["msll"] = float(np.mean([m.msll for m in metrics]))
        dm = deviations(model, sub)
        entry["mean_abs_deviation"] = float(np.mean(np.abs(dm.Z)))
        entry["mean_deviation"] = float(np.mean(dm.Z))
        entry["extreme_rate"] = float(np.mean(np.abs(dm.Z) > threshold))
        per_group[label] = entry

    gaps: dict[str, float] = {}
    for metric in _PARITY_METRICS:
        vals = [
            per_group[g][metric]
            for g in labels
            if per_group[g][metric] is not None
        ]
        gaps[metric] = float(max(vals) - min(vals)) if vals else float("nan")
    return ParityReport(groups=labels, per_group=per_group, gaps=gaps, threshold=threshold)
