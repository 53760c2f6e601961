"""Can a protected attribute be predicted from deviation scores?

If race-blind modeling truly removed group structure, a classifier trained on
deviation profiles should do no better than chance at recovering race. This
module measures that with one-vs-rest L2-regularized logistic regression:

    loss(w, b) = sum_i log(1 + exp(-t_i (w^T x_i + b))) + lambda/2 ||w||^2

with t in {-1, +1} and the bias b unpenalized, minimized by L-BFGS. Decisions
take the argmax over per-class scores (ties broken by class order). Evaluation
is stratified k-fold cross-validation with per-class AUC from the raw
one-vs-rest scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import InputError
from .serialize import write_csv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    l2_strength: float = 1.0
    n_folds: int = 5
    seed: int = 0
    standardize: bool = False
    max_iter: int = 1000

    def __post_init__(self) -> None:
        if self.l2_strength < 0:
            raise InputError(f"l2_strength must be >= 0, got {self.l2_strength}")
        if self.n_folds < 2:
            raise InputError(f"n_folds must be >= 2, got {self.n_folds}")


@dataclass
class OvrLogisticModel:
    """One binary logistic head per class over a shared feature space."""

    classes: tuple[str, ...]
    weights: np.ndarray
    intercepts: np.ndarray
    feature_means: np.ndarray | None = None
    feature_scales: np.ndarray | None = None


def _fit_binary(
    x: np.ndarray, target: np.ndarray, lam: float, max_iter: int
) -> tuple[np.ndarray, float]:
    n, d = x.shape

    def objective(wb: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = wb[:d], wb[d]
        margins = target * (x @ w + b)
        loss = float(np.sum(np.logaddexp(0.0, -margins))) + 0.5 * lam * float(w @ w)
        coeff = -target * expit(-margins)
        grad = np.empty(d + 1)
        grad[:d] = x.T @ coeff + lam * w
        grad[d] = float(np.sum(coeff))
        return loss, grad

    res = minimize(
        objective,
        np.zeros(d + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": 1e-6},
    )
    if not res.success:
        log.warning("logistic fit stopped without convergence: %s", res.message)
    return res.x[:d], float(res.x[d])


def fit_ovr_logistic(
    x: np.ndarray, labels: Sequence[str], config: ClassifierConfig | None = None
) -> OvrLogisticModel:
    config = config or ClassifierConfig()
    x = np.asarray(x, dtype=float)
    labels = np.asarray(list(labels))
    classes = tuple(sorted(set(labels.tolist())))
    if len(classes) < 2:
        raise InputError("need at least 2 classes to fit a classifier")
    means = scales = None
    if config.standardize:
        means = x.mean(axis=0)
        scales = x.std(axis=0)
        scales = np.where(scales == 0.0, 1.0, scales)
        x = (x - means) / scales
    weights = np.empty((len(classes), x.shape[1]))
    intercepts = np.empty(len(classes))
    for ci, cls in enumerate(classes):
        target = np.where(labels == cls, 1.0, -1.0)
        weights[ci], intercepts[ci] = _fit_binary(
            x, target, config.l2_strength, config.max_iter
        )
    return OvrLogisticModel(
        classes=classes,
        weights=weights,
        intercepts=intercepts,
        feature_means=means,
        feature_scales=scales,
    )


def decision_scores(model: OvrLogisticModel, x: np.ndarray) -> np.ndarray:
    """Raw per-class scores w_c^T x + b_c, shape (n, n_classes)."""
    x = np.asarray(x, dtype=float)
    if model.feature_means is not None:
        x = (x - model.feature_means) / model.feature_scales
    return x @ model.weights.T + model.intercepts


def predict(model: OvrLogisticModel, x: np.ndarray) -> np.ndarray:
    scores = decision_scores(model, x)
    return np.asarray(model.classes)[np.argmax(scores, axis=1)]


def stratified_folds(
    labels: Sequence[str], n_folds: int, seed: int
) -> list[np.ndarray]:
    """Test-index arrays per fold; class proportions match within one subject.

    Each class is shuffled by its own stream keyed on (seed, class index in
    sorted order) and dealt into folds, so membership is reproducible and
    independent of the other classes.
    """
    labels = np.asarray(list(labels))
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for ci, cls in enumerate(sorted(set(labels.tolist()))):
        idx = np.nonzero(labels == cls)[0]
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
        chunks = np.array_split(rng.permutation(idx), n_folds)
        for f, chunk in enumerate(chunks):
            folds[f].extend(int(i) for i in chunk)
    return [np.array(sorted(f), dtype=int) for f in folds]


def roc_points(
    scores: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """ROC curve by descending-score threshold sweep, plus trapezoidal AUC.

    Tied scores form a single threshold step, which makes the AUC equal to
    the Mann-Whitney statistic with half credit for ties. Constant scores
    yield the chance diagonal and AUC 0.5.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC needs both a positive and a negative example")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tps = np.cumsum(labels[order] == 1)
    fps = np.cumsum(labels[order] == 0)
    # keep only the last index of each tied-score block
    cut = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tpr = np.r_[0.0, tps[cut] / n_pos]
    fpr = np.r_[0.0, fps[cut] / n_neg]
    return fpr, tpr, float(np.trapezoid(tpr, fpr))


def _binary_prf(
    true_pos_mask: np.ndarray, pred_pos_mask: np.ndarray
) -> tuple[float, float, float]:
    tp = int(np.sum(true_pos_mask & pred_pos_mask))
    fp = int(np.sum(~true_pos_mask & pred_pos_mask))
    fn = int(np.sum(true_pos_mask & ~pred_pos_mask))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f_score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f_score


@dataclass
class ClassifierReport:
    """Per class x fold metrics, ROC curves, and confusion matrices.

    Metric arrays are (n_classes, n_folds) with NaN where a fold's test set
    lacked the class; NaN folds are excluded from means.
    """

    classes: tuple[str, ...]
    n_folds: int
    auc: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_score: np.ndarray
    roc_curves: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]
    confusion_counts: np.ndarray
    confusion_pooled: np.ndarray
    config: ClassifierConfig

    def _metric(self, name: str) -> np.ndarray:
        return {
            "auc": self.auc,
            "precision": self.precision,
            "recall": self.recall,
            "f": self.f_score,
        }[name]

    def class_mean(self, name: str, cls: str) -> float:
        row = self._metric(name)[self.classes.index(cls)]
        return float(np.nanmean(row))

    def class_sd(self, name: str, cls: str) -> float:
        row = self._metric(name)[self.classes.index(cls)]
        row = row[np.isfinite(row)]
        return float(np.std(row, ddof=1)) if row.size > 1 else float("nan")

    def macro_mean(self, name: str) -> float:
        return float(np.mean([self.class_mean(name, c) for c in self.classes]))


def _evaluate_split(
    x: np.ndarray,
    labels: np.ndarray,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    config: ClassifierConfig,
    classes: tuple[str, ...],
    fold: int,
    report_rows: dict,
) -> None:
    model = fit_ovr_logistic(x[train_idx], labels[train_idx], config)
    scores = decision_scores(model, x[test_idx])
    test_labels = labels[test_idx]
    preds = np.asarray(model.classes)[np.argmax(scores, axis=1)]
    for ci, cls in enumerate(classes):
        true_mask = test_labels == cls
        if true_mask.any() and (~true_mask).any():
            col = model.classes.index(cls)
            fpr, tpr, auc = roc_points(scores[:, col], true_mask.astype(int))
            report_rows["auc"][ci, fold] = auc
            report_rows["roc"][(cls, fold)] = (fpr, tpr)
            p, r, f = _binary_prf(true_mask, preds == cls)
            report_rows["precision"][ci, fold] = p
            report_rows["recall"][ci, fold] = r
            report_rows["f"][ci, fold] = f
        else:
            log.warning("fold %d: class '%s' missing from test set", fold, cls)
    for true_label, pred_label in zip(test_labels, preds):
        report_rows["counts"][classes.index(true_label), classes.index(pred_label)] += 1


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    counts = counts.astype(float)
    sums = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = counts / sums
    out[np.squeeze(sums == 0.0, axis=1)] = np.nan
    return out


def cross_validate(
    x: np.ndarray, labels: Sequence[str], config: ClassifierConfig | None = None
) -> ClassifierReport:
    """Stratified k-fold evaluation of the one-vs-rest classifier."""
    config = config or ClassifierConfig()
    x = np.asarray(x, dtype=float)
    labels = np.asarray(list(labels))
    classes = tuple(sorted(set(labels.tolist())))
    if len(classes) < 2:
        raise InputError("need at least 2 classes to cross-validate")
    for cls in classes:
        count = int(np.sum(labels == cls))
        if count < config.n_folds:
            raise InputError(
                f"class '{cls}' has {count} members, fewer than "
                f"{config.n_folds} folds"
            )
    folds = stratified_folds(labels, config.n_folds, config.seed)
    shape = (len(classes), config.n_folds)
    rows = {
        "auc": np.full(shape, np.nan),
        "precision": np.full(shape, np.nan),
        "recall": np.full(shape, np.nan),
        "f": np.full(shape, np.nan),
        "roc": {},
        "counts": np.zeros((len(classes), len(classes)), dtype=int),
    }
    all_idx = np.arange(len(labels))
    for fold, test_idx in enumerate(folds):
        train_mask = np.ones(len(labels), dtype=bool)
        train_mask[test_idx] = False
        _evaluate_split(
            x, labels, all_idx[train_mask], test_idx, config, classes, fold, rows
        )
    return ClassifierReport(
        classes=classes,
        n_folds=config.n_folds,
        auc=rows["auc"],
        precision=rows["precision"],
        recall=rows["recall"],
        f_score=rows["f"],
        roc_curves=rows["roc"],
        confusion_counts=rows["counts"],
        confusion_pooled=_normalize_rows(rows["counts"]),
        config=config,
    )


def evaluate_holdout(
    x: np.ndarray,
    labels: Sequence[str],
    config: ClassifierConfig | None = None,
    test_fraction: float = 0.2,
) -> ClassifierReport:
    """Single stratified holdout evaluation; report has one fold column."""
    config = config or ClassifierConfig()
    if not (0.0 < test_fraction < 1.0):
        raise InputError(f"test fraction must be in (0, 1), got {test_fraction}")
    labels_arr = np.asarray(list(labels))
    classes = tuple(sorted(set(labels_arr.tolist())))
    test_parts = []
    for ci, cls in enumerate(classes):
        idx = np.nonzero(labels_arr == cls)[0]
        if idx.size < 2:
            raise InputError(f"class '{cls}' has fewer than 2 members")
        k = max(1, int(np.floor(test_fraction * idx.size + 1e-9)))
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, ci]))
        test_parts.append(rng.permutation(idx)[:k])
    test_idx = np.array(sorted(int(i) for i in np.concatenate(test_parts)))
    train_mask = np.ones(len(labels_arr), dtype=bool)
    train_mask[test_idx] = False
    shape = (len(classes), 1)
    rows = {
        "auc": np.full(shape, np.nan),
        "precision": np.full(shape, np.nan),
        "recall": np.full(shape, np.nan),
        "f": np.full(shape, np.nan),
        "roc": {},
        "counts": np.zeros((len(classes), len(classes)), dtype=int),
    }
    _evaluate_split(
        np.asarray(x, dtype=float),
        labels_arr,
        np.arange(len(labels_arr))[train_mask],
        test_idx,
        config,
        classes,
        0,
        rows,
    )
    return ClassifierReport(
        classes=classes,
        n_folds=1,
        auc=rows["auc"],
        precision=rows["precision"],
        recall=rows["recall"],
        f_score=rows["f"],
        roc_curves=rows["roc"],
        confusion_counts=rows["counts"],
        confusion_pooled=_normalize_rows(rows["counts"]),
        config=config,
    )


def permutation_null_auc(
    x: np.ndarray,
    labels: Sequence[str],
    config: ClassifierConfig | None = None,
    n_permutations: int = 5,
    seed: int = 1,
) -> float:
    """Mean macro AUC over label permutations; chance sits near 0.5."""
    config = config or ClassifierConfig()
    labels_arr = np.asarray(list(labels))
    aucs = []
    for k in range(n_permutations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        permuted = labels_arr[rng.permutation(labels_arr.size)]
        aucs.append(cross_validate(x, permuted, config).macro_mean("auc"))
    return float(np.mean(aucs))


def write_clf_metrics(path: str | Path, report: ClassifierReport) -> None:
    rows = []
    for ci, cls in enumerate(report.classes):
        for fold in range(report.n_folds):
            rows.append(
                [
                    cls,
                    fold,
                    report.auc[ci, fold],
                    report.precision[ci, fold],
                    report.recall[ci, fold],
                    report.f_score[ci, fold],
                ]
            )
    write_csv(path, ["class", "fold", "auc", "precision", "recall", "f"], rows)


def write_roc_points(path: str | Path, report: ClassifierReport) -> None:
    rows = []
    for (cls, fold), (fpr, tpr) in sorted(report.roc_curves.items()):
        for x_val, y_val in zip(fpr, tpr):
            rows.append([cls, fold, x_val, y_val])
    write_csv(path, ["class", "fold", "fpr", "tpr"], rows)


def write_confusion(path: str | Path, report: ClassifierReport) -> None:
    header = ["true_class", *[f"pred_{c}" for c in report.classes]]
    rows = [
        [cls, *report.confusion_pooled[ci]] for ci, cls in enumerate(report.classes)
    ]
    write_csv(path, header, rows)


def render_roc_svg(report: ClassifierReport, path: str | Path) -> None:
    """Fold curves thin and light, per-class mean curve thick and dark."""
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise InputError(
            "matplotlib is required to render roc.svg (install the 'plots' extra)"
        ) from None
    fig, ax = plt.subplots(figsize=(5.5, 5.0))
    cmap = plt.get_cmap("tab10")
    grid = np.linspace(0.0, 1.0, 101)
    for ci, cls in enumerate(report.classes):
        color = cmap(ci % 10)
        interped = []
        for fold in range(report.n_folds):
            curve = report.roc_curves.get((cls, fold))
            if curve is None:
                continue
            fpr, tpr = curve
            ax.plot(fpr, tpr, color=color, alpha=0.3, linewidth=0.9)
            interped.append(np.interp(grid, fpr, tpr))
        if interped:
            mean_auc = report.class_mean("auc", cls)
            ax.plot(
                grid,
                np.mean(interped, axis=0),
                color=color,
                linewidth=2.5,
                label=f"{cls} (AUC {mean_auc:.3f})",
            )
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
