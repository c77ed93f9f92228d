"""Metrics and statistical tests shared by the training, evaluation, and error-map stages.

AUROC is computed from average ranks, which is exactly the normalized
Mann-Whitney statistic (concordant pairs + half the tied pairs, divided by
n_pos * n_neg). Two-sample comparisons are gated on Shapiro-Wilk normality:
both samples normal at the chosen alpha -> independent t-test, otherwise
Mann-Whitney U.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

# p-value thresholds for "*", "**", "***", "****"
STAR_THRESHOLDS = (0.05, 0.01, 0.001, 0.0001)

# Largest combined sample size for which the exact U distribution is used.
# Above this (or whenever ties are present) the normal approximation with
# tie correction takes over.
EXACT_U_MAX_N = 25


class MetricError(ValueError):
    """Raised when a metric's preconditions are violated."""


@dataclass(frozen=True)
class MetricReport:
    """Per-fold values of one metric with their mean and 95% CI."""

    metric: str
    per_fold: tuple[float, ...]
    mean: float
    ci_lower: float
    ci_upper: float
    n: int

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "per_fold": list(self.per_fold),
            "mean": self.mean,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n": self.n,
        }


@dataclass(frozen=True)
class TestResult:
    """Outcome of a two-sample comparison.

    ``normality_p`` holds the Shapiro-Wilk p-value per sample; ``None`` means
    the test was not applicable (constant sample) or not run (comparisons
    that always use Mann-Whitney, such as error-map group comparisons).
    """

    test_name: str  # "t-test" | "mann-whitney"
    statistic: float
    p_value: float
    normality_p: tuple[float | None, float | None] = (None, None)
    medians: tuple[float, float] | None = None
    flags: tuple[str, ...] = field(default=())

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)

    def to_dict(self) -> dict:
        d = {
            "test": self.test_name,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "stars": self.stars,
        }
        if self.medians is not None:
            d["medians"] = list(self.medians)
        if any(p is not None for p in self.normality_p):
            d["normality_p"] = list(self.normality_p)
        if self.flags:
            d["flags"] = list(self.flags)
        return d


def significance_stars(p: float) -> str:
    """Star string for a p-value: "****" below 1e-4 down to "ns" at >= 0.05."""
    if p < STAR_THRESHOLDS[3]:
        return "****"
    if p < STAR_THRESHOLDS[2]:
        return "***"
    if p < STAR_THRESHOLDS[1]:
        return "**"
    if p < STAR_THRESHOLDS[0]:
        return "*"
    return "ns"


def auroc(scores, labels) -> float:
    """Area under the ROC curve via average ranks.

    Equals (concordant pairs + 0.5 * tied pairs) / (n_pos * n_neg), so ties
    in the scores are handled exactly. Invariant under any strictly
    increasing transform of the scores.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D and the same length")
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: both classes must be present")
    ranks = stats.rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc(score_matrix, labels) -> float:
    """Unweighted one-vs-rest macro AUROC for multiclass scores (N, K).

    Classes without both positives and negatives in ``labels`` are skipped
    with a warning rather than poisoning the average.
    """
    score_matrix = np.asarray(score_matrix, dtype=float)
    labels = np.asarray(labels)
    if score_matrix.ndim != 2:
        raise MetricError("score_matrix must be (N, K)")
    per_class = []
    skipped = []
    for c in range(score_matrix.shape[1]):
        binary = (labels == c).astype(int)
        if binary.min() == binary.max():
            skipped.append(c)
            continue
        per_class.append(auroc(score_matrix[:, c], binary))
    if not per_class:
        raise MetricError("AUROC undefined: no class has both positives and negatives")
    if skipped:
        warnings.warn(f"macro AUROC: classes {skipped} absent or exhaustive, excluded")
    return float(np.mean(per_class))


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """K x K integer matrix, rows = true class, columns = predicted class."""
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape:
        raise MetricError("predictions and labels must have the same length")
    mat = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(mat, (labels, predictions), 1)
    return mat


def classification_metrics(predictions, labels) -> dict[str, float]:
    """Balanced accuracy, precision, recall, and F1 from hard predictions.

    Binary inputs (labels in {0, 1}) report the positive class; multiclass
    inputs report unweighted macro averages over the classes present in
    ``labels``. Classes never observed as a true label are excluded from the
    macro average with a warning.
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise MetricError("labels must be nonempty")
    classes = np.unique(labels)
    n_classes = int(max(predictions.max(initial=0), labels.max())) + 1
    mat = confusion_matrix(predictions, labels, n_classes)

    never_true = [c for c in range(n_classes) if mat[c].sum() == 0 and (predictions == c).any()]
    if never_true:
        warnings.warn(f"classes {never_true} absent from labels, excluded from macro average")

    recalls, precisions, f1s = [], [], []
    for c in classes:
        tp = mat[c, c]
        fn = mat[c].sum() - tp
        fp = mat[:, c].sum() - tp
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        recalls.append(recall)
        precisions.append(precision)
        f1s.append(f1)

    if set(classes.tolist()) <= {0, 1} and len(classes) == 2:
        # binary: report the positive class, balanced accuracy over both
        return {
            "balanced_accuracy": float(np.mean(recalls)),
            "precision": float(precisions[-1]),
            "recall": float(recalls[-1]),
            "f1": float(f1s[-1]),
        }
    return {
        "balanced_accuracy": float(np.mean(recalls)),
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
        "f1": float(np.mean(f1s)),
    }


def regression_metrics(predictions, targets) -> dict[str, float]:
    """Mean absolute error and root mean squared error."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise MetricError("predictions and targets must have the same length")
    if predictions.size == 0:
        raise MetricError("inputs must be nonempty")
    err = predictions - targets
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err**2))),
    }


def mann_whitney(sample_a, sample_b, flags: tuple[str, ...] = ()) -> TestResult:
    """Two-sided Mann-Whitney U test.

    Uses the exact U distribution when the combined sample size is at most
    ``EXACT_U_MAX_N`` and there are no ties; otherwise the normal
    approximation with tie correction. The reported statistic counts pairs
    where ``sample_a`` exceeds ``sample_b`` (ties count one half).
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise MetricError("both samples must be nonempty")
    has_ties = np.unique(np.concatenate([a, b])).size < a.size + b.size
    method = "exact" if (a.size + b.size <= EXACT_U_MAX_N and not has_ties) else "asymptotic"
    res = stats.mannwhitneyu(a, b, alternative="two-sided", method=method)
    return TestResult(
        test_name="mann-whitney",
        statistic=float(res.statistic),
        p_value=float(res.pvalue),
        medians=(float(np.median(a)), float(np.median(b))),
        flags=flags,
    )


def compare_models(sample_a, sample_b, alpha: float = 0.05) -> TestResult:
    """Normality-gated two-sample comparison.

    Shapiro-Wilk is run on each sample; if both pass at ``alpha`` a two-sided
    independent t-test is used, otherwise Mann-Whitney U. Constant samples
    make the normality test undefined, so those fall through to Mann-Whitney
    with a flag.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 3 or b.size < 3:
        raise MetricError("compare_models requires at least 3 values per sample")

    normality: list[float | None] = []
    constant = False
    for s in (a, b):
        if np.ptp(s) == 0.0:
            normality.append(None)
            constant = True
        else:
            normality.append(float(stats.shapiro(s).pvalue))

    if constant:
        base = mann_whitney(a, b, flags=("normality-undefined-constant-sample",))
        return TestResult(
            test_name=base.test_name,
            statistic=base.statistic,
            p_value=base.p_value,
            normality_p=(normality[0], normality[1]),
            medians=base.medians,
            flags=base.flags,
        )

    if normality[0] >= alpha and normality[1] >= alpha:
        res = stats.ttest_ind(a, b)
        return TestResult(
            test_name="t-test",
            statistic=float(res.statistic),
            p_value=float(res.pvalue),
            normality_p=(normality[0], normality[1]),
            medians=(float(np.median(a)), float(np.median(b))),
        )
    base = mann_whitney(a, b)
    return TestResult(
        test_name=base.test_name,
        statistic=base.statistic,
        p_value=base.p_value,
        normality_p=(normality[0], normality[1]),
        medians=base.medians,
    )


def fold_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    """Mean with a t-distribution confidence interval across folds.

    Returns (mean, lower, upper) where the half-width is
    t_{n-1, (1+level)/2} * sd / sqrt(n).
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise MetricError("fold_ci requires at least 2 values")
    mean = float(values.mean())
    sd = float(values.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2.0, n - 1) * sd / np.sqrt(n))
    return mean, mean - half, mean + half


def metric_report(name: str, per_fold, level: float = 0.95) -> MetricReport:
    mean, lo, hi = fold_ci(per_fold, level)
    return MetricReport(
        metric=name,
        per_fold=tuple(float(v) for v in per_fold),
        mean=mean,
        ci_lower=lo,
        ci_upper=hi,
        n=len(per_fold),
    )


def grouped_confusion(predictions, labels, groups, n_classes: int, masks=None) -> dict[str, np.ndarray]:
    """One K x K confusion matrix per group value.

    Entries with a missing/None group value are collected under "other";
    masked entries (mask flag 1) are excluded entirely. Matrices over
    disjoint groups sum elementwise to the ungrouped matrix.
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    groups = list(groups)
    if not (len(predictions) == len(labels) == len(groups)):
        raise MetricError("predictions, labels, and groups must have the same length")
    if masks is None:
        masks = np.zeros(len(labels), dtype=int)
    masks = np.asarray(masks, dtype=int)

    out: dict[str, np.ndarray] = {}
    for pred, lab, grp, m in zip(predictions, labels, groups, masks):
        if m == 1:
            continue
        key = "other" if grp is None else str(grp)
        if key not in out:
            out[key] = np.zeros((n_classes, n_classes), dtype=int)
        out[key][lab, pred] += 1
    return out
