"""Quality-tier logic and evaluation statistics.

Tier rules: tier 3 if any artefact grade is 2, else tier 2 if any grade
is 1, else tier 1.

Recombination from the six binary detectors: motion and contrast grades
come from their severe/moderate flag pair; the noise detectors
(0vs12 and 0vs1) cannot distinguish moderate from severe, so the noise
grade is capped at 1 and the bad-quality decision treats the pair of
noise flags both firing as severe evidence.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from t1qc.errors import DataError

__all__ = [
    "SixWayPrediction",
    "grades_to_tier",
    "recombine_grades",
    "tier_from_flags",
    "tier_tasks",
    "balanced_accuracy",
    "annotator_balanced_accuracy",
    "weighted_cohen_kappa",
    "WilcoxonResult",
    "wilcoxon_signed_rank",
    "bonferroni",
]


@dataclass
class SixWayPrediction:
    """Boolean outputs of the six artefact-specific detectors for one
    image."""

    motion_severe: bool
    motion_moderate: bool
    contrast_severe: bool
    contrast_moderate: bool
    noise_0vs12: bool
    noise_0vs1: bool


def grades_to_tier(grades) -> int:
    """Map per-artefact grades (any object with motion/noise/contrast in
    {0,1,2}) to the overall quality tier."""
    g = (grades.motion, grades.noise, grades.contrast)
    if any(x not in (0, 1, 2) for x in g):
        raise DataError(f"grades must be in {{0,1,2}}, got {g}")
    if any(x == 2 for x in g):
        return 3
    if any(x == 1 for x in g):
        return 2
    return 1


def recombine_grades(p: SixWayPrediction):
    """Grades inferred from the six detector flags. Noise grade 2 is never
    emitted: the noise tasks cannot separate moderate from severe."""
    from t1qc.dataset import ArtefactGrades

    motion = 2 if p.motion_severe else (1 if p.motion_moderate else 0)
    contrast = 2 if p.contrast_severe else (1 if p.contrast_moderate else 0)
    noise = 1 if (p.noise_0vs12 or p.noise_0vs1) else 0
    return ArtefactGrades(motion=motion, noise=noise, contrast=contrast)


def tier_from_flags(p: SixWayPrediction) -> int:
    """Overall tier from the six flags: recombined grades drive the tier,
    and both noise flags firing together counts as severe evidence."""
    grades = recombine_grades(p)
    if grades.motion == 2 or grades.contrast == 2:
        return 3
    if p.noise_0vs12 and p.noise_0vs1:
        return 3
    return grades_to_tier(grades)


def tier_tasks(
    predicted: list[int] | np.ndarray, reference: list[int] | np.ndarray
) -> dict[str, dict[str, np.ndarray]]:
    """Binary label pairs for the two tier evaluation tasks.

    tier1vs2 is restricted to reference tiers {1, 2} with predictions >= 2
    counting as positive; tier12vs3 maps {1, 2} to negative and 3 to
    positive on both sides.
    """
    predicted = np.asarray(predicted, dtype=int)
    reference = np.asarray(reference, dtype=int)
    if predicted.shape != reference.shape:
        raise DataError("predicted and reference tier lists differ in length")
    for arr, name in ((predicted, "predicted"), (reference, "reference")):
        if np.any((arr < 1) | (arr > 3)):
            raise DataError(f"{name} tiers must be in {{1,2,3}}")
    keep = reference <= 2
    return {
        "tier1vs2": {
            "pred": (predicted[keep] >= 2).astype(int),
            "ref": (reference[keep] == 2).astype(int),
        },
        "tier12vs3": {
            "pred": (predicted == 3).astype(int),
            "ref": (reference == 3).astype(int),
        },
    }


# --------------------------------------------------------------------------
# Statistics


def balanced_accuracy(pred, ref) -> float:
    """(sensitivity + specificity) / 2 for binary labels."""
    pred = np.asarray(pred, dtype=int)
    ref = np.asarray(ref, dtype=int)
    if pred.shape != ref.shape:
        raise DataError("prediction and reference lists differ in length")
    pos = ref == 1
    neg = ref == 0
    if not pos.any() or not neg.any():
        raise DataError("balanced accuracy needs both classes in the reference")
    sensitivity = float(np.mean(pred[pos] == 1))
    specificity = float(np.mean(pred[neg] == 0))
    return (sensitivity + specificity) / 2.0


def annotator_balanced_accuracy(raters: list, consensus) -> float:
    """Mean balanced accuracy of each rater against the consensus."""
    if len(raters) < 2:
        raise DataError("need at least two raters")
    consensus = np.asarray(consensus, dtype=int)
    scores = []
    for rater in raters:
        rater = np.asarray(rater, dtype=int)
        if rater.shape != consensus.shape:
            raise DataError("rater and consensus label lists differ in length")
        scores.append(balanced_accuracy(rater, consensus))
    return float(np.mean(scores))


def weighted_cohen_kappa(r1, r2, weighting: str = "linear") -> float:
    """Weighted Cohen's kappa for ordinal grades in {0, 1, 2}.

    kappa = 1 - sum(w * O) / sum(w * E), with O the observed contingency,
    E the chance-expected one, and w the linear or quadratic disagreement
    weights. Two identical constant raters have no expected disagreement
    and score 1.0 by convention.
    """
    r1 = np.asarray(r1, dtype=int)
    r2 = np.asarray(r2, dtype=int)
    if r1.shape != r2.shape:
        raise DataError("rating lists differ in length")
    if r1.size == 0:
        raise DataError("rating lists are empty")
    if np.any((r1 < 0) | (r1 > 2) | (r2 < 0) | (r2 > 2)):
        raise DataError("grades must be in {0,1,2}")
    if weighting not in ("linear", "quadratic"):
        raise DataError(f"weighting must be 'linear' or 'quadratic', got {weighting!r}")
    k = 3
    observed = np.zeros((k, k), dtype=np.float64)
    for a, b in zip(r1, r2):
        observed[a, b] += 1.0
    observed /= r1.size
    marg1 = observed.sum(axis=1)
    marg2 = observed.sum(axis=0)
    expected = np.outer(marg1, marg2)
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    w = np.abs(i - j).astype(np.float64)
    if weighting == "quadratic":
        w = w**2
    expected_disagreement = float((w * expected).sum())
    if expected_disagreement == 0.0:
        return 1.0
    return 1.0 - float((w * observed).sum()) / expected_disagreement


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n_nonzero: int
    method: str
    all_zero: bool = False


def _signed_ranks(diff: np.ndarray) -> np.ndarray:
    """Mid-ranks of |diff| (ties share the average rank)."""
    abs_d = np.abs(diff)
    order = np.argsort(abs_d, kind="stable")
    ranks = np.empty(len(abs_d), dtype=np.float64)
    sorted_abs = abs_d[order]
    i = 0
    while i < len(sorted_abs):
        j = i
        while j + 1 < len(sorted_abs) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(
    a, b, exact_threshold: int = 12
) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired scores.

    Zero differences are dropped and tied magnitudes mid-ranked. Up to
    ``exact_threshold`` nonzero differences the p-value comes from the
    exact conditional distribution (all 2^n sign assignments); beyond
    that, from the normal approximation with continuity correction and
    tie-corrected variance. All-zero differences report p = 1.0 with the
    ``all_zero`` flag set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("paired score lists differ in length")
    diff = a - b
    diff = diff[diff != 0.0]
    n = len(diff)
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n_nonzero=0, method="degenerate", all_zero=True)
    ranks = _signed_ranks(diff)
    w_plus = float(ranks[diff > 0].sum())
    total = float(ranks.sum())
    w_min = min(w_plus, total - w_plus)

    if n <= exact_threshold:
        w_hi = total - w_min
        count = 0
        for signs in itertools.product((0.0, 1.0), repeat=n):
            w = float(np.dot(signs, ranks))
            if w <= w_min + 1e-12 or w >= w_hi - 1e-12:
                count += 1
        p = count / (1 << n)
        return WilcoxonResult(statistic=w_min, p_value=min(1.0, p), n_nonzero=n, method="exact")

    mean_w = n * (n + 1) / 4.0
    var_w = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    var_w -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var_w <= 0:
        return WilcoxonResult(statistic=w_min, p_value=1.0, n_nonzero=n, method="normal")
    z = (w_min - mean_w + 0.5) / math.sqrt(var_w)
    p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
    return WilcoxonResult(statistic=w_min, p_value=min(1.0, p), n_nonzero=n, method="normal")


def bonferroni(p_values: list[float]) -> list[float]:
    """Bonferroni-corrected p-values over one family of comparisons."""
    m = len(p_values)
    return [min(1.0, p * m) for p in p_values]
