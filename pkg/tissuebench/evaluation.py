"""Dice overlap, the Wilcoxon signed-rank test and case-level splits."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm, rankdata

from tissuebench.volumes import CLASS_NAMES, Case, LabelMap

logger = logging.getLogger(__name__)

MIN_PAIRS = 5
EXACT_MAX_PAIRS = 25
SIDES = ("two-sided", "greater", "less")
METHODS = ("auto", "exact", "normal")

LabelsLike = Union[LabelMap, np.ndarray]


@dataclass(frozen=True)
class DSCResult:
    case_id: str
    per_class: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for class_id, value in self.per_class.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{self.case_id}: DSC for class {class_id} outside [0, 1]: {value}")


@dataclass(frozen=True)
class SignificanceResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str
    too_few_pairs: bool = False

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n_effective": self.n_effective,
            "method": self.method,
            "too_few_pairs": self.too_few_pairs,
        }


def _labels(value: LabelsLike) -> np.ndarray:
    return value.labels if isinstance(value, LabelMap) else np.asarray(value)


def dice(ground_truth: LabelsLike, segmentation: LabelsLike, class_id: int) -> float:
    """2|A and B| / (|A| + |B|) for one tissue class; 1.0 when both are empty."""
    if class_id not in CLASS_NAMES:
        raise ValueError(f"class_id must be one of {sorted(CLASS_NAMES)}, got {class_id}")
    truth = _labels(ground_truth)
    predicted = _labels(segmentation)
    if truth.shape != predicted.shape:
        raise ValueError(f"Shape mismatch: ground truth {truth.shape}, segmentation {predicted.shape}")
    a = truth == class_id
    b = predicted == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def evaluate_case(ground_truth: LabelsLike, segmentation: LabelsLike, case_id: str = "") -> DSCResult:
    return DSCResult(case_id, {class_id: dice(ground_truth, segmentation, class_id) for class_id in CLASS_NAMES})


def signed_rank_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments reaching each doubled positive-rank sum.

    Ranks are doubled so mid-ranks of ties stay integral.
    """
    doubled_ranks = [int(r) for r in doubled_ranks]
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = counts[: total + 1 - rank].copy()
        counts[rank:] += shifted
    return counts


def _exact_p_value(ranks: np.ndarray, w_plus: float, sided: str) -> float:
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    counts = signed_rank_counts(doubled)
    observed = int(round(2.0 * w_plus))
    total = 2 ** len(ranks)
    at_most = int(counts[: observed + 1].sum())
    at_least = int(counts[observed:].sum())
    if sided == "greater":
        return at_least / total
    if sided == "less":
        return at_most / total
    return min(1.0, 2 * min(at_most, at_least) / total)


def _normal_p_value(abs_differences: np.ndarray, w_plus: float, sided: str) -> float:
    n = abs_differences.size
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(abs_differences, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties.astype(np.float64) ** 3 - ties)) / 48.0
    if variance <= 0:
        return 1.0
    sd = math.sqrt(variance)
    if sided == "greater":
        return float(norm.sf((w_plus - mean - 0.5) / sd))
    if sided == "less":
        return float(norm.cdf((w_plus - mean + 0.5) / sd))
    z = (abs(w_plus - mean) - 0.5) / sd
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], sided: str = "two-sided", method: str = "auto"
) -> SignificanceResult:
    """Paired Wilcoxon signed-rank test of a against b.

    Zero differences are dropped and ties share mid-ranks. The statistic is
    the sum of ranks of positive differences. ``method="auto"`` enumerates
    the exact null distribution up to 25 non-zero pairs and otherwise uses
    the tie-corrected normal approximation with continuity correction.
    "greater" tests whether a tends to exceed b.

    Fewer than 5 non-zero pairs yield p = 1.0 with ``too_few_pairs`` set.
    """
    if sided not in SIDES:
        raise ValueError(f"sided must be one of {SIDES}, got {sided!r}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"Paired samples must be 1D and equally long, got {a.shape} and {b.shape}")

    differences = a - b
    differences = differences[differences != 0]
    n = int(differences.size)
    if n == 0:
        return SignificanceResult(0.0, 1.0, 0, "exact", too_few_pairs=True)
    abs_differences = np.abs(differences)
    ranks = rankdata(abs_differences)
    w_plus = float(ranks[differences > 0].sum())
    if n < MIN_PAIRS:
        logger.warning(f"Only {n} non-zero paired differences; reporting p = 1.0")
        return SignificanceResult(w_plus, 1.0, n, "exact", too_few_pairs=True)

    if method == "auto":
        method = "exact" if n <= EXACT_MAX_PAIRS else "normal"
    if method == "exact":
        p_value = _exact_p_value(ranks, w_plus, sided)
    else:
        p_value = _normal_p_value(abs_differences, w_plus, sided)
    return SignificanceResult(w_plus, float(p_value), n, method)


def loocv_folds(cases: Sequence[Case]) -> List[Tuple[List[Case], Case]]:
    """One fold per case: that case is held out, the rest train."""
    if len(cases) < 3:
        raise ValueError(f"Leave-one-out needs at least 3 cases, got {len(cases)}")
    return [([c for j, c in enumerate(cases) if j != i], case) for i, case in enumerate(cases)]


def holdout_split(cases: Sequence[Case], test_fraction: float, seed: int) -> Tuple[List[Case], List[Case]]:
    """Seeded train/test split; the test set holds round(test_fraction * n) cases (at least 1)."""
    n = len(cases)
    if n < 3:
        raise ValueError(f"A hold-out split needs at least 3 cases, got {n}")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = min(max(1, int(math.floor(test_fraction * n + 0.5))), n - 2)
    order = np.random.default_rng(seed).permutation(n)
    test = sorted(int(i) for i in order[:n_test])
    train = sorted(int(i) for i in order[n_test:])
    return [cases[i] for i in train], [cases[i] for i in test]


def summarize(results: Sequence[DSCResult]) -> Dict[int, Tuple[float, float]]:
    """Mean and population standard deviation of DSC per class."""
    if not results:
        raise ValueError("No results to summarize")
    summary = {}
    for class_id in CLASS_NAMES:
        values = np.array([r.per_class[class_id] for r in results], dtype=np.float64)
        summary[class_id] = (float(values.mean()), float(values.std()))
    return summary
