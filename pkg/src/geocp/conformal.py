"""Nonconformity scores, conformal calibration, and prediction-set metrics.

Quantile ranks follow the finite-sample-corrected rule: with n calibration
scores the (1-alpha) quantile is the ceil((n+1)(1-alpha))-th smallest score,
or +inf when that rank exceeds n.  Rank arithmetic runs over exact rationals
of the float inputs, so boundary cases cannot be lost to rounding.  The
weighted variant replaces counts by normalized weights, with the test point's
weight standing on the +inf atom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ScoreFunction",
    "WeightVector",
    "CalibrationResult",
    "Metrics",
    "Partitioner",
    "calibrate",
    "conformal_quantile",
    "weighted_quantile",
    "predict_set",
    "set_matrix",
    "mondrian_calibrate",
    "evaluate",
    "kernel_weights",
]


@dataclass
class ScoreFunction:
    """Nonconformity score: cumulative-mass ("aps") or one-minus-prob ("thr").

    The aps score of class y is the total probability of all classes whose
    probability is >= probs[y] (ties included); the randomized variant
    replaces the contribution of probs[y] itself by u * probs[y] with u drawn
    from this function's seeded stream, one draw per evaluated entry.
    """

    kind: str = "aps"
    randomized: bool = False
    seed: int | None = None
    _rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("aps", "thr"):
            raise ValueError(f"unknown score function {self.kind!r}")
        if self.randomized:
            self._rng = np.random.default_rng(self.seed)

    def _validate(self, probs: np.ndarray) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim == 1:
            probs = probs[None]
        if probs.min() < -1e-9 or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("scores need a valid probability vector per row")
        return probs

    def score_matrix(self, probs) -> np.ndarray:
        """Scores for every class; accepts (K,) or (N, K), returns same shape."""
        single = np.asarray(probs).ndim == 1
        p = self._validate(probs)
        if self.kind == "thr":
            out = 1.0 - p
        else:
            # mass of all classes at least as probable as the candidate
            geq = p[:, None, :] >= p[:, :, None]
            out = np.einsum("nyk,nk->ny", geq, p)
            if self.randomized:
                u = self._rng.random(p.shape)
                out = out - (1.0 - u) * p
        return out[0] if single else out

    def score(self, probs, y: int) -> float:
        """Score of the single candidate class ``y``."""
        p = self._validate(probs)
        if p.shape[0] != 1:
            raise ValueError("score() takes one probability vector; use scores_for")
        if not 0 <= y < p.shape[1]:
            raise ValueError(f"class {y} out of range for {p.shape[1]} classes")
        if self.kind == "thr":
            return float(1.0 - p[0, y])
        base = float(p[0, p[0] >= p[0, y]].sum())
        if self.randomized:
            u = float(self._rng.random())
            base -= (1.0 - u) * float(p[0, y])
        return base

    def scores_for(self, probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Scores at the given label per row of an (N, K) probability matrix."""
        p = self._validate(probs)
        labels = np.asarray(labels)
        rows = np.arange(p.shape[0])
        if self.kind == "thr":
            return 1.0 - p[rows, labels]
        p_y = p[rows, labels]
        base = np.where(p >= p_y[:, None], p, 0.0).sum(axis=1)
        if self.randomized:
            u = self._rng.random(p.shape[0])
            base = base - (1.0 - u) * p_y
        return base


@dataclass(frozen=True)
class WeightVector:
    """Normalized weights over n calibration scores plus the test point."""

    calibration: np.ndarray
    test: float

    def __post_init__(self) -> None:
        cal = np.asarray(self.calibration, dtype=np.float64)
        object.__setattr__(self, "calibration", cal)
        if cal.ndim != 1 or cal.size < 1:
            raise ValueError("calibration weights must be a non-empty vector")
        if cal.min() < 0 or self.test < 0:
            raise ValueError("weights must be non-negative")
        total = float(cal.sum()) + float(self.test)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1 within 1e-9, got {total}")

    @staticmethod
    def uniform(n: int) -> "WeightVector":
        w = 1.0 / (n + 1)
        return WeightVector(np.full(n, w), w)

    @staticmethod
    def from_unnormalized(cal: np.ndarray, test: float) -> "WeightVector":
        cal = np.asarray(cal, dtype=np.float64)
        total = float(cal.sum()) + float(test)
        if total <= 0:
            raise ValueError("unnormalized weights must have positive total mass")
        return WeightVector(cal / total, float(test) / total)


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of a calibration pass: the quantile(s) actually used."""

    alpha: float
    quantile: float
    n: int
    per_partition: Mapping[int, float] | None = None
    weights: WeightVector | None = None


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _conformal_rank(n: int, alpha: float) -> int:
    """ceil((n+1)(1-alpha)) over the exact rational value of the float alpha."""
    return math.ceil((n + 1) * (1 - Fraction(alpha)))


def conformal_quantile(scores, alpha: float) -> float:
    """Sample-corrected (1-alpha) quantile of the scores, extended with +inf."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("need a non-empty 1-D score set")
    _check_alpha(alpha)
    n = scores.size
    k = _conformal_rank(n, alpha)
    if k > n:
        return math.inf
    return float(np.sort(scores, kind="stable")[k - 1])


def weighted_quantile(scores, weights: WeightVector, alpha: float) -> float:
    """Quantile of the weighted score distribution with +inf test atom.

    Returns the smallest score whose cumulative weight (aggregated per
    distinct score value, so ties cannot straddle the threshold) reaches
    1 - alpha; +inf when the finite mass falls short.  Cumulative sums are
    exact over the rationals of the float weights.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("need a non-empty 1-D score set")
    _check_alpha(alpha)
    if weights.calibration.size != scores.size:
        raise ValueError(
            f"{weights.calibration.size} weights for {scores.size} scores"
        )
    order = np.argsort(scores, kind="stable")
    threshold = 1 - Fraction(alpha)
    cumulative = Fraction(0)
    i = 0
    n = scores.size
    while i < n:
        value = scores[order[i]]
        while i < n and scores[order[i]] == value:
            cumulative += Fraction(float(weights.calibration[order[i]]))
            i += 1
        if cumulative >= threshold:
            return float(value)
    return math.inf


def calibrate(
    scores,
    alpha: float,
    partitions=None,
    weights: WeightVector | None = None,
) -> CalibrationResult:
    """One-stop calibration returning the quantile(s) actually used.

    Plain split calibration by default; pass ``partitions`` for Mondrian
    (per-cell) quantiles or ``weights`` for the weighted quantile.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if partitions is not None and weights is not None:
        raise ValueError("choose either partitions or weights, not both")
    if partitions is not None:
        per = mondrian_calibrate(scores, partitions, alpha)
        return CalibrationResult(alpha, math.inf, scores.size, per_partition=per)
    if weights is not None:
        q = weighted_quantile(scores, weights, alpha)
        return CalibrationResult(alpha, q, scores.size, weights=weights)
    return CalibrationResult(alpha, conformal_quantile(scores, alpha), scores.size)


def predict_set(score_fn: ScoreFunction, probs, quantile: float) -> np.ndarray:
    """Indices of all classes whose score does not exceed the quantile."""
    scores = score_fn.score_matrix(probs)
    if scores.ndim != 1:
        raise ValueError("predict_set takes one probability vector")
    return np.nonzero(scores <= quantile)[0]


def set_matrix(score_fn: ScoreFunction, probs: np.ndarray, quantile) -> np.ndarray:
    """Boolean (N, K) membership matrix of prediction sets.

    ``quantile`` may be a scalar or a per-sample vector (as produced by
    partition-wise calibration).
    """
    scores = score_fn.score_matrix(probs)
    q = np.asarray(quantile, dtype=np.float64)
    if q.ndim == 1:
        q = q[:, None]
    return scores <= q


def mondrian_calibrate(scores, partitions, alpha: float) -> dict[int, float]:
    """Independent conformal quantile within each partition cell."""
    scores = np.asarray(scores, dtype=np.float64)
    partitions = np.asarray(partitions)
    if scores.shape != partitions.shape:
        raise ValueError("scores and partitions must align")
    _check_alpha(alpha)
    return {
        int(k): conformal_quantile(scores[partitions == k], alpha)
        for k in np.unique(partitions)
    }


def quantiles_for(partition_quantiles: Mapping[int, float], partitions) -> np.ndarray:
    """Per-sample quantile lookup; partitions unseen at calibration get +inf."""
    return np.array(
        [partition_quantiles.get(int(k), math.inf) for k in np.asarray(partitions)]
    )


@dataclass(frozen=True)
class Metrics:
    """Coverage/size summary of a batch of prediction sets."""

    coverage: float
    mean_set_size: float
    n: int
    accuracy: float | None = None
    per_partition_coverage: Mapping[int, float] | None = None


def evaluate(
    sets: np.ndarray,
    truths,
    partitions=None,
    point_predictions=None,
) -> Metrics:
    """Marginal coverage and mean set size, optionally per partition.

    ``sets`` is the boolean (N, K) membership matrix from :func:`set_matrix`.
    """
    sets = np.asarray(sets, dtype=bool)
    truths = np.asarray(truths)
    if sets.ndim != 2 or sets.shape[0] != truths.size:
        raise ValueError("sets must be (N, K) aligned with truths")
    hit = sets[np.arange(truths.size), truths]
    coverage = float(hit.mean())
    mean_size = float(sets.sum(axis=1).mean())
    accuracy = None
    if point_predictions is not None:
        point_predictions = np.asarray(point_predictions)
        if point_predictions.size != truths.size:
            raise ValueError("point predictions must align with truths")
        accuracy = float(np.mean(point_predictions == truths))
    per_partition = None
    if partitions is not None:
        partitions = np.asarray(partitions)
        if partitions.size != truths.size:
            raise ValueError("partitions must align with truths")
        per_partition = {
            int(k): float(hit[partitions == k].mean()) for k in np.unique(partitions)
        }
    return Metrics(coverage, mean_size, truths.size, accuracy, per_partition)


def kernel_weights(x_cal, x_test, bandwidth: float) -> WeightVector:
    """Feature-distance weights exp(-h * ||x_i - x_test||), test weight 1."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    cal = np.asarray(x_cal, dtype=np.float64).reshape(len(x_cal), -1)
    test = np.asarray(x_test, dtype=np.float64).ravel()
    dists = np.linalg.norm(cal - test[None, :], axis=1)
    return WeightVector.from_unnormalized(np.exp(-bandwidth * dists), 1.0)


@dataclass
class Partitioner:
    """Sample-to-partition assignment rule.

    Variants: ``by-label`` (class labels), ``by-partition-field`` (the
    dataset's stored partition ids), ``by-group-argmax`` (most likely pose
    from an attached canonicalizer), ``by-entropy-bins`` (predictive entropy
    of an attached classifier digitized into the given bin edges).
    """

    variant: str
    canonicalizer: object | None = None
    classifier: object | None = None
    entropy_edges: Sequence[float] | None = None

    VARIANTS = ("by-label", "by-partition-field", "by-group-argmax", "by-entropy-bins")

    def __post_init__(self) -> None:
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown partitioner {self.variant!r}")
        if self.variant == "by-group-argmax" and self.canonicalizer is None:
            raise ValueError("by-group-argmax needs a canonicalizer")
        if self.variant == "by-entropy-bins" and (
            self.classifier is None or not self.entropy_edges
        ):
            raise ValueError("by-entropy-bins needs a classifier and bin edges")

    def assign(self, dataset) -> np.ndarray:
        if self.variant == "by-label":
            return dataset.labels()
        if self.variant == "by-partition-field":
            return dataset.partitions()
        if self.variant == "by-group-argmax":
            posteriors = self.canonicalizer.posterior_matrix(dataset.images())
            return np.argmax(posteriors, axis=1).astype(np.int64)
        probs = self.classifier.predict_proba(dataset.images())
        entropy = -np.sum(probs * np.log(np.maximum(probs, 1e-300)), axis=1)
        return np.digitize(entropy, np.asarray(self.entropy_edges)).astype(np.int64)
