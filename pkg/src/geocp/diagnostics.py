"""Partition-conditional group maps, distribution distances, geometric weights.

A group map is the empirical frequency table of assigned poses per data
partition.  Built from a canonicalizer it diagnoses geometric structure in a
dataset; built from stored true poses it gives the ground-truth counterpart.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .conformal import Partitioner, WeightVector
from .data import Dataset

__all__ = [
    "GroupMap",
    "WeightConfig",
    "build_group_map",
    "group_map_from_posteriors",
    "true_group_map",
    "distribution_distance",
    "distance_profile",
    "inverse_distance_weight",
    "geometric_weights",
    "emit_group_map_plot",
]


@dataclass(frozen=True)
class GroupMap:
    """Row-normalized pose frequencies per partition.

    Rows whose every sample was discarded by the confidence filter are left
    undefined: their frequencies are NaN and ``defined`` is False there.
    """

    frequencies: np.ndarray  # (K_part, |G|), rows sum to 1 or are NaN
    counts: np.ndarray  # (K_part, |G|) retained sample counts
    threshold: float
    mode: str

    @property
    def num_partitions(self) -> int:
        return self.frequencies.shape[0]

    @property
    def group_order(self) -> int:
        return self.frequencies.shape[1]

    @property
    def defined(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def row(self, k: int) -> np.ndarray:
        return self.frequencies[k]

    def argmax_rows(self) -> np.ndarray:
        """Most frequent pose per partition; -1 for undefined rows."""
        out = np.full(self.num_partitions, -1, dtype=np.int64)
        defined = self.defined
        if defined.any():
            out[defined] = np.argmax(self.frequencies[defined], axis=1)
        return out


def group_map_from_posteriors(
    posteriors: np.ndarray,
    partitions: np.ndarray,
    mode: str = "sample",
    threshold: float = 0.0,
    seed: int | None = None,
    num_partitions: int | None = None,
) -> GroupMap:
    """Accumulate a group map from per-sample pose posteriors.

    Each sample contributes the pose drawn from (``mode="sample"``) or the
    argmax of (``mode="argmax"``) its posterior, unless the posterior mass at
    that pose falls below ``threshold``, in which case it is discarded.
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    partitions = np.asarray(partitions)
    if posteriors.ndim != 2 or posteriors.shape[0] != partitions.size:
        raise ValueError("posteriors must be (N, |G|) aligned with partitions")
    if mode not in ("sample", "argmax"):
        raise ValueError(f"unknown assignment mode {mode!r}")
    order = posteriors.shape[1]
    if num_partitions is None:
        num_partitions = int(partitions.max()) + 1

    if mode == "argmax":
        assigned = np.argmax(posteriors, axis=1)
    else:
        rng = np.random.default_rng(seed)
        cum = np.cumsum(posteriors, axis=1)
        cum /= cum[:, -1:]
        assigned = (rng.random(posteriors.shape[0])[:, None] < cum).argmax(axis=1)

    confidence = posteriors[np.arange(posteriors.shape[0]), assigned]
    keep = confidence >= threshold

    counts = np.zeros((num_partitions, order), dtype=np.int64)
    np.add.at(counts, (partitions[keep], assigned[keep]), 1)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        freqs = np.where(totals > 0, counts / np.maximum(totals, 1), np.nan)
    return GroupMap(freqs, counts, threshold, mode)


def build_group_map(
    dataset: Dataset,
    canonicalizer,
    partitioner: Partitioner,
    mode: str = "sample",
    threshold: float = 0.0,
    seed: int | None = None,
    num_partitions: int | None = None,
) -> GroupMap:
    """Group map of a dataset under a canonicalizer's pose assignments."""
    posteriors = canonicalizer.posterior_matrix(dataset.images())
    partitions = partitioner.assign(dataset)
    return group_map_from_posteriors(
        posteriors, partitions, mode, threshold, seed, num_partitions
    )


def true_group_map(
    dataset: Dataset, group_order: int, num_partitions: int | None = None
) -> GroupMap:
    """Ground-truth group map from the poses recorded by the applied shift."""
    poses = dataset.true_pose_indices()
    if (poses < 0).any():
        raise ValueError("dataset has samples without a recorded true pose")
    onehot = np.zeros((len(dataset), group_order))
    onehot[np.arange(len(dataset)), poses] = 1.0
    return group_map_from_posteriors(
        onehot,
        dataset.partitions(),
        mode="argmax",
        threshold=0.0,
        num_partitions=num_partitions,
    )


# ---------------------------------------------------------------------------
# distances and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightConfig:
    """Distance metric and slope for geometric calibration weights."""

    metric: str = "cross-entropy"
    power: float = 2.0
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.metric not in ("kl", "cross-entropy"):
            raise ValueError(f"unknown distance metric {self.metric!r}")
        if self.power <= 0:
            raise ValueError(f"power must be > 0, got {self.power}")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")


def _probs_of(dist) -> np.ndarray:
    probs = getattr(dist, "probs", dist)
    return np.asarray(probs, dtype=np.float64)


def _smooth(p: np.ndarray, epsilon: float) -> np.ndarray:
    p = p + epsilon
    return p / p.sum(axis=-1, keepdims=True)


def distribution_distance(p, q, metric: str = "cross-entropy", epsilon: float = 1e-6) -> float:
    """KL divergence or cross-entropy between two epsilon-smoothed vectors."""
    p = _probs_of(p)
    q = _probs_of(q)
    if p.shape != q.shape:
        raise ValueError(f"distributions differ in length: {p.shape} vs {q.shape}")
    p = _smooth(p, epsilon)
    q = _smooth(q, epsilon)
    if metric == "kl":
        return float(np.sum(p * np.log(p / q)))
    if metric == "cross-entropy":
        return float(-np.sum(p * np.log(q)))
    raise ValueError(f"unknown distance metric {metric!r}")


def distance_profile(
    test_posterior, calibration_posteriors: np.ndarray, cfg: WeightConfig
) -> np.ndarray:
    """Distances from one test posterior to each row of a calibration stack."""
    p = _smooth(_probs_of(test_posterior), cfg.epsilon)
    q = _smooth(np.asarray(calibration_posteriors, dtype=np.float64), cfg.epsilon)
    if q.ndim != 2 or q.shape[1] != p.size:
        raise ValueError("calibration posteriors must be (N, |G|)")
    ce = -(p[None, :] * np.log(q)).sum(axis=1)
    if cfg.metric == "cross-entropy":
        return ce
    entropy = float(-np.sum(p * np.log(p)))
    return ce - entropy


def inverse_distance_weight(distance: float, power: float) -> float:
    """Unnormalized geometric weight 1 / (1 + D^p)."""
    return 1.0 / (1.0 + distance**power)


def geometric_weights(
    test_posterior, calibration_posteriors, cfg: WeightConfig | None = None
) -> WeightVector:
    """Calibration weights from posterior distances, test point at distance 0."""
    cfg = cfg or WeightConfig()
    dists = distance_profile(test_posterior, _probs_of(calibration_posteriors), cfg)
    raw = 1.0 / (1.0 + dists**cfg.power)
    return WeightVector.from_unnormalized(raw, 1.0)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

_CELL = 24  # pixels per heatmap cell


def _heatmap_bytes(group_map: GroupMap) -> bytes:
    """Render the map as a binary PPM; undefined rows get a hatched pattern."""
    k, g = group_map.frequencies.shape
    height, width = k * _CELL, g * _CELL
    img = np.zeros((height, width, 3), dtype=np.uint8)
    defined = group_map.defined
    for row in range(k):
        for col in range(g):
            block = img[row * _CELL : (row + 1) * _CELL, col * _CELL : (col + 1) * _CELL]
            if not defined[row]:
                rr, cc = np.mgrid[0:_CELL, 0:_CELL]
                stripe = ((rr + cc) // 4) % 2 == 0
                block[stripe] = (90, 90, 90)
                block[~stripe] = (200, 200, 200)
                continue
            v = group_map.frequencies[row, col]
            # dark blue (low) to warm yellow (high)
            block[:, :, 0] = int(round(30 + 225 * v))
            block[:, :, 1] = int(round(30 + 190 * v))
            block[:, :, 2] = int(round(90 + 40 * (1 - v)))
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + img.tobytes()


def emit_group_map_plot(group_map: GroupMap, path) -> tuple[str, str]:
    """Write the heatmap image and its CSV twin; returns both paths.

    ``path`` is used as a stem: ``<path>.ppm`` and ``<path>.csv``.  Output
    bytes are a pure function of the map contents.
    """
    stem = str(path)
    ppm_path = stem + ".ppm"
    csv_path = stem + ".csv"
    with open(ppm_path, "wb") as fh:
        fh.write(_heatmap_bytes(group_map))
    defined = group_map.defined
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["partition", "group_index", "frequency", "count"])
        for row in range(group_map.num_partitions):
            for col in range(group_map.group_order):
                freq = (
                    f"{group_map.frequencies[row, col]:.9g}" if defined[row] else "NA"
                )
                writer.writerow([row, col, freq, int(group_map.counts[row, col])])
    return ppm_path, csv_path
