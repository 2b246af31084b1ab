"""Synthetic glyph datasets, geometric shift application, and dataset files.

The glyph corpus is a deterministic stand-in for a natural-image benchmark:
each class is a distinct smooth-edged shape rendered upright (the canonical
pose), with small positional/scale jitter and pixel noise.  Exactly one class
is a near-rotation-invariant ring (drawn with a small gap so its pose is not
fully ambiguous), which stresses pose estimation downstream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .circular import mixture_grid_probs
from .errors import ConfigError, FormatError
from .groups import CyclicGroup, GridImage, GroupElement, rotate_array

__all__ = [
    "LabeledSample",
    "Dataset",
    "ShiftSpec",
    "VAR_GAUSS_SIGMAS",
    "KAPPA_SCHEDULE",
    "generate_glyphs",
    "apply_shift",
    "wrapped_normal_pmf",
    "save_dataset",
    "load_dataset",
]

SPLITS = ("canon-train", "predictor-train", "calibration", "test")

# standard deviations used by the per-partition "var-gauss" shift family
VAR_GAUSS_SIGMAS = (0.0001, 0.001, 0.01, 0.1, 1.0, 10.0)

# standard concentration sweep for the von Mises interpolation experiments
KAPPA_SCHEDULE = (50.0, 40.0, 30.0, 20.0, 10.0)

_POSE_ABSENT = 0xFFFFFFFF
_DATASET_MAGIC = b"CP2T"
_DATASET_VERSION = 1


@dataclass(frozen=True)
class LabeledSample:
    """One image with its class label, partition id, and optional true pose.

    ``true_pose`` records the group element actually applied by a shift; it
    exists for diagnostics only and must never feed models or calibration.
    """

    image: GridImage
    label: int
    partition: int = -1
    true_pose: GroupElement | None = None

    def __post_init__(self) -> None:
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")
        if self.partition < 0:
            object.__setattr__(self, "partition", self.label)


class Dataset:
    """A split-tagged, immutable sequence of labeled samples."""

    def __init__(self, samples: Sequence[LabeledSample], split: str, num_classes: int):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        samples = tuple(samples)
        if not samples:
            raise ValueError("dataset must contain at least one sample")
        side = samples[0].image.side
        for s in samples:
            if s.image.side != side:
                raise ValueError("all images in a dataset must share one side length")
            if s.label >= num_classes:
                raise ValueError(
                    f"label {s.label} out of range for {num_classes} classes"
                )
        self.samples = samples
        self.split = split
        self.num_classes = num_classes
        self._images: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> LabeledSample:
        return self.samples[i]

    @property
    def side(self) -> int:
        return self.samples[0].image.side

    def images(self) -> np.ndarray:
        """All pixels stacked as an (N, side, side) float32 array."""
        if self._images is None:
            self._images = np.stack([s.image.pixels for s in self.samples])
        return self._images

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def partitions(self) -> np.ndarray:
        return np.array([s.partition for s in self.samples], dtype=np.int64)

    def true_pose_indices(self) -> np.ndarray:
        """Applied pose index per sample, -1 where no pose was recorded."""
        return np.array(
            [-1 if s.true_pose is None else s.true_pose.index for s in self.samples],
            dtype=np.int64,
        )

    def with_split(self, split: str) -> "Dataset":
        return Dataset(self.samples, split, self.num_classes)

    def with_partitions(self, partition_ids) -> "Dataset":
        """Copy of the dataset with the partition field replaced per sample."""
        partition_ids = np.asarray(partition_ids)
        if partition_ids.shape != (len(self.samples),):
            raise ValueError(
                f"need one partition id per sample, got {partition_ids.shape}"
            )
        samples = [
            LabeledSample(s.image, s.label, int(k), s.true_pose)
            for s, k in zip(self.samples, partition_ids)
        ]
        return Dataset(samples, self.split, self.num_classes)


# ---------------------------------------------------------------------------
# glyph rendering
# ---------------------------------------------------------------------------
#
# Shapes are signed-distance fields (positive inside) on a centered [-1, 1]
# frame; intensity comes from a smoothstep over the distance, which keeps
# edges a little soft so rotations resample cleanly.


def _box(x, y, cx, cy, hw, hh):
    return np.minimum(hw - np.abs(x - cx), hh - np.abs(y - cy))


def _disk(x, y, cx, cy, r):
    return r - np.hypot(x - cx, y - cy)


def _halfplane(x, y, nx, ny, ax, ay):
    norm = math.hypot(nx, ny)
    return (nx * (x - ax) + ny * (y - ay)) / norm


def _glyph_tee(x, y):
    return np.maximum(_box(x, y, 0.0, 0.55, 0.62, 0.14), _box(x, y, 0.0, -0.08, 0.14, 0.55))


def _glyph_ell(x, y):
    return np.maximum(_box(x, y, -0.42, 0.05, 0.15, 0.62), _box(x, y, 0.0, -0.52, 0.55, 0.15))


def _glyph_arrow(x, y):
    tri = np.minimum(
        _halfplane(x, y, 0.0, 1.0, 0.0, 0.08),
        np.minimum(
            _halfplane(x, y, 0.6, -0.5, 0.0, 0.68),
            _halfplane(x, y, -0.6, -0.5, 0.0, 0.68),
        ),
    )
    stem = _box(x, y, 0.0, -0.32, 0.13, 0.4)
    return np.maximum(tri, stem)


def _glyph_flag(x, y):
    pole = _box(x, y, -0.45, 0.0, 0.09, 0.66)
    banner = _box(x, y, 0.1, 0.42, 0.42, 0.2)
    return np.maximum(pole, banner)


def _glyph_dome(x, y):
    cap = np.minimum(_disk(x, y, 0.0, 0.02, 0.56), _halfplane(x, y, 0.0, 1.0, 0.0, 0.02))
    bar = _box(x, y, 0.0, -0.12, 0.56, 0.1)
    return np.maximum(cap, bar)


def _glyph_wedge(x, y):
    return np.minimum(
        _halfplane(x, y, 1.0, 0.0, -0.52, 0.0),
        np.minimum(
            _halfplane(x, y, 0.0, 1.0, 0.0, -0.52),
            _halfplane(x, y, -1.0, -1.0, 0.05, 0.05),
        ),
    )


def _glyph_dumbbell(x, y):
    return np.maximum(
        np.maximum(_disk(x, y, 0.0, 0.38, 0.3), _disk(x, y, 0.0, -0.48, 0.15)),
        _box(x, y, 0.0, -0.05, 0.08, 0.45),
    )


def _glyph_comb(x, y):
    spine = _box(x, y, -0.45, 0.0, 0.12, 0.62)
    t1 = _box(x, y, 0.02, 0.5, 0.45, 0.1)
    t2 = _box(x, y, -0.08, 0.0, 0.32, 0.1)
    t3 = _box(x, y, 0.08, -0.5, 0.5, 0.1)
    return np.maximum(np.maximum(spine, t1), np.maximum(t2, t3))


_GAP_HALF_ANGLE = 0.65  # radians; ~74 degree opening at the top of the ring


def _glyph_ring(x, y):
    ring = 0.11 - np.abs(np.hypot(x, y) - 0.46)
    ang = np.arctan2(y, x)
    gap = (_GAP_HALF_ANGLE - np.abs(_wrap_angle(ang - math.pi / 2.0))) * 0.46
    return np.minimum(ring, -gap)


def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


_ASYMMETRIC_GLYPHS = (
    _glyph_tee,
    _glyph_ell,
    _glyph_arrow,
    _glyph_flag,
    _glyph_dome,
    _glyph_wedge,
    _glyph_dumbbell,
    _glyph_comb,
)

MAX_CLASSES = len(_ASYMMETRIC_GLYPHS) + 1


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _render_glyph(shape_fn, side: int, dx: float, dy: float, scale: float) -> np.ndarray:
    step = 2.0 / side
    coords = (np.arange(side) + 0.5) * step - 1.0
    x = coords[None, :]
    y = -coords[:, None]
    d = shape_fn((x - dx) / scale, (y - dy) / scale) * scale
    edge = 1.5 * step
    return _smoothstep(d / (2.0 * edge) + 0.5)


def generate_glyphs(seed: int, n: int, num_classes: int, side: int) -> Dataset:
    """Render ``n`` upright glyph samples over ``num_classes`` shape classes.

    Classes 0..K-2 are mutually distinct asymmetric shapes; class K-1 is the
    gapped ring.  Labels follow a round-robin assignment so class counts are
    balanced within one sample.  Fully deterministic for a fixed seed.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if num_classes > MAX_CLASSES:
        raise ValueError(
            f"glyph menu supports at most {MAX_CLASSES} classes, got {num_classes}"
        )
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")

    shape_fns = list(_ASYMMETRIC_GLYPHS[: num_classes - 1]) + [_glyph_ring]
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = i % num_classes
        dx, dy = rng.uniform(-0.08, 0.08, size=2)
        scale = rng.uniform(0.8, 1.0)
        amp = rng.uniform(0.7, 1.0)
        img = amp * _render_glyph(shape_fns[label], side, dx, dy, scale)
        img += rng.normal(0.0, 0.06, size=(side, side))
        np.clip(img, 0.0, 1.0, out=img)
        samples.append(LabeledSample(GridImage(img.astype(np.float32)), label))
    return Dataset(samples, "predictor-train", num_classes)


# ---------------------------------------------------------------------------
# shift specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftSpec:
    """Declarative description of a (partition-conditional) group shift."""

    variant: str
    dirac_poses: Mapping[int, int] | None = None
    normal_params: Mapping[int, tuple[float, float]] | None = None
    mixture_centers: tuple[float, ...] | None = None
    kappa: float | None = None

    VARIANTS = ("none", "dirac", "discrete-normal", "var-gauss", "von-mises-mixture")

    def __post_init__(self) -> None:
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown shift variant {self.variant!r}")
        if self.variant == "von-mises-mixture":
            if not self.mixture_centers:
                raise ValueError("von Mises mixture needs at least one center")
            if self.kappa is None or self.kappa <= 0:
                raise ValueError(f"concentration must be > 0, got {self.kappa}")

    @staticmethod
    def none() -> "ShiftSpec":
        return ShiftSpec("none")

    @staticmethod
    def dirac(poses: Mapping[int, int]) -> "ShiftSpec":
        return ShiftSpec("dirac", dirac_poses=dict(poses))

    @staticmethod
    def discrete_normal(params: Mapping[int, tuple[float, float]]) -> "ShiftSpec":
        return ShiftSpec("discrete-normal", normal_params=dict(params))

    @staticmethod
    def uniform(partitions: Sequence[int]) -> "ShiftSpec":
        """Uniform shift over the whole group, as a fully spread wrapped normal."""
        return ShiftSpec(
            "discrete-normal", normal_params={int(k): (0.0, 1e4) for k in partitions}
        )

    @staticmethod
    def var_gauss(partitions: Sequence[int], seed: int) -> "ShiftSpec":
        """Identity-centered wrapped normals with per-partition spread.

        Each partition's standard deviation is drawn (with the given seed)
        from the standard list ``VAR_GAUSS_SIGMAS``.
        """
        rng = np.random.default_rng(seed)
        params = {
            int(k): (0.0, float(rng.choice(VAR_GAUSS_SIGMAS))) for k in partitions
        }
        return ShiftSpec("var-gauss", normal_params=params)

    @staticmethod
    def von_mises_mixture(centers: Sequence[float], kappa: float) -> "ShiftSpec":
        return ShiftSpec(
            "von-mises-mixture",
            mixture_centers=tuple(float(c) for c in centers),
            kappa=float(kappa),
        )


def wrapped_normal_pmf(mu: float, sigma: float, order: int) -> np.ndarray:
    """Wrapped, index-discretized normal mass function over a cyclic group.

    Mass at index i is proportional to ``sum_m exp(-(i - mu + m*order)^2 /
    (2 sigma^2))``; evaluated in log space so near-degenerate spreads stay
    well defined.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    wraps = int(math.ceil(8.0 * sigma / order)) + 1
    m = np.arange(-wraps, wraps + 1)
    idx = np.arange(order)
    dev = idx[:, None] - mu + m[None, :] * order
    log_terms = -(dev**2) / (2.0 * sigma**2)
    peak = log_terms.max()
    mass = np.exp(log_terms - peak).sum(axis=1)
    return mass / mass.sum()


def _partition_pmfs(
    spec: ShiftSpec, group: CyclicGroup, partitions: np.ndarray
) -> dict[int, np.ndarray]:
    present = sorted(int(k) for k in np.unique(partitions))
    pmfs: dict[int, np.ndarray] = {}
    if spec.variant == "none":
        pmf = np.zeros(group.order)
        pmf[0] = 1.0
        return {k: pmf for k in present}
    if spec.variant == "dirac":
        for k in present:
            if spec.dirac_poses is None or k not in spec.dirac_poses:
                raise ConfigError(f"dirac shift missing pose for partition {k}")
            pose = int(spec.dirac_poses[k])
            if not 0 <= pose < group.order:
                raise ConfigError(
                    f"dirac pose {pose} out of range for group of order {group.order}"
                )
            pmf = np.zeros(group.order)
            pmf[pose] = 1.0
            pmfs[k] = pmf
        return pmfs
    if spec.variant in ("discrete-normal", "var-gauss"):
        for k in present:
            if spec.normal_params is None or k not in spec.normal_params:
                raise ConfigError(
                    f"{spec.variant} shift missing parameters for partition {k}"
                )
            mu, sigma = spec.normal_params[k]
            pmfs[k] = wrapped_normal_pmf(float(mu), float(sigma), group.order)
        return pmfs
    if spec.variant == "von-mises-mixture":
        if group.order != 360:
            raise ConfigError(
                "von Mises mixture shifts require the fine C360 discretization, "
                f"got order {group.order}"
            )
        pmf = mixture_grid_probs(
            np.asarray(spec.mixture_centers), float(spec.kappa), group
        )
        return {k: pmf for k in present}
    raise ConfigError(f"unknown shift variant {spec.variant!r}")


def apply_shift(
    dataset: Dataset, spec: ShiftSpec, group: CyclicGroup, seed: int
) -> Dataset:
    """Independently rotate each sample by a pose drawn from its partition's law.

    Returns a new dataset; ``true_pose`` on every sample records the applied
    element.  Deterministic for a fixed (dataset, spec, seed).
    """
    partitions = dataset.partitions()
    pmfs = _partition_pmfs(spec, group, partitions)
    rng = np.random.default_rng(seed)
    poses = np.empty(len(dataset), dtype=np.int64)
    for i, k in enumerate(partitions):
        poses[i] = rng.choice(group.order, p=pmfs[int(k)])

    images = dataset.images()
    rotated = np.empty_like(images)
    for pose in np.unique(poses):
        mask = poses == pose
        rotated[mask] = rotate_array(group.element(int(pose)), images[mask])

    samples = [
        LabeledSample(
            GridImage(rotated[i]),
            s.label,
            s.partition,
            group.element(int(poses[i])),
        )
        for i, s in enumerate(dataset.samples)
    ]
    return Dataset(samples, dataset.split, dataset.num_classes)


# ---------------------------------------------------------------------------
# binary dataset container
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset to its little-endian binary container."""
    parts = [
        struct.pack(
            "<4sHIII",
            _DATASET_MAGIC,
            _DATASET_VERSION,
            len(dataset),
            dataset.side,
            dataset.num_classes,
        )
    ]
    for s in dataset.samples:
        pose = _POSE_ABSENT if s.true_pose is None else s.true_pose.index
        parts.append(struct.pack("<III", s.label, s.partition, pose))
        parts.append(s.image.pixels.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"truncated file: needed {n} bytes at byte offset {self.offset}, "
                f"only {len(self.data) - self.offset} remain"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk


def load_dataset(path, split: str = "calibration", pose_order: int | None = None) -> Dataset:
    """Read a dataset container written by :func:`save_dataset`.

    The container does not record the group order of stored poses; pass
    ``pose_order`` to fix it, otherwise the smallest of 4 / 8 / 360 that
    fits all stored indices is used.
    """
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    magic = cur.take(4)
    if magic != _DATASET_MAGIC:
        raise FormatError(
            f"bad magic {magic!r} at byte offset 0, expected {_DATASET_MAGIC!r}"
        )
    (version,) = struct.unpack("<H", cur.take(2))
    if version != _DATASET_VERSION:
        raise FormatError(f"unsupported format version {version} at byte offset 4")
    count, side, num_classes = struct.unpack("<III", cur.take(12))
    if count == 0:
        raise FormatError("container holds zero samples (byte offset 6)")

    records = []
    max_pose = -1
    for _ in range(count):
        label, partition, pose = struct.unpack("<III", cur.take(12))
        pix = np.frombuffer(cur.take(4 * side * side), dtype="<f4").reshape(side, side)
        if pose != _POSE_ABSENT:
            max_pose = max(max_pose, pose)
        records.append((label, partition, pose, pix))

    if pose_order is None:
        pose_order = next((n for n in (4, 8, 360) if n > max_pose), max_pose + 1)
    samples = []
    for label, partition, pose, pix in records:
        true_pose = None if pose == _POSE_ABSENT else GroupElement(pose, pose_order)
        samples.append(LabeledSample(GridImage(pix), label, partition, true_pose))
    return Dataset(samples, split, num_classes)
