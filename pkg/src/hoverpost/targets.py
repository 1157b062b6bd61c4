"""Ground-truth training targets derived from instance maps.

An instance map is an H x W integer array whose positive values label
nuclei 1..K consecutively; 0 is background.  From it we derive the three
supervision targets used by the loss module: a binary foreground map,
per-instance signed offset maps, and a per-pixel class map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AllZeroCounts, LabelOutOfRange, MissingClass, ShapeMismatch


def validate_instance_map(instances: np.ndarray) -> int:
    """Check labels are exactly {1..K} with no gaps; return K."""
    instances = np.asarray(instances)
    if instances.ndim != 2:
        raise ShapeMismatch(f"instance map must be 2-D, got shape {instances.shape}")
    if instances.dtype.kind not in "iu":
        raise ShapeMismatch(f"instance map must be integer, got {instances.dtype}")
    labels = np.unique(instances)
    labels = labels[labels != 0]
    if labels.size and (labels[0] < 1 or not np.array_equal(
            labels, np.arange(1, labels.size + 1))):
        raise LabelOutOfRange(
            f"instance labels must be consecutive 1..K, got {labels[:8]}..."
        )
    return int(labels.size)


def gen_np_target(instances: np.ndarray) -> np.ndarray:
    """Binary foreground map: 1 on any nucleus pixel, 0 on background."""
    validate_instance_map(instances)
    return (np.asarray(instances) > 0).astype(np.uint8)


def gen_hv_targets(instances: np.ndarray) -> np.ndarray:
    """Signed horizontal/vertical offsets from each instance's centroid.

    For every instance, pixel offsets from the centroid (mean coordinate)
    are rescaled per axis so the values span exactly [-1, 1]: positive
    offsets are divided by the largest positive offset, negative ones by
    the magnitude of the most negative.  An instance one pixel wide along
    an axis gets 0 on that axis.  Background stays 0.

    Returns:
        H x W x 2 f32 array; channel 0 is horizontal (column) offsets,
        channel 1 vertical (row) offsets.
    """
    instances = np.asarray(instances)
    n = validate_instance_map(instances)
    hv = np.zeros(instances.shape + (2,), dtype=np.float32)
    if n == 0:
        return hv

    objects = ndimage.find_objects(instances)
    for label, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        local = instances[sl] == label
        rr, cc = np.nonzero(local)
        dr = rr - rr.mean()
        dc = cc - cc.mean()
        for channel, d in ((0, dc), (1, dr)):
            d = d.astype(np.float64)
            pos = d.max()
            neg = d.min()
            if pos > 0:
                d[d > 0] /= pos
            if neg < 0:
                d[d < 0] /= -neg
            hv[sl[0].start + rr, sl[1].start + cc, channel] = d
    return hv


def gen_tp_target(instances: np.ndarray, classes: dict[int, int]) -> np.ndarray:
    """Per-pixel class map: each instance painted with its class id.

    Class ids must be >= 1; 0 is reserved for background.  Every label in
    the map needs an entry in ``classes``.
    """
    instances = np.asarray(instances)
    n = validate_instance_map(instances)
    lut = np.zeros(n + 1, dtype=np.int32)
    for label in range(1, n + 1):
        if label not in classes:
            raise MissingClass(f"instance {label} has no class entry")
        class_id = int(classes[label])
        if class_id < 1:
            raise LabelOutOfRange(f"class id {class_id} for instance {label}")
        lut[label] = class_id
    return lut[instances]


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, positive and summing to the class count."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size == 0:
            raise ShapeMismatch("weights must be a non-empty vector")
        if np.any(w <= 0):
            raise ValueError("class weights must be positive")
        if abs(w.sum() - w.size) > 1e-6 * w.size:
            raise ValueError(
                f"class weights must sum to {w.size}, got {w.sum():.8f}"
            )


def compute_class_weights(counts, num_classes: int) -> ClassWeights:
    """Inverse-sqrt-frequency class weights, normalised to sum ``num_classes``.

    ``counts[k]`` is the number of nuclei of class k across the dataset.
    Each weight is proportional to sqrt(N / max(counts[k], 1)) where N is
    the total count, so rare classes weigh more; the max() keeps classes
    with zero examples finite.

    Raises:
        AllZeroCounts: every count is zero.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size != num_classes:
        raise ShapeMismatch(
            f"expected {num_classes} counts, got shape {counts.shape}"
        )
    if np.any(counts < 0):
        raise LabelOutOfRange("counts must be non-negative")
    total = counts.sum()
    if total == 0:
        raise AllZeroCounts("no nuclei in any class")
    omega = np.sqrt(total / np.maximum(counts, 1).astype(np.float64))
    return ClassWeights(omega / omega.sum() * num_classes)


@dataclass
class TargetMaps:
    """The three supervision targets for one tile."""

    np_target: np.ndarray  # H x W u8
    hv_target: np.ndarray  # H x W x 2 f32
    tp_target: np.ndarray | None = None  # H x W i32, 0 background

    def __post_init__(self):
        if self.np_target.shape != self.hv_target.shape[:2] or self.hv_target.shape[2:] != (2,):
            raise ShapeMismatch(
                f"np {self.np_target.shape} vs hv {self.hv_target.shape}"
            )
        if self.tp_target is not None and self.tp_target.shape != self.np_target.shape:
            raise ShapeMismatch(
                f"tp {self.tp_target.shape} vs np {self.np_target.shape}"
            )


def make_target_maps(
    instances: np.ndarray, classes: dict[int, int] | None = None
) -> TargetMaps:
    """Assemble all targets for one instance map in a single pass."""
    return TargetMaps(
        np_target=gen_np_target(instances),
        hv_target=gen_hv_targets(instances),
        tp_target=None if classes is None else gen_tp_target(instances, classes),
    )
