"""Panoptic quality, detection/classification F-scores, and aggregation.

Instances match when their IoU exceeds 0.5, which makes the matching
unique (two distinct instances cannot both overlap the same counterpart
by more than half).  Tile scores aggregate into dataset means with the
convention that a class absent from both ground truth and prediction in
a tile is excluded from that tile's averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import LabelOutOfRange, MissingClass, ShapeMismatch, UnknownClass, UnmappedClass

# Common 4-class scheme shared by both datasets after remapping.  The ids
# start above the largest native id (the 7-class set uses 1..7) so native
# and common labels can never be confused, and every remapping table maps
# common ids to themselves, which makes remapping idempotent.
NEOPLASTIC = 8
INFLAMMATORY = 9
EPITHELIAL = 10
MISCELLANEOUS = 11

COMMON_CLASS_NAMES = {
    NEOPLASTIC: "neoplastic",
    INFLAMMATORY: "inflammatory",
    EPITHELIAL: "epithelial",
    MISCELLANEOUS: "miscellaneous",
}

_COMMON_IDENTITY = {c: c for c in COMMON_CLASS_NAMES}


@dataclass(frozen=True)
class ClassMapping:
    """Source-class to common-class table for one dataset.

    ``table`` is None for the identity mapping, which accepts any class id
    unchanged.
    """

    dataset: str
    table: dict[int, int] | None


_MAPPINGS = {
    "none": ClassMapping("none", None),
    # channels/classes: 1 neoplastic, 2 inflammatory, 3 connective,
    # 4 dead, 5 epithelial
    "pannuke": ClassMapping(
        "pannuke",
        {1: NEOPLASTIC, 2: INFLAMMATORY, 3: MISCELLANEOUS, 4: MISCELLANEOUS,
         5: EPITHELIAL, **_COMMON_IDENTITY},
    ),
    # classes: 1 other, 2 inflammatory, 3 healthy epithelium,
    # 4 dysplastic/malignant epithelium, 5 fibroblast, 6 muscle,
    # 7 endothelial
    "consep": ClassMapping(
        "consep",
        {1: MISCELLANEOUS, 2: INFLAMMATORY, 3: EPITHELIAL, 4: NEOPLASTIC,
         5: MISCELLANEOUS, 6: MISCELLANEOUS, 7: MISCELLANEOUS,
         **_COMMON_IDENTITY},
    ),
}


def class_mapping(name: str) -> ClassMapping:
    """Builtin mapping by dataset name: 'pannuke', 'consep' or 'none'."""
    try:
        return _MAPPINGS[name]
    except KeyError:
        raise UnmappedClass(f"no builtin class mapping named {name!r}") from None


def remap_classes(classes: dict[int, int], mapping: ClassMapping) -> dict[int, int]:
    """Rewrite per-instance class ids into the 4-class common scheme.

    Idempotent: common ids map to themselves in every builtin table.

    Raises:
        UnmappedClass: a class id has no row in the table.
    """
    if mapping.table is None:
        return dict(classes)
    out = {}
    for label, src in classes.items():
        try:
            out[label] = mapping.table[int(src)]
        except KeyError:
            raise UnmappedClass(
                f"class {src} (instance {label}) not in mapping {mapping.dataset!r}"
            ) from None
    return out


# ---------------------------------------------------------------------------
# instance matching and panoptic quality


@dataclass
class MatchSet:
    """IoU > 0.5 matching: matched pairs plus leftover labels per side."""

    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]


@dataclass(frozen=True)
class PanopticScores:
    dq: float
    sq: float
    pq: float

    def __post_init__(self):
        if abs(self.pq - self.dq * self.sq) > 1e-12:
            raise ValueError("pq must equal dq * sq")


def _labels_of(arr: np.ndarray) -> np.ndarray:
    labels = np.unique(arr)
    return labels[labels > 0]


def iou_matrix(gt: np.ndarray, pred: np.ndarray) -> dict[tuple[int, int], float]:
    """IoU for every overlapping (gt label, pred label) pair."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"gt {gt.shape} vs pred {pred.shape}")
    gt = gt.astype(np.int64, copy=False)
    pred = pred.astype(np.int64, copy=False)
    if gt.size and (gt.min() < 0 or pred.min() < 0):
        raise LabelOutOfRange("instance labels must be non-negative")

    both = (gt > 0) & (pred > 0)
    if not both.any():
        return {}
    g = gt[both]
    p = pred[both]
    stride = pred.max() + 1
    keys, counts = np.unique(g * stride + p, return_counts=True)
    area_gt = np.bincount(gt.ravel())
    area_pred = np.bincount(pred.ravel())

    table: dict[tuple[int, int], float] = {}
    for key, inter in zip(keys, counts):
        gl = int(key // stride)
        pl = int(key % stride)
        union = area_gt[gl] + area_pred[pl] - inter
        table[(gl, pl)] = float(inter / union)
    return table


def match_instances(
    iou: dict[tuple[int, int], float],
    gt_labels=None,
    pred_labels=None,
) -> MatchSet:
    """All pairs with IoU > 0.5; everything else is unmatched.

    The >0.5 threshold makes pairs unique per label, so no assignment
    search is needed.  ``gt_labels``/``pred_labels`` optionally supply the
    full label sets so instances that overlap nothing still appear in the
    unmatched lists.
    """
    pairs = sorted(
        (gl, pl, v) for (gl, pl), v in iou.items() if v > 0.5
    )
    matched_gt = {gl for gl, _, _ in pairs}
    matched_pred = {pl for _, pl, _ in pairs}
    all_gt = {gl for gl, _ in iou} if gt_labels is None else {int(l) for l in gt_labels}
    all_pred = {pl for _, pl in iou} if pred_labels is None else {int(l) for l in pred_labels}
    return MatchSet(
        pairs=pairs,
        unmatched_gt=sorted(all_gt - matched_gt),
        unmatched_pred=sorted(all_pred - matched_pred),
    )


def panoptic_quality(gt: np.ndarray, pred: np.ndarray) -> PanopticScores:
    """Binary panoptic quality of two instance maps.

    dq = |TP| / (|TP| + 0.5 |FP| + 0.5 |FN|), sq = mean IoU over matched
    pairs, pq = dq * sq.  Two empty maps score 1 (nothing to get wrong);
    exactly one empty map scores 0.
    """
    gt_labels = _labels_of(np.asarray(gt))
    pred_labels = _labels_of(np.asarray(pred))
    if gt_labels.size == 0 and pred_labels.size == 0:
        if np.asarray(gt).shape != np.asarray(pred).shape:
            raise ShapeMismatch(f"gt {np.asarray(gt).shape} vs pred {np.asarray(pred).shape}")
        return PanopticScores(1.0, 1.0, 1.0)
    m = match_instances(iou_matrix(gt, pred), gt_labels, pred_labels)
    tp = len(m.pairs)
    fp = len(m.unmatched_pred)
    fn = len(m.unmatched_gt)
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(np.mean([v for _, _, v in m.pairs])) if tp else 0.0
    return PanopticScores(dq, sq, dq * sq)


def _class_lut(instances: np.ndarray, classes: dict[int, int]) -> np.ndarray:
    n = int(instances.max()) if instances.size else 0
    lut = np.zeros(n + 1, dtype=np.int64)
    for label in _labels_of(instances):
        label = int(label)
        if label not in classes:
            raise MissingClass(f"instance {label} has no class entry")
        lut[label] = int(classes[label])
    return lut


def multiclass_pq(
    gt: np.ndarray,
    gt_classes: dict[int, int],
    pred: np.ndarray,
    pred_classes: dict[int, int],
    class_ids=None,
) -> tuple[dict[int, PanopticScores], float]:
    """Per-class panoptic quality plus its mean over present classes.

    Each class restricts both maps to its own instances and scores them
    with :func:`panoptic_quality`.  Classes absent from both maps are
    excluded; ``class_ids`` limits evaluation to a fixed set (an int C
    means ids 1..C, the default is every class present).  A tile with no
    present class averages to 1.0, matching the empty-tile convention.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeMismatch(f"gt {gt.shape} vs pred {pred.shape}")
    gt_lut = _class_lut(gt, gt_classes)
    pred_lut = _class_lut(pred, pred_classes)
    present = set(gt_lut[gt_lut > 0]) | set(pred_lut[pred_lut > 0])
    if class_ids is None:
        wanted = sorted(present)
    elif isinstance(class_ids, int):
        wanted = list(range(1, class_ids + 1))
    else:
        wanted = sorted(int(c) for c in class_ids)

    per_class: dict[int, PanopticScores] = {}
    for c in wanted:
        if c not in present:
            continue  # absent from both: excluded from the average
        gt_c = np.where(gt_lut[gt] == c, gt, 0)
        pred_c = np.where(pred_lut[pred] == c, pred, 0)
        per_class[int(c)] = panoptic_quality(gt_c, pred_c)
    mpq = float(np.mean([s.pq for s in per_class.values()])) if per_class else 1.0
    return per_class, mpq


# ---------------------------------------------------------------------------
# detection and classification F-scores


@dataclass(frozen=True)
class FScoreCoefficients:
    """Weights of the four error kinds in the classification F-score."""

    a0: float = 2.0
    a1: float = 2.0
    a2: float = 1.0
    a3: float = 1.0

    def __post_init__(self):
        vals = (self.a0, self.a1, self.a2, self.a3)
        if any(v < 0 for v in vals):
            raise ValueError("coefficients must be non-negative")
        if all(v == 0 for v in vals):
            raise ValueError("coefficients must not all be zero")


def detection_f1(
    gt_centroids, pred_centroids, radius: float = 12.0
) -> tuple[float, list[tuple[int, int]]]:
    """Greedy centroid matching within ``radius`` pixels, plus its F1.

    Candidate pairs are taken in ascending distance order (ties by gt
    then pred index) and each centroid is used at most once.  Two empty
    sets score 1.0.

    Returns:
        (f1, list of (gt index, pred index) matches).
    """
    gt = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(pred_centroids, dtype=np.float64).reshape(-1, 2)
    if not (np.isfinite(gt).all() and np.isfinite(pred).all()):
        raise ValueError("centroids must be finite")
    if gt.shape[0] == 0 and pred.shape[0] == 0:
        return 1.0, []
    if gt.shape[0] == 0 or pred.shape[0] == 0:
        return 0.0, []

    diff = gt[:, None, :] - pred[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    gi, pi = np.nonzero(dist <= radius)
    order = np.lexsort((pi, gi, dist[gi, pi]))
    used_gt = np.zeros(gt.shape[0], dtype=bool)
    used_pred = np.zeros(pred.shape[0], dtype=bool)
    pairs: list[tuple[int, int]] = []
    for k in order:
        g, p = int(gi[k]), int(pi[k])
        if used_gt[g] or used_pred[p]:
            continue
        used_gt[g] = True
        used_pred[p] = True
        pairs.append((g, p))
    tp = len(pairs)
    fp = pred.shape[0] - tp
    fn = gt.shape[0] - tp
    return 2.0 * tp / (2.0 * tp + fp + fn), pairs


def classification_f1(
    matched_classes,
    unmatched_gt_classes,
    unmatched_pred_classes,
    class_id: int,
    coeff: FScoreCoefficients | None = None,
) -> float:
    """Per-class F-score over detection-matched instances.

    ``matched_classes`` is an iterable of (gt class, pred class) for the
    detection-level pairs; the unmatched arguments list the classes of
    undetected ground truth and spurious predictions.  The score is

        2 TP_c / (2 TP_c + a0 FP_c + a1 FN_c + a2 FP_d + a3 FN_d)

    where FP_c/FN_c count misclassified pairs into/out of class c and
    FP_d/FN_d count detection failures of class c.  A zero denominator
    (class appears nowhere) scores 1.0.
    """
    coeff = coeff or FScoreCoefficients()
    c = int(class_id)
    if c < 1:
        raise UnknownClass(f"class ids are positive, got {class_id}")
    tp_c = fp_c = fn_c = 0
    for g, p in matched_classes:
        if g == c and p == c:
            tp_c += 1
        elif g != c and p == c:
            fp_c += 1
        elif g == c and p != c:
            fn_c += 1
    fp_d = sum(1 for p in unmatched_pred_classes if p == c)
    fn_d = sum(1 for g in unmatched_gt_classes if g == c)
    den = 2.0 * tp_c + coeff.a0 * fp_c + coeff.a1 * fn_c + coeff.a2 * fp_d + coeff.a3 * fn_d
    if den == 0.0:
        return 1.0
    return 2.0 * tp_c / den


# ---------------------------------------------------------------------------
# dataset evaluation


def instance_centroids(instances: np.ndarray) -> dict[int, tuple[float, float]]:
    """Mean pixel coordinate of every instance, keyed by label."""
    instances = np.asarray(instances)
    labels = _labels_of(instances)
    if labels.size == 0:
        return {}
    coords = ndimage.center_of_mass(
        np.ones_like(instances, dtype=np.float64), instances, labels
    )
    return {int(l): (float(r), float(c)) for l, (r, c) in zip(labels, coords)}


@dataclass
class TilePair:
    """Ground truth and prediction for one named tile."""

    name: str
    gt: np.ndarray
    pred: np.ndarray
    gt_classes: dict[int, int] | None = None
    pred_classes: dict[int, int] | None = None


def _tile_report(tile: TilePair, coeff: FScoreCoefficients, radius: float) -> dict:
    gt_classes = tile.gt_classes
    pred_classes = tile.pred_classes
    if gt_classes is None:
        gt_classes = {int(l): 1 for l in _labels_of(np.asarray(tile.gt))}
    if pred_classes is None:
        pred_classes = {int(l): 1 for l in _labels_of(np.asarray(tile.pred))}

    pq_b = panoptic_quality(tile.gt, tile.pred).pq
    per_class, pq_m = multiclass_pq(tile.gt, gt_classes, tile.pred, pred_classes)

    gt_cent = instance_centroids(tile.gt)
    pred_cent = instance_centroids(tile.pred)
    gt_labels = sorted(gt_cent)
    pred_labels = sorted(pred_cent)
    f_d, idx_pairs = detection_f1(
        [gt_cent[l] for l in gt_labels], [pred_cent[l] for l in pred_labels], radius
    )
    matched = [(gt_classes[gt_labels[g]], pred_classes[pred_labels[p]])
               for g, p in idx_pairs]
    matched_gt = {gt_labels[g] for g, _ in idx_pairs}
    matched_pred = {pred_labels[p] for _, p in idx_pairs}
    un_gt = [gt_classes[l] for l in gt_labels if l not in matched_gt]
    un_pred = [pred_classes[l] for l in pred_labels if l not in matched_pred]

    present = sorted(set(gt_classes.values()) | set(pred_classes.values()))
    per_class_f = {
        str(c): classification_f1(matched, un_gt, un_pred, c, coeff) for c in present
    }
    return {
        "name": tile.name,
        "pq_b": pq_b,
        "pq_m": pq_m,
        "per_class_pq": {str(c): s.pq for c, s in per_class.items()},
        "f_d": f_d,
        "per_class_f": per_class_f,
    }


def evaluate_dataset(
    tiles,
    coeff: FScoreCoefficients | None = None,
    radius: float = 12.0,
) -> dict:
    """Score a list of :class:`TilePair` and aggregate into a report.

    The report is ``{"tiles": [...], "mean": {...}}``; per-class means
    average only over tiles where the class occurs in ground truth or
    prediction.  Tiles are ordered by name, so the report is
    deterministic for a given input set.
    """
    coeff = coeff or FScoreCoefficients()
    rows = [_tile_report(t, coeff, radius) for t in
            sorted(tiles, key=lambda t: t.name)]

    mean: dict = {}
    for key in ("pq_b", "pq_m", "f_d"):
        mean[key] = float(np.mean([r[key] for r in rows])) if rows else 0.0
    for key in ("per_class_pq", "per_class_f"):
        acc: dict[str, list[float]] = {}
        for r in rows:
            for c, v in r[key].items():
                acc.setdefault(c, []).append(v)
        mean[key] = {c: float(np.mean(vs)) for c, vs in sorted(acc.items())}
    return {"tiles": rows, "mean": mean}
