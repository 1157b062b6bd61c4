"""Hand-rolled reference implementations used as test oracles.

Everything here trades speed for obviousness: plain Python loops,
``heapq``, and exhaustive search, so the production kernels can be
checked against an independent rendering of the same definitions.
"""

import heapq
import itertools

import numpy as np

FOUR_NEIGHBORS = ((-1, 0), (0, -1), (0, 1), (1, 0))


def reference_watershed(energy, markers, mask):
    """Priority flood with an explicit heapq.

    Pixels are claimed when pushed; the frontier pops by descending
    energy with FIFO tie-breaking via an insertion counter.  Seeds enter
    in raster order, neighbors in up/left/right/down order.
    """
    h, w = energy.shape
    labels = np.zeros((h, w), dtype=np.int32)
    heap = []
    counter = 0
    for r in range(h):
        for c in range(w):
            if markers[r, c] > 0:
                labels[r, c] = markers[r, c]
                heapq.heappush(heap, (-float(energy[r, c]), counter, r, c))
                counter += 1
    while heap:
        _, _, r, c = heapq.heappop(heap)
        lab = labels[r, c]
        for dr, dc in FOUR_NEIGHBORS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and labels[rr, cc] == 0:
                labels[rr, cc] = lab
                heapq.heappush(heap, (-float(energy[rr, cc]), counter, rr, cc))
                counter += 1
    return labels


def pixel_iou_table(gt, pred):
    """IoU of every overlapping label pair, by direct pixel counting."""
    table = {}
    for g in np.unique(gt[gt > 0]):
        gm = gt == g
        for p in np.unique(pred[pred > 0]):
            pm = pred == p
            inter = int(np.logical_and(gm, pm).sum())
            if inter:
                union = int(np.logical_or(gm, pm).sum())
                table[(int(g), int(p))] = inter / union
    return table


def brute_force_match(iou):
    """Exhaustive maximum matching over pairs with IoU > 0.5.

    Tries every injective gt->pred assignment and keeps the one with the
    most pairs (total IoU as tie-break).  Tractable for <=5 per side.
    """
    gts = sorted({g for g, _ in iou})
    preds = sorted({p for _, p in iou})
    best_pairs: list[tuple[int, int, float]] = []
    best_key = (0, 0.0)
    top = min(len(gts), len(preds))
    for k in range(top + 1):
        for gsub in itertools.combinations(gts, k):
            for psub in itertools.permutations(preds, k):
                pairs = []
                for g, p in zip(gsub, psub):
                    v = iou.get((g, p), 0.0)
                    if v <= 0.5:
                        break
                    pairs.append((g, p, v))
                else:
                    key = (k, sum(v for _, _, v in pairs))
                    if key > best_key:
                        best_key = key
                        best_pairs = pairs
    return best_pairs


def brute_force_pq(gt, pred):
    """(dq, sq, pq) straight from the definitions via the exhaustive matcher."""
    n_gt = len(np.unique(gt[gt > 0]))
    n_pred = len(np.unique(pred[pred > 0]))
    if n_gt == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    pairs = brute_force_match(pixel_iou_table(gt, pred))
    tp = len(pairs)
    fp = n_pred - tp
    fn = n_gt - tp
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = sum(v for _, _, v in pairs) / tp if tp else 0.0
    return dq, sq, dq * sq


def boundary_pixels(mask):
    """Foreground pixels with a background 4-neighbor; image edge counts."""
    h, w = mask.shape
    out = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in FOUR_NEIGHBORS:
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out.add((r, c))
                    break
    return out


def random_label_map(rng, shape=(16, 16), max_instances=5):
    """Up to ``max_instances`` random rectangles, relabeled 1..K.

    Later rectangles overwrite earlier ones, so overlaps produce ragged
    shapes; labels are compacted afterwards.
    """
    h, w = shape
    out = np.zeros(shape, dtype=np.int32)
    n = int(rng.integers(0, max_instances + 1))
    for k in range(1, n + 1):
        r0 = int(rng.integers(0, h - 1))
        c0 = int(rng.integers(0, w - 1))
        r1 = int(rng.integers(r0 + 1, min(h, r0 + 8) + 1))
        c1 = int(rng.integers(c0 + 1, min(w, c0 + 8) + 1))
        out[r0:r1, c0:c1] = k
    kept = np.unique(out[out > 0])
    relabel = np.zeros(out.max() + 1, dtype=np.int32)
    for i, k in enumerate(kept, start=1):
        relabel[k] = i
    return relabel[out]


def finite_difference_grad(f, x, h=1e-4):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x`` in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-4):
    """Worst-case |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
