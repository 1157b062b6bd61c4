"""Instance segmentation from probability and offset maps.

The pipeline thresholds the foreground probabilities, derives an energy
landscape from the spatial derivatives of the offset maps, labels
high-energy plateaus as markers and grows them with a marker-controlled
watershed.  Every step is deterministic: the flood order is fixed by
(energy, insertion counter) and ties never depend on hash order or
threading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import MarkerOutsideMask, MissingClass, ShapeMismatch


@dataclass
class PostprocConfig:
    """Thresholds and sizes for map-to-instance decoding."""

    np_threshold: float = 0.5
    energy_threshold: float = 0.4
    min_instance_size: int = 10
    sobel_radius: int = 1

    def __post_init__(self):
        if not 0.0 < self.np_threshold < 1.0:
            raise ValueError(f"np_threshold must lie in (0, 1), got {self.np_threshold}")
        if not 0.0 < self.energy_threshold < 1.0:
            raise ValueError(
                f"energy_threshold must lie in (0, 1), got {self.energy_threshold}"
            )
        if int(self.min_instance_size) < 0:
            raise ValueError(f"min_instance_size must be >= 0, got {self.min_instance_size}")
        self.min_instance_size = int(self.min_instance_size)
        if int(self.sobel_radius) < 1:
            raise ValueError(f"sobel_radius must be >= 1, got {self.sobel_radius}")
        self.sobel_radius = int(self.sobel_radius)


@dataclass
class NucleusRecord:
    """One segmented nucleus, ready for JSON serialisation."""

    id: int
    class_id: int
    class_prob: float
    centroid: tuple[float, float]  # (row, col)
    bbox: tuple[int, int, int, int]  # rmin, cmin, rmax, cmax inclusive
    contour: list[tuple[int, int]]


_CROSS = ndimage.generate_binary_structure(2, 1)  # 4-connectivity


def _sobel_kernels(radius: int) -> tuple[np.ndarray, np.ndarray]:
    # Binomial construction: radius 1 gives the classic 3x3 pair.
    smooth = np.array([1.0, 2.0, 1.0])
    deriv = np.array([-1.0, 0.0, 1.0])
    for _ in range(radius - 1):
        smooth = np.convolve(smooth, [1.0, 2.0, 1.0])
        deriv = np.convolve(deriv, [1.0, 2.0, 1.0])
    kh = np.outer(smooth, deriv)  # derivative along columns
    kv = np.outer(deriv, smooth)  # derivative along rows
    return kh, kv


def sobel_energy(hv: np.ndarray, mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Energy landscape from the offset maps: high inside nuclei, ~0 at rims.

    Each channel is filtered with the matching Sobel derivative kernel
    (horizontal offsets along columns, vertical along rows; edges handled
    by replication).  Offsets ramp upward inside an instance, so the signed
    response is most positive deep inside and plunges negative at instance
    boundaries and contacts; min-max normalising it over the mask and
    inverting gives a per-channel boundary score that is 0 inside and 1 at
    the sharpest rim.  The energy is ``1 - max(score_h, score_v)`` inside
    the mask, 0 outside.  A channel whose response is constant over the
    mask scores 0 everywhere and therefore pulls no energy down.
    """
    hv = np.asarray(hv, dtype=np.float64)
    mask = np.asarray(mask)
    if hv.ndim != 3 or hv.shape[2] != 2:
        raise ShapeMismatch(f"hv must be H x W x 2, got {hv.shape}")
    if mask.shape != hv.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} vs hv {hv.shape[:2]}")
    m = mask > 0
    energy = np.zeros(m.shape, dtype=np.float32)
    if not m.any():
        return energy

    kh, kv = _sobel_kernels(radius)
    worst = np.zeros(m.shape, dtype=np.float64)
    for channel, kernel in ((0, kh), (1, kv)):
        resp = ndimage.correlate(hv[:, :, channel], kernel, mode="nearest")
        lo = resp[m].min()
        hi = resp[m].max()
        if hi > lo:
            np.maximum(worst, 1.0 - (resp - lo) / (hi - lo), out=worst)
    energy[m] = (1.0 - worst[m]).astype(np.float32)
    np.clip(energy, 0.0, 1.0, out=energy)
    return energy


@njit(cache=True, nogil=True)
def _heap_less(he, hc, i, j):
    # Max-heap on energy; FIFO (smaller counter first) on exact ties.
    if he[i] > he[j]:
        return True
    if he[i] < he[j]:
        return False
    return hc[i] < hc[j]


@njit(cache=True, nogil=True)
def _heap_push(he, hc, hp, n, e, cnt, pos):
    he[n] = e
    hc[n] = cnt
    hp[n] = pos
    i = n
    while i > 0:
        parent = (i - 1) // 2
        if _heap_less(he, hc, i, parent):
            he[i], he[parent] = he[parent], he[i]
            hc[i], hc[parent] = hc[parent], hc[i]
            hp[i], hp[parent] = hp[parent], hp[i]
            i = parent
        else:
            break
    return n + 1


@njit(cache=True, nogil=True)
def _heap_pop(he, hc, hp, n):
    pos = hp[0]
    n -= 1
    he[0] = he[n]
    hc[0] = hc[n]
    hp[0] = hp[n]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < n and _heap_less(he, hc, left, best):
            best = left
        if right < n and _heap_less(he, hc, right, best):
            best = right
        if best == i:
            break
        he[i], he[best] = he[best], he[i]
        hc[i], hc[best] = hc[best], hc[i]
        hp[i], hp[best] = hp[best], hp[i]
        i = best
    return pos, n


@njit(cache=True, nogil=True)
def _priority_flood(energy, mask, labels):
    h, w = energy.shape
    cap = h * w + 1
    he = np.empty(cap, dtype=np.float64)
    hc = np.empty(cap, dtype=np.int64)
    hp = np.empty(cap, dtype=np.int64)
    n = 0
    counter = 0

    # Seed with every marker pixel, visited in raster order so equal
    # energies pop in a reproducible sequence.
    for r in range(h):
        for c in range(w):
            if labels[r, c] > 0:
                n = _heap_push(he, hc, hp, n, energy[r, c], counter, r * w + c)
                counter += 1

    dr = (-1, 0, 0, 1)
    dc = (0, -1, 1, 0)
    while n > 0:
        pos, n = _heap_pop(he, hc, hp, n)
        r = pos // w
        c = pos % w
        lab = labels[r, c]
        for k in range(4):
            nr = r + dr[k]
            nc = c + dc[k]
            if nr < 0 or nr >= h or nc < 0 or nc >= w:
                continue
            if mask[nr, nc] == 0 or labels[nr, nc] != 0:
                continue
            # Claim at push time: first popper adjacent to a free pixel
            # owns it, so each pixel enters the heap exactly once.
            labels[nr, nc] = lab
            n = _heap_push(he, hc, hp, n, energy[nr, nc], counter, nr * w + nc)
            counter += 1
    return labels


def watershed(energy: np.ndarray, markers: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grow ``markers`` over ``mask`` in order of descending ``energy``.

    Pixels leave a priority queue highest-energy first (FIFO among exact
    ties, in insertion order), and each popped pixel claims its free
    4-neighbours inside the mask.  Marker pixels are inserted first, in
    raster order.  The result is bit-reproducible across runs and thread
    counts.

    Raises:
        MarkerOutsideMask: some marker pixel is not covered by ``mask``.
        ShapeMismatch: array shapes disagree.
    """
    energy = np.ascontiguousarray(energy, dtype=np.float64)
    markers = np.asarray(markers)
    mask = np.asarray(mask)
    if markers.shape != energy.shape or mask.shape != energy.shape:
        raise ShapeMismatch(
            f"energy {energy.shape}, markers {markers.shape}, mask {mask.shape}"
        )
    m = (mask > 0).astype(np.uint8)
    if np.any((markers > 0) & (m == 0)):
        raise MarkerOutsideMask("marker pixels outside the foreground mask")
    labels = np.ascontiguousarray(markers, dtype=np.int32).copy()
    return _priority_flood(energy, m, labels)


def _drop_small(labels: np.ndarray, min_size: int) -> np.ndarray:
    if min_size <= 1 or labels.max() == 0:
        return labels
    sizes = np.bincount(labels.ravel())
    lut = np.arange(sizes.size, dtype=labels.dtype)
    lut[sizes < min_size] = 0
    lut[0] = 0
    return lut[labels]


def _renumber_by_appearance(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values > 0
    values = values[keep]
    first = first[keep]
    order = np.argsort(first, kind="stable")
    lut = np.zeros(int(values.max()) + 1 if values.size else 1, dtype=np.int32)
    lut[values[order]] = np.arange(1, values.size + 1, dtype=np.int32)
    return lut[labels]


def instance_segment(
    np_probs: np.ndarray, hv: np.ndarray, cfg: PostprocConfig | None = None
) -> np.ndarray:
    """Decode probability and offset maps into an instance label map.

    Steps, in order:
      1. foreground mask = ``np_probs > np_threshold``;
      2. drop 4-connected mask components smaller than ``min_instance_size``;
      3. energy = :func:`sobel_energy` of ``hv`` over the mask;
      4. markers = 4-connected components of ``energy > energy_threshold``,
         again dropping those smaller than ``min_instance_size``;
      5. flood the mask with :func:`watershed`;
      6. drop instances below ``min_instance_size`` and renumber 1..K in
         order of first appearance in raster order.

    Returns:
        H x W i32 instance map with labels 1..K.
    """
    cfg = cfg or PostprocConfig()
    np_probs = np.asarray(np_probs)
    if np_probs.ndim != 2:
        raise ShapeMismatch(f"np_probs must be H x W, got {np_probs.shape}")
    if hv.shape != np_probs.shape + (2,):
        raise ShapeMismatch(f"hv {hv.shape} vs probs {np_probs.shape}")

    mask = np_probs > cfg.np_threshold
    comps, _ = ndimage.label(mask, structure=_CROSS)
    comps = _drop_small(comps, cfg.min_instance_size)
    mask = comps > 0
    if not mask.any():
        return np.zeros(np_probs.shape, dtype=np.int32)

    energy = sobel_energy(hv, mask, cfg.sobel_radius)
    markers, _ = ndimage.label(energy > cfg.energy_threshold, structure=_CROSS)
    markers = _drop_small(markers, cfg.min_instance_size)
    if markers.max() == 0:
        return np.zeros(np_probs.shape, dtype=np.int32)

    labels = watershed(energy, markers, mask)
    labels = _drop_small(labels, cfg.min_instance_size)
    return _renumber_by_appearance(labels)


def classify_instances(
    instances: np.ndarray, tp_probs: np.ndarray
) -> tuple[dict[int, int], dict[int, float]]:
    """Majority-vote a class for every instance from per-pixel probabilities.

    ``tp_probs`` is H x W x C with channel 0 = background and rows summing
    to 1 (checked to 1e-4).  Each instance takes the most frequent argmax
    class over its pixels, ignoring background votes; ties go to the lower
    class id.  If every pixel votes background, the class with the highest
    summed probability (background excluded) wins.  The reported
    probability is the mean probability of the winning class over the
    instance's pixels.
    """
    instances = np.asarray(instances)
    tp_probs = np.asarray(tp_probs, dtype=np.float64)
    if tp_probs.ndim != 3 or tp_probs.shape[:2] != instances.shape:
        raise ShapeMismatch(
            f"tp_probs {tp_probs.shape} vs instances {instances.shape}"
        )
    row_sums = tp_probs.sum(axis=-1)
    if np.abs(row_sums - 1.0).max() > 1e-4:
        raise ValueError("tp_probs rows must sum to 1")

    votes = tp_probs.argmax(axis=-1)
    classes: dict[int, int] = {}
    probs: dict[int, float] = {}
    n = int(instances.max())
    objects = ndimage.find_objects(instances.astype(np.int64, copy=False), max_label=n)
    for label, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        local = instances[sl] == label
        v = votes[sl][local]
        fg = v[v > 0]
        if fg.size:
            class_id = int(np.bincount(fg).argmax())  # argmax takes the lower id on ties
        else:
            sums = tp_probs[sl][local].sum(axis=0)
            class_id = int(sums[1:].argmax()) + 1
        classes[label] = class_id
        probs[label] = float(tp_probs[sl][local][:, class_id].mean())
    return classes, probs


_MOORE = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _moore_contour(local: np.ndarray) -> list[tuple[int, int]]:
    """Clockwise boundary trace of a connected pixel set.

    Starts at the topmost-leftmost pixel and walks the 8-connected Moore
    neighbourhood; one-pixel-wide arms are visited out and back.  Returns
    each visited boundary pixel once per visit, without repeating the
    closing start pixel.
    """
    h, w = local.shape
    rows, cols = np.nonzero(local)
    start = (int(rows[0]), int(cols[0]))

    def fg(r: int, c: int) -> bool:
        return 0 <= r < h and 0 <= c < w and bool(local[r, c])

    contour = [start]
    cur = start
    back = (start[0], start[1] - 1)  # to the west: background by start choice
    first_move: tuple[tuple[int, int], tuple[int, int]] | None = None
    seen_states: set = set()
    while True:
        bdir = _MOORE.index((back[0] - cur[0], back[1] - cur[1]))
        nxt = None
        for k in range(1, 9):
            d = _MOORE[(bdir + k) % 8]
            cand = (cur[0] + d[0], cur[1] + d[1])
            if fg(*cand):
                nxt = cand
                break
            back = cand
        if nxt is None:
            return contour  # isolated pixel
        move = (cur, nxt)
        if first_move is None:
            first_move = move
        elif move == first_move or move in seen_states:
            break
        seen_states.add(move)
        contour.append(nxt)
        cur = nxt
    if len(contour) > 1 and contour[-1] == contour[0]:
        contour.pop()
    return contour


def extract_records(
    instances: np.ndarray,
    classes: dict[int, int],
    probs: dict[int, float] | None = None,
) -> list[NucleusRecord]:
    """Flatten an instance map into per-nucleus records.

    Each record carries the instance id, class id and probability, the
    centroid (mean pixel coordinate), the inclusive bounding box and the
    clockwise boundary contour.  A single-pixel instance yields a
    one-vertex contour.

    Raises:
        MissingClass: an instance label is absent from ``classes``.
    """
    instances = np.asarray(instances)
    n = int(instances.max()) if instances.size else 0
    records: list[NucleusRecord] = []
    objects = ndimage.find_objects(instances.astype(np.int64, copy=False), max_label=n)
    for label, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        if label not in classes:
            raise MissingClass(f"instance {label} has no class entry")
        local = instances[sl] == label
        rr, cc = np.nonzero(local)
        r0, c0 = sl[0].start, sl[1].start
        contour = [(r0 + r, c0 + c) for r, c in _moore_contour(local)]
        records.append(
            NucleusRecord(
                id=label,
                class_id=int(classes[label]),
                class_prob=float(probs[label]) if probs is not None else 1.0,
                centroid=(r0 + float(rr.mean()), c0 + float(cc.mean())),
                bbox=(r0 + int(rr.min()), c0 + int(cc.min()),
                      r0 + int(rr.max()), c0 + int(cc.max())),
                contour=contour,
            )
        )
    return records
