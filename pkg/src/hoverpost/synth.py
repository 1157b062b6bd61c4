"""Seeded synthetic fixtures: ellipse fields, teacher maps, loss inputs.

Everything here is deterministic given a :class:`numpy.random.Generator`,
so benchmarks, demos and tests can rebuild identical inputs from a seed
alone instead of shipping data files.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .losses import PredictionMaps
from .targets import TargetMaps, gen_hv_targets, gen_np_target, gen_tp_target, make_target_maps


def _ellipse_pixels(cy, cx, a, b, theta, shape):
    # Rasterise one rotated ellipse, clipped to the image.
    r_max = int(np.ceil(max(a, b))) + 1
    r0 = max(0, int(cy) - r_max)
    r1 = min(shape[0], int(cy) + r_max + 1)
    c0 = max(0, int(cx) - r_max)
    c1 = min(shape[1], int(cx) + r_max + 1)
    if r0 >= r1 or c0 >= c1:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    rr, cc = np.mgrid[r0:r1, c0:c1]
    dy = rr - cy
    dx = cc - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return rr[inside], cc[inside]


_DILATE = ndimage.generate_binary_structure(2, 2)  # 8-connected


def ellipse_field(
    height: int,
    width: int,
    n_instances: int,
    rng: np.random.Generator,
    radius_range: tuple[float, float] = (5.0, 10.0),
    num_classes: int = 1,
    min_sep: int = 2,
    max_tries: int = 200,
) -> tuple[np.ndarray, dict[int, int]]:
    """Scatter non-touching random ellipses over a tile.

    Instances keep at least ``min_sep`` background pixels between each
    other (checked by dilation), so every one is its own 4-connected
    component.  Fewer than ``n_instances`` may fit on a crowded tile.

    Returns:
        (H x W i32 instance map with labels 1..K, label -> class id table).
    """
    instances = np.zeros((height, width), dtype=np.int32)
    occupied = np.zeros((height, width), dtype=bool)
    classes: dict[int, int] = {}
    label = 0
    lo, hi = radius_range
    for _ in range(n_instances):
        for _ in range(max_tries):
            a = rng.uniform(lo, hi)
            b = rng.uniform(lo, hi)
            theta = rng.uniform(0.0, np.pi)
            cy = rng.uniform(lo, height - lo)
            cx = rng.uniform(lo, width - lo)
            rr, cc = _ellipse_pixels(cy, cx, a, b, theta, instances.shape)
            if rr.size < 4:
                continue
            cand = np.zeros_like(occupied)
            cand[rr, cc] = True
            grown = ndimage.binary_dilation(cand, _DILATE, iterations=min_sep)
            if (grown & occupied).any():
                continue
            label += 1
            instances[rr, cc] = label
            occupied |= cand
            classes[label] = int(rng.integers(1, num_classes + 1))
            break
    return instances, classes


def touching_pair_field(
    height: int,
    width: int,
    n_pairs: int,
    rng: np.random.Generator,
    radius_range: tuple[float, float] = (5.0, 9.0),
    min_sep: int = 3,
    num_classes: int = 1,
    max_tries: int = 300,
) -> tuple[np.ndarray, dict[int, int]]:
    """Scatter pairs of mutually touching ellipses, pairs well separated.

    Pair centres sit along a near-axis-aligned direction at the sum of the
    matching semi-axes plus a small negative gap, giving a shallow flat
    contact (first ellipse wins contested pixels).  A pair is accepted only
    when the two labels are 4-adjacent, which makes them a single foreground
    component that segmentation must split.
    """
    instances = np.zeros((height, width), dtype=np.int32)
    occupied = np.zeros((height, width), dtype=bool)
    classes: dict[int, int] = {}
    label = 0
    lo, hi = radius_range
    cross = ndimage.generate_binary_structure(2, 1)
    for _ in range(n_pairs):
        for _ in range(max_tries):
            a1, b1 = rng.uniform(lo, hi, size=2)
            a2, b2 = rng.uniform(lo, hi, size=2)
            horizontal = rng.integers(0, 2) == 0
            phi = (0.0 if horizontal else np.pi / 2) + rng.uniform(-0.2, 0.2)
            gap = rng.uniform(-1.5, -0.5)  # slight overlap keeps them abutting
            margin = 2 * hi + 2
            cy1 = rng.uniform(margin, height - margin)
            cx1 = rng.uniform(margin, width - margin)
            d = (a1 + a2 if horizontal else b1 + b2) + gap
            cy2 = cy1 + d * np.sin(phi)
            cx2 = cx1 + d * np.cos(phi)

            rr1, cc1 = _ellipse_pixels(cy1, cx1, a1, b1, 0.0, instances.shape)
            rr2, cc2 = _ellipse_pixels(cy2, cx2, a2, b2, 0.0, instances.shape)
            if rr1.size < 20 or rr2.size < 20:
                continue
            m1 = np.zeros_like(occupied)
            m1[rr1, cc1] = True
            m2 = np.zeros_like(occupied)
            m2[rr2, cc2] = True
            m2 &= ~m1  # first ellipse wins the contested pixels
            if m2.sum() < 20:
                continue
            pair = m1 | m2
            grown = ndimage.binary_dilation(pair, _DILATE, iterations=min_sep)
            if (grown & occupied).any():
                continue
            # touching means the two labels form one 4-connected component
            if not (ndimage.binary_dilation(m1, cross) & m2).any():
                continue
            comp, n_comp = ndimage.label(pair, structure=cross)
            if n_comp != 1:
                continue
            label += 1
            instances[m1] = label
            classes[label] = int(rng.integers(1, num_classes + 1))
            label += 1
            instances[m2] = label
            classes[label] = int(rng.integers(1, num_classes + 1))
            occupied |= pair
            break
    return instances, classes


def saturated_predictions(
    instances: np.ndarray,
    classes: dict[int, int],
    tp_channels: int,
    saturation: float = 8.0,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PredictionMaps:
    """Teacher-style outputs: saturated logits of the true targets.

    ``tp_channels`` counts the background channel, so class ids must stay
    below it.  ``noise`` adds seeded Gaussian jitter to every head.
    """
    np_t = gen_np_target(instances).astype(np.int64)
    tp_t = gen_tp_target(instances, classes).astype(np.int64)
    hv = gen_hv_targets(instances).astype(np.float64)

    s = float(saturation)
    np_logits = np.where(np.eye(2, dtype=bool)[np_t], s, -s)
    tp_logits = np.where(np.eye(tp_channels, dtype=bool)[tp_t], s, -s)
    if noise > 0.0:
        if rng is None:
            raise ValueError("noise requires an rng")
        np_logits = np_logits + rng.normal(0.0, noise, np_logits.shape)
        tp_logits = tp_logits + rng.normal(0.0, noise, tp_logits.shape)
        hv = hv + rng.normal(0.0, noise / (2.0 * s), hv.shape)
    return PredictionMaps(np_logits=np_logits, hv=hv, tp_logits=tp_logits)


def random_predictions(
    height: int,
    width: int,
    tp_channels: int,
    rng: np.random.Generator,
    scale: float = 2.0,
) -> PredictionMaps:
    """Unstructured random prediction maps (for gradient checking)."""
    return PredictionMaps(
        np_logits=rng.normal(0.0, scale, (height, width, 2)),
        hv=rng.normal(0.0, 1.0, (height, width, 2)),
        tp_logits=rng.normal(0.0, scale, (height, width, tp_channels)),
    )


def random_loss_fixture(
    height: int,
    width: int,
    tp_channels: int,
    rng: np.random.Generator,
) -> tuple[PredictionMaps, TargetMaps, PredictionMaps]:
    """A (student, targets, teacher) triple with a non-trivial foreground.

    The ground truth comes from a small ellipse field (guaranteed at
    least one instance, so the masked gradient term is active); student
    and teacher logits are random.
    """
    radius = max(2.0, min(height, width) / 4.0)
    while True:
        instances, classes = ellipse_field(
            height, width, 2, rng,
            radius_range=(max(1.5, radius / 2), radius),
            num_classes=tp_channels - 1, min_sep=1,
        )
        if instances.max() > 0:
            break
    gt = make_target_maps(instances, classes)
    student = random_predictions(height, width, tp_channels, rng)
    teacher = random_predictions(height, width, tp_channels, rng)
    return student, gt, teacher


def render_image(instances: np.ndarray, classes: dict[int, int],
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Grayscale-ish RGB rendering of an instance field (for overlays)."""
    img = np.full(instances.shape + (3,), 40, dtype=np.uint8)
    for label in np.unique(instances):
        if label == 0:
            continue
        shade = 90 + (int(classes.get(int(label), 1)) * 37) % 140
        img[instances == label] = (shade, shade // 2 + 60, 200 - shade // 2)
    if rng is not None:
        jitter = rng.integers(-10, 11, img.shape)
        img = np.clip(img.astype(np.int16) + jitter, 0, 255).astype(np.uint8)
    return img
