"""Distillation loss family with analytic gradients.

The combined objective blends a ground-truth branch and a teacher branch:

    combined = alpha * student_total + (1 - alpha) * distill_total

Both branches share six term slots (hv_mse, hv_msge, np_ce,
np_dice_or_kld, tp_ce, tp_dice_or_kld); the fourth and sixth slot hold a
Dice term on the student side and a temperature-scaled KL term on the
distillation side.  All arithmetic runs in float64 regardless of input
dtype, and every term has a closed-form gradient with respect to the
prediction logits and offset maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelOutOfRange, NonFinite, ShapeMismatch
from .targets import ClassWeights, TargetMaps

TERM_SLOTS = (
    "hv_mse",
    "hv_msge",
    "np_ce",
    "np_dice_or_kld",
    "tp_ce",
    "tp_dice_or_kld",
)

_LOG_CLAMP = 1e-12


@dataclass
class PredictionMaps:
    """One network output (or teacher output) for a tile."""

    np_logits: np.ndarray  # H x W x 2
    hv: np.ndarray  # H x W x 2
    tp_logits: np.ndarray  # H x W x C, C >= 2

    def __post_init__(self):
        self.np_logits = np.asarray(self.np_logits, dtype=np.float64)
        self.hv = np.asarray(self.hv, dtype=np.float64)
        self.tp_logits = np.asarray(self.tp_logits, dtype=np.float64)
        hw = self.np_logits.shape[:2]
        if self.np_logits.shape != hw + (2,):
            raise ShapeMismatch(f"np_logits must be H x W x 2, got {self.np_logits.shape}")
        if self.hv.shape != hw + (2,):
            raise ShapeMismatch(f"hv must be {hw + (2,)}, got {self.hv.shape}")
        if self.tp_logits.ndim != 3 or self.tp_logits.shape[:2] != hw or self.tp_logits.shape[2] < 2:
            raise ShapeMismatch(f"tp_logits must be H x W x C>=2, got {self.tp_logits.shape}")
        for name in ("np_logits", "hv", "tp_logits"):
            if not np.isfinite(getattr(self, name)).all():
                raise NonFinite(f"{name} contains NaN or infinity")

    @property
    def num_classes(self) -> int:
        return self.tp_logits.shape[2]


@dataclass
class LossConfig:
    """Knobs of the loss family.

    ``term_scales`` multiplies the six term slots in slot order; reported
    breakdown values are already scaled, so each total is the plain sum of
    its terms.  ``distill_hard_ce`` picks whether the distillation CE uses
    the teacher's argmax as hard labels (default) or its softmax as soft
    targets.
    """

    alpha: float = 0.5
    temperature: float = 1.0
    np_weights: ClassWeights | None = None
    tp_weights: ClassWeights | None = None
    term_scales: tuple[float, ...] = (1.0,) * 6
    dice_epsilon: float = 1e-3
    distill_hard_ce: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.dice_epsilon > 0:
            raise ValueError(f"dice_epsilon must be positive, got {self.dice_epsilon}")
        self.term_scales = tuple(float(s) for s in self.term_scales)
        if len(self.term_scales) != len(TERM_SLOTS):
            raise ValueError(f"need {len(TERM_SLOTS)} term scales, got {len(self.term_scales)}")
        if any(s < 0 for s in self.term_scales):
            raise ValueError("term scales must be non-negative")


@dataclass
class LossBreakdown:
    """Scaled per-term values plus the branch totals and their blend.

    For ``student_loss``/``distill_loss`` the fields of the other branch
    and ``combined`` are 0.  For the combined losses each term slot holds
    ``alpha * student_term + (1 - alpha) * distill_term`` while the two
    totals stay unweighted, so ``combined`` always equals
    ``alpha * student_total + (1 - alpha) * distill_total``.
    """

    hv_mse: float = 0.0
    hv_msge: float = 0.0
    np_ce: float = 0.0
    np_dice_or_kld: float = 0.0
    tp_ce: float = 0.0
    tp_dice_or_kld: float = 0.0
    student_total: float = 0.0
    distill_total: float = 0.0
    combined: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in
                TERM_SLOTS + ("student_total", "distill_total", "combined")}


@dataclass
class LossGrad:
    """Gradients of a scalar loss with respect to the prediction heads."""

    d_np_logits: np.ndarray
    d_hv: np.ndarray
    d_tp_logits: np.ndarray


def _zero_grad(x: PredictionMaps) -> LossGrad:
    return LossGrad(
        d_np_logits=np.zeros_like(x.np_logits),
        d_hv=np.zeros_like(x.hv),
        d_tp_logits=np.zeros_like(x.tp_logits),
    )


# ---------------------------------------------------------------------------
# softmax / one-hot plumbing


def softmax_with_temperature(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / temperature``.

    Numerically stable (max-subtracted) and computed in float64.

    Raises:
        NonFinite: any input value is NaN or infinite.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NonFinite("logits contain NaN or infinity")
    z = z / float(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(
            f"labels must lie in [0, {num_classes}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    return np.eye(num_classes, dtype=np.float64)[labels]


def _resolve_weights(weights, num_classes: int) -> np.ndarray:
    if weights is None:
        return np.ones(num_classes, dtype=np.float64)
    if isinstance(weights, ClassWeights):
        w = weights.weights
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape != (num_classes,):
        raise ShapeMismatch(f"expected {num_classes} weights, got shape {w.shape}")
    return w


# ---------------------------------------------------------------------------
# individual terms, each returning (value, gradient-or-None)


def _mse(x: np.ndarray, y: np.ndarray, want_grad: bool):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    diff = x - y
    value = float(np.mean(diff * diff)) if x.size else 0.0
    grad = (2.0 / x.size) * diff if (want_grad and x.size) else None
    return value, grad


def _axis_gradient(a: np.ndarray, axis: int) -> np.ndarray:
    # Central differences inside, one-sided at the two border rows/columns.
    return np.gradient(a, axis=axis)


def _axis_gradient_adjoint(w: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of the stencil in :func:`_axis_gradient` applied to ``w``."""
    out = np.zeros_like(w)
    n = w.shape[axis]
    if n < 2:
        return out
    wv = np.moveaxis(w, axis, 0)
    ov = np.moveaxis(out, axis, 0)
    ov[0] -= wv[0]
    ov[1] += wv[0]
    ov[n - 2] -= wv[n - 1]
    ov[n - 1] += wv[n - 1]
    if n > 2:
        ov[0 : n - 2] -= wv[1 : n - 1] / 2.0
        ov[2:n] += wv[1 : n - 1] / 2.0
    return out


def _msge(x_hv: np.ndarray, y_hv: np.ndarray, mask: np.ndarray, want_grad: bool):
    x_hv = np.asarray(x_hv, dtype=np.float64)
    y_hv = np.asarray(y_hv, dtype=np.float64)
    if x_hv.shape != y_hv.shape or x_hv.ndim != 3 or x_hv.shape[2] != 2:
        raise ShapeMismatch(f"{x_hv.shape} vs {y_hv.shape}")
    mask = np.asarray(mask)
    if mask.shape != x_hv.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} vs maps {x_hv.shape[:2]}")
    m = mask > 0
    n_masked = int(m.sum())
    grad = np.zeros_like(x_hv) if want_grad else None
    if n_masked == 0:
        return 0.0, grad

    value = 0.0
    # Horizontal offsets vary along columns (axis 1), vertical along rows.
    for channel, axis in ((0, 1), (1, 0)):
        if x_hv.shape[axis] < 2:
            continue
        d = _axis_gradient(x_hv[:, :, channel], axis) - _axis_gradient(
            y_hv[:, :, channel], axis
        )
        value += float(np.sum(d[m] * d[m])) / n_masked
        if want_grad:
            grad[:, :, channel] += (2.0 / n_masked) * _axis_gradient_adjoint(
                d * m, axis
            )
    return value, grad


def _weighted_ce(logits: np.ndarray, targets: np.ndarray, weights, want_grad: bool):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ShapeMismatch(f"logits must be H x W x C, got {logits.shape}")
    num_classes = logits.shape[2]
    w = _resolve_weights(weights, num_classes)
    targets = np.asarray(targets)

    p = softmax_with_temperature(logits)
    logp = np.log(np.maximum(p, _LOG_CLAMP))
    active = p > _LOG_CLAMP  # below the clamp the log is flat, gradient 0
    n_pix = logits.shape[0] * logits.shape[1]

    if targets.ndim == 2:
        if targets.shape != logits.shape[:2]:
            raise ShapeMismatch(f"labels {targets.shape} vs logits {logits.shape[:2]}")
        hot = _one_hot(targets.astype(np.int64), num_classes)
    elif targets.ndim == 3:
        if targets.shape != logits.shape:
            raise ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
        hot = np.asarray(targets, dtype=np.float64)
    else:
        raise ShapeMismatch(f"targets must be H x W labels or H x W x C, got {targets.shape}")

    weighted = hot * w  # w_k * y_ik
    value = float(-np.sum(weighted * logp) / n_pix)
    if not want_grad:
        return value, None
    coef = weighted * active  # terms whose log is clamped contribute nothing
    row = coef.sum(axis=-1, keepdims=True)
    grad = (p * row - coef) / n_pix
    return value, grad


def _dice(logits: np.ndarray, target_hot: np.ndarray, epsilon: float, want_grad: bool):
    logits = np.asarray(logits, dtype=np.float64)
    q = np.asarray(target_hot, dtype=np.float64)
    if q.shape != logits.shape:
        raise ShapeMismatch(f"targets {q.shape} vs logits {logits.shape}")
    num_classes = logits.shape[-1]
    p = softmax_with_temperature(logits)

    axes = tuple(range(p.ndim - 1))
    inter = (p * q).sum(axis=axes)
    num = 2.0 * inter + epsilon
    den = p.sum(axis=axes) + q.sum(axis=axes) + epsilon
    value = float(np.mean(1.0 - num / den))
    if not want_grad:
        return value, None
    # d value / d p_ik, then pull back through the softmax.
    g = -(2.0 * q * den - num) / (den * den) / num_classes
    grad = p * (g - (g * p).sum(axis=-1, keepdims=True))
    return value, grad


def _kld(x_logits: np.ndarray, y_logits: np.ndarray, temperature: float, want_grad: bool):
    x_logits = np.asarray(x_logits, dtype=np.float64)
    y_logits = np.asarray(y_logits, dtype=np.float64)
    if x_logits.shape != y_logits.shape:
        raise ShapeMismatch(f"{x_logits.shape} vs {y_logits.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = float(temperature)
    lp = _log_softmax(x_logits, t)
    lq = _log_softmax(y_logits, t)
    q = np.exp(lq)
    n_pix = x_logits.shape[0] * x_logits.shape[1]
    value = float(np.sum(q * (lq - lp)) / n_pix / (t * t))
    if not want_grad:
        return value, None
    grad = (np.exp(lp) - q) / (n_pix * t * t * t)
    return value, grad


# ---------------------------------------------------------------------------
# public single-term entry points (values only)


def mse_hv(x_hv: np.ndarray, y_hv: np.ndarray) -> float:
    """Mean squared error over both offset channels."""
    return _mse(x_hv, y_hv, want_grad=False)[0]


def msge_hv(x_hv: np.ndarray, y_hv: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error of the offset-map spatial gradients inside ``mask``.

    The horizontal channel is differentiated along columns and the
    vertical channel along rows (central differences inside, one-sided at
    the borders); each channel's squared differences are averaged over the
    mask and the two channel means are summed.  An empty mask or an image
    extent below 2 along a channel's axis contributes 0.
    """
    return _msge(x_hv, y_hv, mask, want_grad=False)[0]


def weighted_ce(logits: np.ndarray, targets: np.ndarray, weights=None) -> float:
    """Class-weighted cross-entropy, averaged over pixels.

    ``targets`` is either an H x W integer label map or an H x W x C
    probability array (soft targets).  Logs are clamped at 1e-12.
    """
    return _weighted_ce(logits, targets, weights, want_grad=False)[0]


def dice_loss(logits: np.ndarray, target_hot: np.ndarray, epsilon: float = 1e-3) -> float:
    """Soft Dice loss, averaged over classes.

    Per class: 1 - (2 * sum(p*q) + eps) / (sum(p) + sum(q) + eps), with p
    the softmax of ``logits`` and q the one-hot (or soft) target.
    """
    return _dice(logits, target_hot, epsilon, want_grad=False)[0]


def kld_temp(x_logits: np.ndarray, y_logits: np.ndarray, temperature: float = 1.0) -> float:
    """Temperature-scaled KL divergence KL(softmax(y/T) || softmax(x/T)).

    Both distributions are softened with the same temperature, the
    per-pixel divergence is averaged, and the result is multiplied by
    1 / T^2.  Zero exactly when ``x_logits`` equals ``y_logits``.
    """
    return _kld(x_logits, y_logits, temperature, want_grad=False)[0]


# ---------------------------------------------------------------------------
# branch assembly


def _require_targets(gt: TargetMaps) -> None:
    if gt.tp_target is None:
        raise ShapeMismatch("loss evaluation needs a tp_target (class map)")


def _student_terms(x: PredictionMaps, gt: TargetMaps, cfg: LossConfig, want_grad: bool):
    _require_targets(gt)
    if gt.np_target.shape != x.np_logits.shape[:2]:
        raise ShapeMismatch(
            f"targets {gt.np_target.shape} vs predictions {x.np_logits.shape[:2]}"
        )
    np_hot = _one_hot(gt.np_target.astype(np.int64), 2)
    tp_hot = _one_hot(gt.tp_target.astype(np.int64), x.num_classes)
    values = np.zeros(len(TERM_SLOTS))
    grads = [None] * len(TERM_SLOTS)
    values[0], grads[0] = _mse(x.hv, gt.hv_target, want_grad)
    values[1], grads[1] = _msge(x.hv, gt.hv_target, gt.np_target, want_grad)
    values[2], grads[2] = _weighted_ce(x.np_logits, gt.np_target, cfg.np_weights, want_grad)
    values[3], grads[3] = _dice(x.np_logits, np_hot, cfg.dice_epsilon, want_grad)
    values[4], grads[4] = _weighted_ce(x.tp_logits, gt.tp_target, cfg.tp_weights, want_grad)
    values[5], grads[5] = _dice(x.tp_logits, tp_hot, cfg.dice_epsilon, want_grad)
    return values, grads


def _distill_terms(x: PredictionMaps, teacher: PredictionMaps, cfg: LossConfig, want_grad: bool):
    if teacher.np_logits.shape[:2] != x.np_logits.shape[:2]:
        raise ShapeMismatch(
            f"teacher {teacher.np_logits.shape[:2]} vs student {x.np_logits.shape[:2]}"
        )
    if teacher.num_classes != x.num_classes:
        raise ShapeMismatch(
            f"teacher has {teacher.num_classes} classes, student {x.num_classes}"
        )
    np_labels = teacher.np_logits.argmax(axis=-1)
    if cfg.distill_hard_ce:
        np_ce_target = np_labels
        tp_ce_target = teacher.tp_logits.argmax(axis=-1)
    else:
        np_ce_target = softmax_with_temperature(teacher.np_logits)
        tp_ce_target = softmax_with_temperature(teacher.tp_logits)
    values = np.zeros(len(TERM_SLOTS))
    grads = [None] * len(TERM_SLOTS)
    values[0], grads[0] = _mse(x.hv, teacher.hv, want_grad)
    values[1], grads[1] = _msge(x.hv, teacher.hv, np_labels == 1, want_grad)
    values[2], grads[2] = _weighted_ce(x.np_logits, np_ce_target, cfg.np_weights, want_grad)
    values[3], grads[3] = _kld(x.np_logits, teacher.np_logits, cfg.temperature, want_grad)
    values[4], grads[4] = _weighted_ce(x.tp_logits, tp_ce_target, cfg.tp_weights, want_grad)
    values[5], grads[5] = _kld(x.tp_logits, teacher.tp_logits, cfg.temperature, want_grad)
    return values, grads


_GRAD_HEAD = ("d_hv", "d_hv", "d_np_logits", "d_np_logits", "d_tp_logits", "d_tp_logits")


def _add_grads(accum: LossGrad, grads, coeffs) -> None:
    for slot, g in enumerate(grads):
        if g is not None:
            head = getattr(accum, _GRAD_HEAD[slot])
            head += coeffs[slot] * g


def _breakdown(slot_values: np.ndarray, student_total: float, distill_total: float,
               combined: float) -> LossBreakdown:
    kwargs = {name: float(v) for name, v in zip(TERM_SLOTS, slot_values)}
    return LossBreakdown(student_total=float(student_total),
                         distill_total=float(distill_total),
                         combined=float(combined), **kwargs)


def student_loss(x: PredictionMaps, gt: TargetMaps, cfg: LossConfig | None = None) -> LossBreakdown:
    """Ground-truth branch only: MSE + MSGE on offsets, CE + Dice per head."""
    cfg = cfg or LossConfig()
    raw, _ = _student_terms(x, gt, cfg, want_grad=False)
    scaled = raw * np.asarray(cfg.term_scales)
    return _breakdown(scaled, scaled.sum(), 0.0, 0.0)


def distill_loss(x: PredictionMaps, teacher: PredictionMaps,
                 cfg: LossConfig | None = None) -> LossBreakdown:
    """Teacher branch only: MSE + MSGE on offsets, CE + scaled KL per head."""
    cfg = cfg or LossConfig()
    raw, _ = _distill_terms(x, teacher, cfg, want_grad=False)
    scaled = raw * np.asarray(cfg.term_scales)
    return _breakdown(scaled, 0.0, scaled.sum(), 0.0)


def combined_loss(x: PredictionMaps, gt: TargetMaps, teacher: PredictionMaps,
                  cfg: LossConfig | None = None) -> LossBreakdown:
    """Blend of the two branches: alpha * student + (1 - alpha) * distill."""
    cfg = cfg or LossConfig()
    scales = np.asarray(cfg.term_scales)
    s = _student_terms(x, gt, cfg, want_grad=False)[0] * scales
    d = _distill_terms(x, teacher, cfg, want_grad=False)[0] * scales
    a = cfg.alpha
    st, dt = s.sum(), d.sum()
    return _breakdown(a * s + (1.0 - a) * d, st, dt, a * st + (1.0 - a) * dt)


def combined_loss_grad(x: PredictionMaps, gt: TargetMaps, teacher: PredictionMaps,
                       cfg: LossConfig | None = None) -> tuple[LossBreakdown, LossGrad]:
    """Combined loss value plus its gradient for every prediction head.

    The gradient is the exact derivative of ``combined`` in
    :class:`LossBreakdown` with respect to ``x.np_logits``, ``x.hv`` and
    ``x.tp_logits``.
    """
    cfg = cfg or LossConfig()
    scales = np.asarray(cfg.term_scales)
    a = cfg.alpha
    grad = _zero_grad(x)

    s_raw, s_grads = _student_terms(x, gt, cfg, want_grad=a > 0.0)
    d_raw, d_grads = _distill_terms(x, teacher, cfg, want_grad=a < 1.0)
    _add_grads(grad, s_grads, a * scales)
    _add_grads(grad, d_grads, (1.0 - a) * scales)

    s = s_raw * scales
    d = d_raw * scales
    st, dt = s.sum(), d.sum()
    breakdown = _breakdown(a * s + (1.0 - a) * d, st, dt, a * st + (1.0 - a) * dt)
    return breakdown, grad
