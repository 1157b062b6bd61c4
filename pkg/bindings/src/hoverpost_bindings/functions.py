"""Array-in/array-out entry points over the core kernels.

Each function validates its inputs as :class:`BoundArrayView` (which
never copies), forwards the caller's buffers to the core library
unchanged, and maps plain config dicts onto the library dataclasses so
pipelines do not have to import them.  The heavy kernels run in compiled
code that drops the interpreter lock, so calls are safe to issue from
worker threads.
"""

from __future__ import annotations

import numpy as np

from hoverpost import (
    ClassWeights,
    FScoreCoefficients,
    LossConfig,
    PostprocConfig,
    PredictionMaps,
    ShapeMismatch,
    TargetMaps,
    TilePair,
    combined_loss_grad,
    evaluate_dataset,
    instance_segment,
)

from .views import BoundArrayView

__all__ = ["bind_instance_segment", "bind_combined_loss", "bind_metrics"]


def _view(arr, name: str, dtype=None) -> np.ndarray:
    view = BoundArrayView.from_array(arr, name)
    if dtype is not None:
        view.expect_dtype(dtype, name)
    return view.data


def bind_instance_segment(np_probs, hv, config: dict | None = None) -> np.ndarray:
    """Decode probability and offset maps into an int32 instance map.

    ``config`` keys mirror the decoding knobs (``np_threshold``,
    ``energy_threshold``, ``min_instance_size``, ``sobel_radius``);
    missing keys take the library defaults.  The output is bit-identical
    to the ``postprocess`` command run on the same values.
    """
    probs = _view(np_probs, "np_probs")
    offsets = _view(hv, "hv")
    cfg = PostprocConfig(**(config or {}))
    return instance_segment(probs, offsets, cfg)


_PRED_KEYS = ("np_logits", "hv", "tp_logits")


def _prediction(maps: dict, who: str) -> PredictionMaps:
    missing = [k for k in _PRED_KEYS if k not in maps]
    if missing:
        raise ShapeMismatch(f"{who}: missing arrays {missing}")
    # float64 keeps the exactness guarantee: the core would silently
    # upcast (and therefore copy) anything narrower
    return PredictionMaps(
        **{k: _view(maps[k], f"{who}.{k}", np.float64) for k in _PRED_KEYS}
    )


def _loss_config(config: dict | None) -> LossConfig:
    kwargs = dict(config or {})
    for key in ("np_weights", "tp_weights"):
        if kwargs.get(key) is not None and not isinstance(kwargs[key], ClassWeights):
            kwargs[key] = ClassWeights(np.asarray(kwargs[key], dtype=np.float64))
    return LossConfig(**kwargs)


def bind_combined_loss(
    x: dict, gt: dict, teacher: dict, config: dict | None = None
) -> tuple[dict, dict]:
    """Blended loss value and analytic gradients for one tile.

    ``x`` and ``teacher`` carry ``np_logits``/``hv``/``tp_logits``
    (float64); ``gt`` carries ``np_target`` (uint8), ``hv_target``
    (float64) and optionally ``tp_target`` (uint32).  Returns a scalar
    breakdown dict and a dict of gradient arrays, equal to the core
    library bit for bit.
    """
    student = _prediction(x, "x")
    teach = _prediction(teacher, "teacher")
    for key in ("np_target", "hv_target"):
        if key not in gt:
            raise ShapeMismatch(f"gt: missing arrays ['{key}']")
    tp_target = gt.get("tp_target")
    targets = TargetMaps(
        np_target=_view(gt["np_target"], "gt.np_target", np.uint8),
        hv_target=_view(gt["hv_target"], "gt.hv_target", np.float64),
        tp_target=None if tp_target is None else _view(tp_target, "gt.tp_target", np.uint32),
    )
    breakdown, grad = combined_loss_grad(student, targets, teach, _loss_config(config))
    return breakdown.as_dict(), {
        "d_np_logits": grad.d_np_logits,
        "d_hv": grad.d_hv,
        "d_tp_logits": grad.d_tp_logits,
    }


def bind_metrics(
    gt,
    pred,
    gt_classes: dict | None = None,
    pred_classes: dict | None = None,
    config: dict | None = None,
) -> dict:
    """Panoptic-quality and F-score report for one tile pair.

    Labels are uint32 maps with background 0.  ``config`` accepts
    ``name`` (tile name in the report), ``radius`` (centroid match
    radius) and ``coefficients`` (the four classification F-score
    weights).  Returns the same document the ``evaluate`` command emits
    for a single-tile dataset.
    """
    cfg = dict(config or {})
    name = str(cfg.pop("name", "tile"))
    radius = float(cfg.pop("radius", 12.0))
    coeff = cfg.pop("coefficients", None)
    if cfg:
        raise ValueError(f"unknown metric config keys: {sorted(cfg)}")

    tile = TilePair(
        name,
        _view(gt, "gt", np.uint32),
        _view(pred, "pred", np.uint32),
        None if gt_classes is None else {int(k): int(v) for k, v in gt_classes.items()},
        None if pred_classes is None else {int(k): int(v) for k, v in pred_classes.items()},
    )
    coefficients = None if coeff is None else FScoreCoefficients(*coeff)
    return evaluate_dataset([tile], coefficients, radius)
