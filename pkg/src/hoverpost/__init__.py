"""Nuclei instance post-processing, distillation losses and evaluation."""

__version__ = "0.1.0"

from .errors import (
    AllZeroCounts,
    BadMagic,
    CorruptLabels,
    HoverpostError,
    IoFailure,
    LabelOutOfRange,
    MarkerOutsideMask,
    MissingClass,
    NonFinite,
    ShapeMismatch,
    TruncatedPayload,
    UnknownClass,
    UnmappedClass,
    UnsupportedDtype,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    LossGrad,
    PredictionMaps,
    combined_loss,
    combined_loss_grad,
    dice_loss,
    distill_loss,
    kld_temp,
    mse_hv,
    msge_hv,
    softmax_with_temperature,
    student_loss,
    weighted_ce,
)
from .maps_io import (
    FoldTile,
    boundary_mask,
    load_pannuke_fold,
    read_npy,
    write_instances_json,
    write_npy,
    write_overlay_png,
)
from .metrics import (
    COMMON_CLASS_NAMES,
    EPITHELIAL,
    INFLAMMATORY,
    MISCELLANEOUS,
    NEOPLASTIC,
    ClassMapping,
    FScoreCoefficients,
    MatchSet,
    PanopticScores,
    TilePair,
    class_mapping,
    classification_f1,
    detection_f1,
    evaluate_dataset,
    instance_centroids,
    iou_matrix,
    match_instances,
    multiclass_pq,
    panoptic_quality,
    remap_classes,
)
from .postproc import (
    NucleusRecord,
    PostprocConfig,
    classify_instances,
    extract_records,
    instance_segment,
    sobel_energy,
    watershed,
)
from .targets import (
    ClassWeights,
    TargetMaps,
    compute_class_weights,
    gen_hv_targets,
    gen_np_target,
    gen_tp_target,
    make_target_maps,
    validate_instance_map,
)
