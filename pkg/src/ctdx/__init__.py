"""CT volume classification pipeline.

Deep-network inference is externalized behind a prediction-file interface;
this package provides everything around it: volume ingestion and HU
windowing, deterministic sub-volume sampling with flip test-time
augmentation, two-threshold vote aggregation, slice-probability feature
assembly, trainable logistic-regression / MLP heads (SGD with optional
sharpness-aware updates), and macro-F1 evaluation with stratified folds.
"""

__version__ = "0.1.0"

from .aggregate import (
    FEATURE_ROWS,
    SliceFilterConfig,
    VoteThresholds,
    assemble_features,
    filter_slices,
    majority_vote,
    pool_ensemble,
    threshold_vote,
)
from .evaluate import ConfusionMatrix, confusion, macro_f1, report, stratified_folds
from .heads import (
    HeadClassifier,
    HeadModel,
    TrainConfig,
    cosine_lr,
    grad_check,
    load_head,
    predict_head,
    save_head,
    smoothed_cross_entropy,
    train_head,
)
from .ingest import (
    PredictionRecord,
    Volume,
    WindowSpec,
    apply_window,
    load_volume,
    read_labels,
    read_predictions,
    write_labels,
    write_predictions,
)
from .labels import COVID, NON_COVID
from .predictor import (
    FilePredictor,
    SyntheticPredictor,
    SyntheticPredictorConfig,
    VolumePredictor,
)
from .preprocess import (
    BBox,
    FlipSpec,
    build_minivolume,
    crop_body,
    depth_resize,
    flip,
    resize_bilinear,
    split_lungs,
)
from .sampling import SubVolumePlan, TtaPlan, inference_subvolumes, train_sample, tta_variants

__all__ = [
    "BBox",
    "COVID",
    "ConfusionMatrix",
    "FEATURE_ROWS",
    "FilePredictor",
    "FlipSpec",
    "HeadClassifier",
    "HeadModel",
    "NON_COVID",
    "PredictionRecord",
    "SliceFilterConfig",
    "SubVolumePlan",
    "SyntheticPredictor",
    "SyntheticPredictorConfig",
    "TrainConfig",
    "TtaPlan",
    "Volume",
    "VolumePredictor",
    "VoteThresholds",
    "WindowSpec",
    "apply_window",
    "assemble_features",
    "build_minivolume",
    "confusion",
    "cosine_lr",
    "crop_body",
    "depth_resize",
    "filter_slices",
    "flip",
    "grad_check",
    "inference_subvolumes",
    "load_head",
    "load_volume",
    "macro_f1",
    "majority_vote",
    "pool_ensemble",
    "predict_head",
    "read_labels",
    "read_predictions",
    "report",
    "resize_bilinear",
    "save_head",
    "smoothed_cross_entropy",
    "split_lungs",
    "stratified_folds",
    "threshold_vote",
    "train_head",
    "train_sample",
    "tta_variants",
    "write_labels",
    "write_predictions",
]
