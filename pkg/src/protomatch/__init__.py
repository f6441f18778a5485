"""Zero-shot out-of-distribution segmentation by dense prototype matching.

Known classes are summarized by small banks of unit-normalized instance
embeddings from a frozen feature extractor. At inference, every patch of a
test image is scored by its best cosine similarity against each class bank;
pixels whose best similarity is low (after per-image min-max normalization
and inversion) are flagged out-of-distribution, and class-agnostic
foreground proposals can refine those pixel flags into whole-object masks.
"""

from .bank import (
    DEFAULT_PROTOTYPES_PER_CLASS,
    BankClass,
    PrototypeBank,
    build_bank,
    downsample_mask,
    load_bank,
    masked_mean_embedding,
    save_bank,
)
from .detect import DEFAULT_INCS_THRESHOLD, OODDecision, incs_map, threshold_ood
from .extract import FeatureMap, FileExtractor, MockExtractor, features_for_record, parse_backend
from .matching import classify_pixels, cosine_heatmaps, upsample
from .metrics import (
    ConfusionCounts,
    FprResult,
    ThresholdCurve,
    aupr,
    binary_iou,
    confusion_counts,
    default_threshold_grid,
    f1,
    fpr_at_tpr,
    pr_curve,
)
from .pipeline import EvalReport, RunConfig, run_bank_build, run_eval, run_infer, run_render, run_sweep
from .refine import (
    DEFAULT_DETECTOR_THRESHOLD,
    MaskVerdict,
    Proposal,
    RefinedDecision,
    filter_proposals,
    refine_ood,
    vote_mask,
)
from .tensor_io import (
    DatasetManifest,
    ImageRecord,
    LabelMap,
    load_manifest,
    read_feature_map,
    read_label_map,
    read_mask,
    write_feature_map,
    write_label_map,
    write_mask,
)

__version__ = "0.1.0"
