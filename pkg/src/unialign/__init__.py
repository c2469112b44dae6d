"""Progressive multimodal alignment on a single CPU core.

Frozen per-modality feature extractors feed one trainable projection trunk
through learnable modality tokens; new modalities join later by training only
a compact per-modality alignment layer against an already-aligned bridge.
"""

from .autodiff import Parameter, Tensor, grad_check
from .data import (
    DatasetManifest,
    FeatureFile,
    FrozenEncoder,
    ModalitySpec,
    PairedBatch,
    PairedDataset,
    SyntheticWorldConfig,
    VqaDataset,
    batch_iter,
    load_features,
    load_manifest,
    save_features,
    save_manifest,
    synth_vqa_world,
    synth_world,
)
from .evaluate import (
    TaxonomyGraph,
    emit_report,
    macro_f1,
    retrieval_metrics,
    wup,
    wups_score,
    zero_shot_classify,
)
from .loss import (
    SimilarityMatrix,
    Temperature,
    alignment_loss,
    cross_entropy,
    infonce_rowwise,
    pairwise_cosine,
    soft_targets,
    weighted_infonce,
)
from .model import (
    AlignmentLayer,
    ModalityRegistry,
    ModalityToken,
    ModelState,
    PredictionHead,
    UniversalProjection,
    UPConfig,
    encode,
    fuse,
    pool_embed,
    vqa_forward,
)
from .pipeline import (
    AdamW,
    TrainConfig,
    adamw_update,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
    train_vqa,
)
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AlignmentLayer",
    "DatasetManifest",
    "FeatureFile",
    "FrozenEncoder",
    "ModalityRegistry",
    "ModalitySpec",
    "ModalityToken",
    "ModelState",
    "PairedBatch",
    "PairedDataset",
    "Parameter",
    "PredictionHead",
    "RngStream",
    "SimilarityMatrix",
    "SyntheticWorldConfig",
    "TaxonomyGraph",
    "Temperature",
    "Tensor",
    "TrainConfig",
    "UPConfig",
    "UniversalProjection",
    "VqaDataset",
    "adamw_update",
    "alignment_loss",
    "batch_iter",
    "cross_entropy",
    "emit_report",
    "encode",
    "fuse",
    "grad_check",
    "infonce_rowwise",
    "load_checkpoint",
    "load_features",
    "load_manifest",
    "macro_f1",
    "pairwise_cosine",
    "pool_embed",
    "retrieval_metrics",
    "save_checkpoint",
    "save_features",
    "save_manifest",
    "soft_targets",
    "synth_vqa_world",
    "synth_world",
    "train_stage1",
    "train_stage2",
    "train_vqa",
    "vqa_forward",
    "weighted_infonce",
    "wup",
    "wups_score",
    "zero_shot_classify",
]
