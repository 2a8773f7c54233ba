"""Masked prediction of discovered acoustic units at desk scale."""

from maskunit.clustering import (
    Codebook,
    ClusterEnsemble,
    KMeansTeacher,
    LabelSequence,
    ProductQuantizer,
    assign,
    kmeanspp_init,
    lloyd_fit,
    minibatch_kmeans_fit,
    pq_fit,
    subsample_frames,
)
from maskunit.features import (
    MFCC,
    FeatureSequence,
    MfccConfig,
    Splicer,
    Waveform,
    compute_mfcc,
    load_wav,
    splice,
)
from maskunit.masking import MaskConfig, MaskSpec, corrupt, sample_mask
from maskunit.metrics import (
    ContingencyTable,
    build_contingency,
    cluster_purity,
    phone_purity,
    pnmi,
)

__version__ = "0.1.0"

__all__ = [
    "MFCC",
    "Codebook",
    "ClusterEnsemble",
    "ContingencyTable",
    "FeatureSequence",
    "KMeansTeacher",
    "LabelSequence",
    "MaskConfig",
    "MaskSpec",
    "MfccConfig",
    "ProductQuantizer",
    "Splicer",
    "Waveform",
    "assign",
    "build_contingency",
    "cluster_purity",
    "compute_mfcc",
    "corrupt",
    "kmeanspp_init",
    "load_wav",
    "lloyd_fit",
    "minibatch_kmeans_fit",
    "phone_purity",
    "pnmi",
    "pq_fit",
    "sample_mask",
    "splice",
    "subsample_frames",
]
