"""Quantitative evaluation: FID/SSIM/CSIM, protocols, and the timing harness."""

from fewshot_heads.evaluation.metrics import (
    PooledPyramidFeatures,
    compute_csim,
    compute_fid,
    compute_ssim,
    default_face_embedder,
    default_fid_features,
    featurize_images,
)
from fewshot_heads.evaluation.protocols import (
    MetricReport,
    MetricRow,
    build_user_study_triplets,
    rank_puppeteering_sources,
    self_reenactment_eval,
)
from fewshot_heads.evaluation.timing import TimingTable, measure_times

__all__ = [
    "MetricReport",
    "MetricRow",
    "PooledPyramidFeatures",
    "TimingTable",
    "build_user_study_triplets",
    "compute_csim",
    "compute_fid",
    "compute_ssim",
    "default_face_embedder",
    "default_fid_features",
    "featurize_images",
    "measure_times",
    "rank_puppeteering_sources",
    "self_reenactment_eval",
]
