"""Fusion-based hierarchical indexing and cascaded retrieval for biometric identification."""

from .core import (
    CascadeSchedule,
    DimensionMismatch,
    SoftBiometrics,
    Split,
    SubjectRecord,
    WorkloadReport,
    validate_gallery,
)
from .fusion import FusionMethod, TrainingStats, compute_training_stats, fuse, fuse_group
from .index import FusionNode, IndexBuildError, IndexForest, build_index
from .pairing import PairingMethod, pair_hierarchy, pair_subjects, solve_assignment
from .retrieval import (
    CandidateList,
    RetrievalTrace,
    default_schedule,
    exhaustive_search,
    keep_all_schedule,
    lower_bound_schedule,
    schedule_for_k1,
    retrieve,
    workload,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateList",
    "CascadeSchedule",
    "DimensionMismatch",
    "FusionMethod",
    "FusionNode",
    "IndexBuildError",
    "IndexForest",
    "PairingMethod",
    "RetrievalTrace",
    "SoftBiometrics",
    "Split",
    "SubjectRecord",
    "TrainingStats",
    "WorkloadReport",
    "build_index",
    "compute_training_stats",
    "default_schedule",
    "exhaustive_search",
    "fuse",
    "fuse_group",
    "keep_all_schedule",
    "lower_bound_schedule",
    "pair_hierarchy",
    "pair_subjects",
    "retrieve",
    "schedule_for_k1",
    "solve_assignment",
    "validate_gallery",
    "workload",
]
