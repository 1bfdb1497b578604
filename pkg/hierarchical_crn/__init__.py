# Hierarchical Reasoning Module
from .main import (
    CrnConfig,
    CrnError,
    HierarchicalReasoner,
    InvalidOrder,
    MlpBaselineHead,
    decode_answer,
    mlp_baseline_head,
    sample_subsets,
)
