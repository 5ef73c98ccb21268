"""Speculative decoding verified at the level of overlapping token similarity groups."""

from .asg_index import (
    GroupIndex,
    IndexStats,
    build_groups,
    build_groups_reference,
    load_embeddings,
    load_index,
    normalize,
    save_embeddings,
    save_index,
    stats,
)
from .coarse import (
    TokenDistribution,
    accept_prob,
    coarse_mass,
    exact_group_identity_check,
    residual_sample_thinning,
    sample_group_label,
)
from .decoder import DecodeConfig, DecodeTrace, StepOutcome, generate, pcg_round, sd_round, ssd_round
from .rng import DecodeStreams, make_stream

__version__ = "0.1.0"
