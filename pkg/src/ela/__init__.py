"""Layer-attention redundancy detection and retrieval pruning."""

from .attention import AttentionMode, ForwardTrace, LayerStack, backward, ela_forward, forward, mrla_b_forward, mrla_l_forward, project_qkv
from .divergence import AttentionDistribution, DivergenceSeries, average_series, kl_divergence, padded_adjacent_kl, series_from_stack
from .mapping import DivergenceScorer, MappedScores, MapperConfig, MapperKind, QuantileMapper, apply_mapper, ebqm, empirical_cdf, quantile_map
from .pruning import AttentionTrace, PruneMask, RedundancyPruner, Stage, StageSchedule, flop_estimate, mask_from_scores, merge_masks, run_schedule
from .special import BetaParams, ExpParams, GammaParams, beta_cdf, beta_fn, exp_cdf, gamma_cdf, normal_cdf
from .training import LayerAttentionClassifier, make_dataset, train_toy

__version__ = "0.1.0"
