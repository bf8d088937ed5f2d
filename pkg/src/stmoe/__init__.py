"""Spatiotemporal mixture-of-experts crowd-flow forecasting."""

from .errors import ConfigError, DataError, NumericalError, StmoeError
from .eval_stats import match_experts_to_patterns, metrics, pairwise_expert_quade, quade_pvalue
from .flow_core import (FlowSeries, GridSpec, NormStats, compute_inflow_outflow, encode_external,
                        minmax_apply, minmax_fit, minmax_invert)
from .fusion import FusionConfig, build_sample, make_dataset, prepare_dataset
from .losses import (LossConfig, build_V, inter_discrepancy_loss, responsibility_loss,
                     responsibility_loss_general, total_loss)
from .model import ModelConfig, STExpertNet, build_model, forward_no_gs, forward_no_gt, model_forward
from .synthgen import builtin_city, generate
from .training import TrainConfig, finite_diff_check, fit, grid_search, train

__version__ = "0.1.0"
