"""Nonparametric matching functions, latent efficiency and mismatch."""

from .data import (BasePoint, MarketPanel, Observation, SchemaError, ValidationError, BaseLookupError,
                   load_panel, normalize_scales, denormalize, select_base, panel_from_frame, write_panel)
from .estimator import (KernelConfig, EfficiencyDistribution, EfficiencySeries, NoLocalSupportError,
                        conditional_cdf, conditional_quantile, trace_efficiency_distribution,
                        recover_efficiency, evaluate_matching_function, estimate_efficiency)
from .elasticity import (SurrogateCoefficients, DegenerateDesignError, fit_surrogate, elasticity_u,
                         elasticity_v, marginal_hires_du)
from .mismatch import (MarketStateAtT, PlannerSolution, planner_allocate, mismatch_series,
                       cd_mismatch_index, kkt_report)
from .simulation import DgpConfig, generate_cd_dgp, brute_force_allocate, run_bias_experiment
from .diagnostics import residual_independence_check, market_summaries

__version__ = "0.1.0"
