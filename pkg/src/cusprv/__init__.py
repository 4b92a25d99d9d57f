"""Stochastic cusp catastrophe models for realized-volatility-normalized returns."""

__version__ = "0.1.0"

from .cusp import (ControlPoint, cardan_discriminant, delay_prediction, density, equilibria,
                   log_normalizer_batch, modes, normalization_constant, potential)
from .errors import ConfigError, CuspError, DataError, NonFiniteLikelihood, NumericalError
from .estimation import (CuspFit, CuspSpec, compare_models, fit_cusp, fit_linear,
                         fit_logistic, lr_test, negative_log_likelihood, pseudo_r2)
from .rolling import RollingPlan, RollingResult, bifurcation_series, rolling_fit
from .rv import (CalendarRules, DailyPanel, IntradaySeries, daily_panel, filter_calendar,
                 normalize_returns, read_intraday_csv, realized_variance, resample_to_grid)
from .simulation import SimConfig, monte_carlo_study, simulate_replication
