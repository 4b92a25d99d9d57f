import json

import numpy as np
import pytest

from cusprv.errors import ConfigError, DataError
from cusprv.estimation import CuspFit, fit_cusp
from cusprv.rolling import (RollingPlan, RollingResult,
                            bifurcation_series, bimodal_fraction, rolling_fit, window_seed)
from cusprv.rv import DailyPanel

from .helpers import RESTRICTED, TRUE_RESTRICTED, simulated_panel


@pytest.fixture(scope="module")
def panel():
    return simulated_panel(300, seed=21)


def quick_plan(**kw):
    kw.setdefault("n_starts", 2)
    return RollingPlan(RESTRICTED, **kw)


class TestPlan:
    @pytest.mark.parametrize("window,step", [(59, 10), (100, 0), (60, 60), (60, 90)])
    def test_invalid(self, window, step):
        with pytest.raises(ConfigError):
            RollingPlan(RESTRICTED, window, step)

    def test_defaults(self):
        plan = RollingPlan(RESTRICTED)
        assert (plan.window_days, plan.step_days) == (126, 21)

    def test_window_count_three_years(self):
        assert len(RollingPlan(RESTRICTED).starts(756)) == (756 - 126) // 21 + 1 == 31

    def test_from_dict(self):
        plan = RollingPlan.from_dict({"window_days": 80, "step_days": 5,
                                      "spec": RESTRICTED.to_dict()})
        assert plan.spec == RESTRICTED and plan.window_days == 80
        assert RollingPlan.from_dict(plan.to_dict()) == plan
        with pytest.raises(ConfigError):
            RollingPlan.from_dict({"window_days": 80})
        with pytest.raises(ConfigError):
            RollingPlan.from_dict({"windows": 3}, RESTRICTED)


class TestRollingFit:
    def test_one_window(self, panel):
        res = rolling_fit(panel.slice(0, 126), quick_plan())
        assert len(res.windows) == 1
        assert res.windows[0].n_obs == 126 and res.windows[0].n_dropped == 0

    def test_window_plus_step(self, panel):
        assert len(rolling_fit(panel.slice(0, 147), quick_plan()).windows) == 2

    def test_too_short(self, panel):
        with pytest.raises(DataError):
            rolling_fit(panel.slice(0, 100), quick_plan())

    def test_anchors_and_coverage(self, panel):
        plan = quick_plan(window_days=100, step_days=40)
        res = rolling_fit(panel, plan)
        starts = [w.start for w in res.windows]
        assert starts == [0, 40, 80, 120, 160, 200]
        assert np.all(np.diff(starts) == plan.step_days)
        assert [w.anchor for w in res.windows] == [panel.dates[s + 99] for s in starts]
        assert starts[0] == 0 and starts[-1] + plan.window_days <= len(panel)

    def test_window_matches_standalone_fit(self, panel):
        plan = quick_plan(window_days=100, step_days=99, warm_start=False)
        res = rolling_fit(panel, plan, seed=3)
        for w in res.windows:
            alone = fit_cusp(panel.slice(w.start, w.start + 100), RESTRICTED,
                             seed=window_seed(3, w.index), n_starts=2)
            assert alone.params.tobytes() == w.cusp.params.tobytes()

    def test_warm_start_chain(self, panel):
        plan = quick_plan(window_days=100, step_days=99)
        res = rolling_fit(panel, plan, seed=3)
        prev = res.windows[0].cusp.params
        second = res.windows[1]
        alone = fit_cusp(panel.slice(99, 199), RESTRICTED, prev, seed=window_seed(3, 1),
                         n_starts=2)
        assert alone.params.tobytes() == second.cusp.params.tobytes()

    def test_workers_do_not_change_results(self, panel):
        plan = quick_plan(window_days=100, step_days=99, warm_start=False)
        a = rolling_fit(panel, plan, seed=1, workers=1).to_frame()
        b = rolling_fit(panel, plan, seed=1, workers=2).to_frame()
        assert a.equals(b)

    def test_shift_equivariance(self, panel):
        plan = quick_plan(window_days=100, step_days=99)
        shifted = panel.shift_dates(10)
        a = rolling_fit(panel, plan, seed=2)
        b = rolling_fit(shifted, plan, seed=2)
        for wa, wb in zip(a.windows, b.windows):
            assert wb.anchor == wa.anchor + np.timedelta64(10, "D")
            assert wa.cusp.params.tobytes() == wb.cusp.params.tobytes()
            assert wa.logistic.bic == wb.logistic.bic

    def test_missing_rows_dropped_and_recorded(self, panel):
        y = panel.ret_norm.copy()
        y[[5, 17]] = np.nan
        holed = DailyPanel(panel.dates, panel.ret, panel.rv, y, panel.covariates)
        res = rolling_fit(holed.slice(0, 126), quick_plan())
        assert res.windows[0].n_obs == 124 and res.windows[0].n_dropped == 2

    def test_failures_are_flagged_not_dropped(self):
        # constant state: cusp degenerate, linear fine
        p = DailyPanel.from_arrays(np.ones(130), {"x1": np.linspace(0, 1, 130),
                                                  "x2": np.linspace(1, 0, 130) ** 2})
        res = rolling_fit(p, quick_plan())
        assert len(res.windows) == 1
        w = res.windows[0]
        assert not w.converged and not w.cusp_wins

    def test_outputs_serialise(self, panel):
        res = rolling_fit(panel.slice(0, 147), quick_plan())
        frame = res.to_frame()
        for col in ["anchor", "alpha_x1", "abs_z_alpha_x1", "loglik_cusp", "aic_linear",
                    "bic_logistic", "bimodal_fraction", "converged"]:
            assert col in frame.columns
        json.dumps(res.to_json_dict(), allow_nan=False, default=float)


class TestBifurcation:
    def test_negative_beta_gives_zero(self, panel):
        params = np.array([0.0, 1.0, 1.0, 0.5, -2.0, -1.0])
        nan = np.full(6, np.nan)
        fit = CuspFit(RESTRICTED, params, nan, nan, 0.0, len(panel), np.nan, True)
        assert bimodal_fraction(fit, panel) == 0.0

    def test_true_coefficients_count(self, panel):
        x1, x2 = panel.covariates["x1"], panel.covariates["x2"]
        alpha, beta = -2 + 3 * x1, -1 + 4 * x2
        oracle = np.mean(alpha**2 / 4 - beta**3 / 27 < 0)
        nan = np.full(6, np.nan)
        fit = CuspFit(RESTRICTED, TRUE_RESTRICTED, nan, nan, 0.0, len(panel), np.nan, True)
        assert bimodal_fraction(fit, panel) == oracle
        assert oracle > 0.3

    def test_fitted_cusp_window(self, panel):
        window = panel.slice(0, 126)
        res = rolling_fit(window, quick_plan())
        series = bifurcation_series(res)
        w0, w1, a0, a1, b0, b2 = res.windows[0].cusp.params
        alpha = a0 + a1 * window.covariates["x1"]
        beta = b0 + b2 * window.covariates["x2"]
        oracle = np.mean(alpha**2 / 4 - beta**3 / 27 < 0)
        assert res.windows[0].converged
        assert series.iloc[0] == oracle and oracle > 0.1
        assert series.index[0] == str(panel.dates[125])

    def test_empty(self):
        with pytest.raises(DataError):
            bifurcation_series(RollingResult(quick_plan(), []))
