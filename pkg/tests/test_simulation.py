import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from cusprv.cusp import ControlPoint, density, normalization_constant
from cusprv.errors import ConfigError, NumericalError
from cusprv.estimation import BaselineFit
from cusprv.simulation import (Replication, SimConfig, monte_carlo_study, simulate_covariates,
                               simulate_cusp_path, simulate_replication, simulate_volatility,
                               summarize)


class TestConfig:
    def test_feller_rejected(self):
        with pytest.raises(ConfigError, match="Feller"):
            SimConfig(kappa=1.0, omega=0.04, gamma=0.5)

    def test_feller_boundary_accepted(self):
        SimConfig(kappa=3.125, omega=0.04, gamma=0.5)  # 2*kappa*omega == gamma**2

    @pytest.mark.parametrize("kw", [{"T": 99}, {"substeps": 9}, {"n_reps": 0},
                                    {"alpha": (1.0,), "beta": (1.0,)},
                                    {"normalization": "nope"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SimConfig(**kw)

    def test_round_trip(self):
        cfg = SimConfig(T=200, n_reps=3, seed=9)
        assert SimConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            SimConfig.from_dict({"bogus": 1})

    def test_restricted_spec_from_truth(self):
        specs = SimConfig().specs()
        r = specs["cusp_restricted"]
        assert r.alpha_names == ["x1"] and r.beta_names == ["x2"]
        assert specs["cusp_unrestricted"].n_params == 8


class TestVolatility:
    def test_deterministic_mean_reversion(self):
        cfg = SimConfig(gamma=0.0, substeps=1000)
        v = simulate_volatility(cfg, np.random.default_rng(0), n=4, v0=0.1)
        want = cfg.omega + (0.1 - cfg.omega) * np.exp(-cfg.kappa * np.arange(4))
        np.testing.assert_allclose(v - cfg.omega, want - cfg.omega, rtol=0.05)

    def test_stationary_moments(self):
        cfg = SimConfig(substeps=100)
        v = simulate_volatility(cfg, np.random.default_rng(1), n=20000)
        assert 0.036 <= v.mean() <= 0.044
        target = cfg.gamma**2 * cfg.omega / (2 * cfg.kappa)
        assert v.var() == pytest.approx(target, rel=0.2)
        assert np.all(v > 0)


class TestCuspPath:
    def test_deterministic_limit(self):
        cfg = SimConfig(alpha=(5.0, 0.0), beta=(0.0, 0.0), time_scale=1.0, substeps=1000)
        y = simulate_cusp_path(cfg, np.zeros((20, 1)), None, noise=False)
        root = optimize.brentq(lambda v: v**3 - 5.0, 0.0, 5.0, xtol=1e-14)
        assert y[-1] == pytest.approx(root, abs=1e-6)
        assert root == pytest.approx(1.710, abs=1e-3)

    def test_stationary_density(self):
        cfg = SimConfig(alpha=(0.0, 0.0), beta=(2.0, 0.0), substeps=1000)
        y = simulate_cusp_path(cfg, np.zeros((4000, 1)), np.random.default_rng(2))
        c = ControlPoint(0.0, 2.0)
        w = normalization_constant(c)
        grid = np.linspace(-4, 4, 4001)
        cdf = integrate.cumulative_trapezoid(density(grid, c, w), grid, initial=0.0)
        emp = np.searchsorted(np.sort(y), grid, side="right") / len(y)
        assert np.max(np.abs(emp - cdf)) < 0.05
        kde = stats.gaussian_kde(y)(grid)
        left = grid[grid < 0][np.argmax(kde[grid < 0])]
        right = grid[grid > 0][np.argmax(kde[grid > 0])]
        assert left == pytest.approx(-math.sqrt(2), abs=0.2)
        assert right == pytest.approx(math.sqrt(2), abs=0.2)

    def test_same_seed_same_path(self):
        cfg = SimConfig()
        x = simulate_covariates(cfg, np.random.default_rng(0), 100)
        a = simulate_cusp_path(cfg, x, np.random.default_rng(5))
        b = simulate_cusp_path(cfg, x, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_coarse_step_diverges_loudly(self):
        cfg = SimConfig(substeps=10, time_scale=50.0)
        with pytest.raises(NumericalError, match="diverged"):
            simulate_cusp_path(cfg, np.zeros((50, 2)), np.random.default_rng(0))

    def test_covariate_shape_checked(self):
        with pytest.raises(ConfigError):
            simulate_cusp_path(SimConfig(), np.zeros((5, 3)), np.random.default_rng(0))


class TestCovariates:
    def test_uniform(self):
        x = simulate_covariates(SimConfig(), np.random.default_rng(3))
        assert x.shape == (1000, 2)
        assert np.all((x >= 0) & (x <= 1))
        np.testing.assert_allclose(x.mean(axis=0), 0.5, atol=0.05)
        assert abs(np.corrcoef(x.T)[0, 1]) < 0.1

    def test_pluggable(self):
        draw = lambda rng, n, k: rng.normal(size=(n, k))
        x = simulate_covariates(SimConfig(), np.random.default_rng(3), 50, draw)
        assert x.shape == (50, 2) and x.min() < 0


class TestReplication:
    def test_returns_are_sigma_times_state(self):
        cfg = SimConfig(T=200, substeps=100)
        sim = simulate_replication(cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(sim.r, np.sqrt(sim.sigma2) * sim.y)
        np.testing.assert_allclose(sim.y_obs, sim.y, rtol=1e-12)
        assert np.all(sim.sigma2 > 0)

    def test_sqrt_sigma_normalization(self):
        cfg = SimConfig(T=200, substeps=100, normalization="sqrt_sigma")
        sim = simulate_replication(cfg, np.random.default_rng(0))
        np.testing.assert_allclose(sim.y_obs, sim.r / sim.sigma2**0.25)


class TestStudy:
    def test_deterministic_across_workers(self):
        cfg = SimConfig(T=150, substeps=200, n_reps=2, seed=4, n_starts=2)
        a = monte_carlo_study(cfg, workers=1)
        b = monte_carlo_study(cfg, workers=2)
        assert a.summary.equals(b.summary)
        assert a.orderings == b.orderings

    def test_single_replication_has_no_sd(self):
        cfg = SimConfig(T=150, substeps=200, n_reps=1, n_starts=2)
        out = monte_carlo_study(cfg)
        assert out.summary["sd"].isna().all()
        table = out.table()
        assert not table.apply(lambda col: col.str.contains(r"\(")).any().any()
        assert "y:cusp_restricted" in table.columns and "r:logistic" in table.columns

    def test_non_converged_excluded(self):
        def fit(value, ok):
            return BaselineFit("linear", ["intercept"], np.array([value]), -10.0, 100, 2, 0.5,
                               converged=ok)

        reps = [Replication(0, {"y:linear": fit(1.0, True)}),
                Replication(1, {"y:linear": fit(99.0, False)}),
                Replication(2, {"y:linear": fit(3.0, True)}, errors={"y:cusp_restricted": "x"})]
        summary, _ = summarize(reps)
        row = summary[(summary.group == "y:linear") & (summary.quantity == "intercept")].iloc[0]
        assert row["mean"] == 2.0 and row["n"] == 2 and row["n_failed"] == 1
        failed = summary[summary.group == "y:cusp_restricted"].iloc[0]
        assert failed["n"] == 0 and failed["n_failed"] == 3
