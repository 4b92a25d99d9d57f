import numpy as np

from cusprv.estimation import CuspSpec
from cusprv.simulation import SimConfig, simulate_replication

RESTRICTED = CuspSpec(("x1", "x2"), (True, False), (False, True))
FULL = CuspSpec.full(("x1", "x2"))
# omega0, omega1, alpha_0, alpha_x1, beta_0, beta_x2
TRUE_RESTRICTED = np.array([0.0, 1.0, -2.0, 3.0, -1.0, 4.0])


def simulated_panel(T=1000, seed=0, **kw):
    cfg = SimConfig(T=T, n_reps=1, **kw)
    sim = simulate_replication(cfg, np.random.default_rng(seed))
    return sim.panel(cfg.covariate_names)


def regime_switch_panel(n_half=378, seed=0, noise_sd=1.0):
    """First half cusp-generated, second half linear-Gaussian in the same covariates."""
    rng = np.random.default_rng(seed)
    cfg = SimConfig(T=n_half, n_reps=1)
    first = simulate_replication(cfg, rng)
    x2 = rng.uniform(size=(n_half, 2))
    y2 = -0.5 + 1.0 * x2[:, 0] + 1.0 * x2[:, 1] + rng.normal(0.0, noise_sd, n_half)
    x = np.vstack([first.x, x2])
    y = np.concatenate([first.y_obs, y2])
    from cusprv.rv import DailyPanel

    return DailyPanel.from_arrays(y, {"x1": x[:, 0], "x2": x[:, 1]})
