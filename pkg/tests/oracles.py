"""Reference values frozen from independent derivations.

test_oracles.py recomputes every entry by a route that shares no code with
the package (sympy, mpmath, scipy.stats), so a drift in either place shows up.
"""

import math

E = math.e

FROZEN = {
    # mass of e^{-|x|} over [0, 1]
    "exp_decay_mass_unit": 0.63212055882855768,
    # integral of u^2 e^{-u} over [0, 1] = 2 - 5/e
    "exp_decay_u2_unit": 0.16060279414278839,
    # mean of the exponential law truncated to [0, 5]
    "truncated_exp_mean_5": 0.96608172546847884,
    # 2 (1.5 log 1.5 - 0.5)
    "entropy_theta_half_lambda_two": 0.21639532432449315,
    # -log E exp(-c N), N ~ Poisson(1)
    "lhs_count_c1": 0.63212055882855768,
    "lhs_count_c2": 0.86466471676338731,
    # minimizing tilt e^{-c} - 1
    "theta_star_c1": -0.63212055882855768,
    "theta_star_c2": -0.86466471676338731,
    # E exp(-N), N ~ Poisson(1.5)
    "generating_fn_theta_half": 0.38744520825312426,
    # exact 1% critical value of the one-sample KS statistic at n = 10^4
    "ks_crit_1pct_1e4": 0.016259280113043572,
}


def tilted_dual_count(theta: float, lam: float = 1.0, c: float = 1.0) -> float:
    """c lam (1+theta) + lam [(1+theta) log(1+theta) - theta]."""
    return c * lam * (1 + theta) + lam * ((1 + theta) * math.log1p(theta) - theta)


def quadratic_projection(f_u: float, past_pairing: float, future_mean: float) -> float:
    """Conditional mean of D <f,mu>^2 at a fresh point with f-value f_u."""
    return (2.0 * (past_pairing + future_mean) + f_u) * f_u
