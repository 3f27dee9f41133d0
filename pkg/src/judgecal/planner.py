"""Minimum detectable effects and oracle/surrogate budget allocation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import NormalDist

BALANCED = "balanced"
UNDER_LABELED = "under_labeled"
OVER_LABELED = "over_labeled"

RATE_CAVEAT = (
    "The calibration variance is modelled as sigma2_cal / m. Isotonic calibration converges "
    "more slowly than root-m in general, so treat the allocation as a first-order guide."
)


def mde(se: float, power: float = 0.8, level: float = 0.95) -> float:
    """Smallest difference between two policies detectable by a two-sided test.

    ``(z_power + z_{(1+level)/2}) * sqrt(2) * se``.
    """
    if se < 0:
        raise ValueError("se must be nonnegative")
    nd = NormalDist()
    return (nd.inv_cdf(power) + nd.inv_cdf(0.5 + level / 2.0)) * math.sqrt(2.0) * se


@dataclass
class BudgetPlan:
    n_star: float
    m_star: float
    ratio: float
    feasible: bool
    spend_balance_omega: float
    variance: float
    budget: float
    c_S: float
    c_Y: float
    policies: int = 1
    caveat: str = RATE_CAVEAT

    def to_jsonable(self) -> dict:
        return asdict(self)


def _plan(c_S, c_Y, sigma2_eval, sigma2_cal, B, P) -> BudgetPlan:
    for name, v in (("c_S", c_S), ("c_Y", c_Y), ("sigma2_eval", sigma2_eval), ("B", B)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if sigma2_cal < 0:
        raise ValueError("sigma2_cal must be nonnegative")
    if P < 1:
        raise ValueError("P must be >= 1")
    cs = P * c_S
    a = math.sqrt(sigma2_eval * cs)
    b = math.sqrt(sigma2_cal * c_Y)
    n = B * math.sqrt(sigma2_eval / cs) / (a + b)
    m = B * math.sqrt(sigma2_cal / c_Y) / (a + b)
    feasible = m <= n
    if not feasible:
        # Every surrogate row gets an oracle label.
        n = m = B / (cs + c_Y)
    var = sigma2_eval / n + (sigma2_cal / m if m > 0 else 0.0)
    omega = (sigma2_cal / m) / var if m > 0 else 0.0
    return BudgetPlan(n, m, m / n, feasible, omega, var, B, c_S, c_Y, P)


def allocate_budget(c_S: float, c_Y: float, sigma2_eval: float, sigma2_cal: float, B: float) -> BudgetPlan:
    """Variance-minimising surrogate count ``n*`` and oracle count ``m*`` under ``c_S n + c_Y m = B``.

    ``m*/n* = sqrt(c_S/c_Y) * sqrt(sigma2_cal/sigma2_eval)``; when that
    exceeds one the plan labels every row (``m = n = B / (c_S + c_Y)``).
    """
    return _plan(c_S, c_Y, sigma2_eval, sigma2_cal, B, 1)


def allocate_budget_multi_policy(c_S, c_Y, sigma2_eval, sigma2_cal, B, P: int) -> BudgetPlan:
    """Allocation when ``P`` policies share one oracle slice; surrogate cost scales by ``P``."""
    return _plan(c_S, c_Y, sigma2_eval, sigma2_cal, B, int(P))


def spend_balance_check(omega: float, spend_oracle: float, spend_surrogate: float, tol: float = 0.05) -> str:
    """Compare the calibration share of variance with the oracle share of spend.

    Under the square-root law these shares coincide at the optimum, so
    ``omega`` above the spend share (by more than ``tol``) means more
    labels would pay off.
    """
    if not 0 <= omega < 1:
        raise ValueError("omega must lie in [0, 1)")
    if spend_oracle < 0 or spend_surrogate < 0 or spend_oracle + spend_surrogate == 0:
        raise ValueError("spends must be nonnegative and not both zero")
    share = spend_oracle / (spend_oracle + spend_surrogate)
    if omega > share + tol:
        return UNDER_LABELED
    if omega < share - tol:
        return OVER_LABELED
    return BALANCED


def variances_from_run(var_main: float, n: int, var_cal: float, m: int) -> tuple:
    """Per-unit variances ``(sigma2_eval, sigma2_cal) = (n var_main, m var_cal)`` from a finished run."""
    return n * var_main, m * var_cal
