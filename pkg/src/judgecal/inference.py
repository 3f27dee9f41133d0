"""Oracle-uncertainty-aware variance, Wald intervals and influence-function stacking."""
from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .estimators import STACKED_DR, EstimateResult, make_result
from .weights import stack_simplex_qp


def confidence_interval(value: float, var_main: float, var_cal: float = 0.0, level: float = 0.95) -> tuple:
    """Wald interval ``value +/- z * sqrt(var_main + var_cal)``."""
    if var_main < 0 or var_cal < 0:
        raise ValueError("variances must be nonnegative")
    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    half = z * np.sqrt(var_main + var_cal)
    return (value - half, value + half)


def jackknife_variance(leave_out, fold_sizes=None, full_value: Optional[float] = None) -> float:
    """Delete-one-group jackknife variance.

    Equal (or unspecified) group sizes give ``(K-1)/K * sum((V_k - mean)**2)``.
    Unequal sizes use the weighted pseudo-value form: with ``h_k = m / m_k``
    and ``tau_k = h_k V - (h_k - 1) V_k``, the variance is
    ``(1/K) sum (tau_k - V_J)**2 / (h_k - 1)`` where
    ``V_J = K V - sum (1 - m_k/m) V_k``.
    """
    v = np.asarray(leave_out, dtype=float)
    K = v.size
    if K < 2:
        raise ValueError("jackknife needs at least two groups")
    sizes = None if fold_sizes is None else np.asarray(fold_sizes, dtype=float)
    if sizes is None or np.allclose(sizes, sizes[0]) or full_value is None:
        return float((K - 1) / K * np.sum((v - v.mean()) ** 2))
    m = sizes.sum()
    h = m / sizes
    v_j = K * full_value - np.sum((1.0 - sizes / m) * v)
    tau = h * full_value - (h - 1.0) * v
    return float(np.sum((tau - v_j) ** 2 / (h - 1.0)) / K)


@dataclass
class OuaTrace:
    leave_out_estimates: List[float]
    fold_sizes: List[int]
    var_cal: float
    var_main: float = 0.0

    @property
    def K(self) -> int:
        return len(self.leave_out_estimates)

    @property
    def var_total(self) -> float:
        return self.var_main + self.var_cal

    @property
    def oua_share(self) -> float:
        total = self.var_total
        return float(self.var_cal / total) if total > 0 else 0.0

    def to_jsonable(self) -> dict:
        return {
            "leave_out_estimates": list(self.leave_out_estimates),
            "fold_sizes": list(self.fold_sizes),
            "var_cal": self.var_cal,
            "var_main": self.var_main,
            "var_total": self.var_total,
            "oua_share": self.oua_share,
        }


def oua_jackknife(
    pipeline: Callable,
    refit: Callable[[int], object],
    K: int,
    fold_sizes: Optional[Sequence[int]] = None,
    full_value: Optional[float] = None,
    var_main: float = 0.0,
) -> OuaTrace:
    """Calibration variance by refitting without each oracle fold.

    ``refit(k)`` returns the calibrator trained without oracle fold ``k`` and
    ``pipeline(calibrator)`` reruns everything downstream, returning the
    policy value. Errors are re-raised naming the fold.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    values = []
    for k in range(K):
        try:
            values.append(float(pipeline(refit(k))))
        except Exception as exc:
            raise RuntimeError(f"OUA refit without oracle fold {k} failed: {exc}") from exc
    sizes = list(fold_sizes) if fold_sizes is not None else [1] * K
    var_cal = jackknife_variance(values, sizes, full_value)
    return OuaTrace(values, [int(s) for s in sizes], var_cal, var_main)


@dataclass
class StackResult:
    estimators: List[str]
    alpha: np.ndarray
    value: float
    if_vector: np.ndarray
    x_ids: List[str]
    sigma_hat: np.ndarray
    ridge: float

    @property
    def var_main(self) -> float:
        n = self.if_vector.size
        return float(np.sum(self.if_vector**2) / n**2)

    def as_estimate(self, policy: str, level: float = 0.95) -> EstimateResult:
        comps = {f"alpha_{e}": float(a) for e, a in zip(self.estimators, self.alpha)}
        return make_result(policy, STACKED_DR, self.value, self.if_vector, self.x_ids, level, comps)

    def to_jsonable(self) -> dict:
        return {
            "estimators": list(self.estimators),
            "alpha": self.alpha.tolist(),
            "value": self.value,
            "var_main": self.var_main,
            "sigma_hat": self.sigma_hat.tolist(),
            "ridge": self.ridge,
        }


def align_estimates(estimates: Sequence[EstimateResult]) -> tuple:
    """Restrict IF vectors to the x_ids common to all estimates; returns (ids, Phi)."""
    common = set(estimates[0].x_ids)
    for e in estimates[1:]:
        common &= set(e.x_ids)
    ids = sorted(common)
    cols = []
    for e in estimates:
        pos = {x: i for i, x in enumerate(e.x_ids)}
        cols.append(e.if_vector[[pos[x] for x in ids]])
    return ids, np.column_stack(cols) if ids else np.zeros((0, len(estimates)))


def if_stack(estimates: Sequence[EstimateResult], ridge: float = 0.0, align: bool = False) -> StackResult:
    """Convex combination of estimators minimising the empirical IF variance.

    With ``align=False`` all IF vectors must share identical x_id order;
    with ``align=True`` they are restricted to the common x_ids and
    re-centred there.
    """
    if len(estimates) < 2:
        raise ValueError("stacking needs at least two estimators")
    if align:
        ids, Phi = align_estimates(estimates)
        Phi = Phi - Phi.mean(axis=0)
    else:
        lengths = {e.if_vector.size for e in estimates}
        if len(lengths) != 1:
            raise ValueError(f"IF vectors have different lengths {sorted(lengths)}")
        ids = list(estimates[0].x_ids)
        for e in estimates[1:]:
            if list(e.x_ids) != ids:
                raise ValueError("IF vectors are not aligned on the same x_ids")
        Phi = np.column_stack([e.if_vector for e in estimates])
    n = Phi.shape[0]
    if n == 0:
        raise ValueError("no common rows to stack")
    sigma = Phi.T @ Phi / n + ridge * np.eye(Phi.shape[1])
    alpha = stack_simplex_qp(sigma)
    value = float(sum(a * e.value for a, e in zip(alpha, estimates)))
    return StackResult(
        estimators=[e.estimator for e in estimates],
        alpha=alpha,
        value=value,
        if_vector=Phi @ alpha,
        x_ids=ids,
        sigma_hat=sigma,
        ridge=ridge,
    )


def stacked_leave_out(alpha, traces: Sequence[OuaTrace]) -> List[float]:
    """Leave-one-fold values of a stacked estimate with weights held fixed."""
    mat = np.array([t.leave_out_estimates for t in traces], dtype=float)
    return (np.asarray(alpha) @ mat).tolist()


def traces_by_name(leave_out: Dict[str, List[float]], fold_sizes, full_values: Dict[str, float], var_mains: Dict[str, float]):
    return {
        name: OuaTrace(list(v), list(fold_sizes), jackknife_variance(v, fold_sizes, full_values[name]), var_mains[name])
        for name, v in leave_out.items()
    }
