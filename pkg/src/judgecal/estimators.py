"""Policy-value estimators with centred influence-function vectors.

Every estimator returns an :class:`EstimateResult` whose ``if_vector`` has
mean zero and whose ``var_main`` is ``sum(phi**2) / n**2``. Point estimates
use pooled-calibrator rewards; influence functions use out-of-fold rewards.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import Dict, List, Optional, Sequence

import numpy as np

DIRECT = "direct"
SNIPS = "snips"
CAL_IPS = "cal_ips"
DR_CPO = "dr_cpo"
STACKED_DR = "stacked_dr"
ESTIMATORS = (DIRECT, SNIPS, CAL_IPS, DR_CPO, STACKED_DR)


class EstimatorUnavailable(RuntimeError):
    """Raised when an estimator's inputs (weights, fresh draws) are missing."""


def if_hash(phi) -> str:
    return hashlib.sha256(np.ascontiguousarray(phi, dtype="<f8").tobytes()).hexdigest()


def _z(level: float) -> float:
    return NormalDist().inv_cdf(0.5 + level / 2.0)


@dataclass
class EstimateResult:
    policy: str
    estimator: str
    value: float
    if_vector: np.ndarray
    x_ids: List[str]
    var_main: float
    var_cal: Optional[float] = None
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    level: float = 0.95
    components: Dict[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.if_vector)

    @property
    def var_total(self) -> float:
        return self.var_main + (self.var_cal or 0.0)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_total))

    def with_var_cal(self, var_cal: Optional[float]) -> "EstimateResult":
        """Copy with calibration variance added and the interval widened accordingly."""
        out = replace(self, var_cal=var_cal)
        half = _z(self.level) * out.se
        out.ci_low, out.ci_high = self.value - half, self.value + half
        return out

    def to_jsonable(self, include_if: bool = False) -> dict:
        out = {
            "policy": self.policy,
            "estimator": self.estimator,
            "value": self.value,
            "n": self.n,
            "var_main": self.var_main,
            "var_cal": self.var_cal,
            "var_total": self.var_total,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "components": dict(sorted(self.components.items())),
            "if_hash": if_hash(self.if_vector),
        }
        if include_if:
            out["x_ids"] = list(self.x_ids)
            out["if_vector"] = self.if_vector.tolist()
        return out

    @classmethod
    def from_jsonable(cls, obj: dict) -> "EstimateResult":
        return cls(
            policy=obj["policy"],
            estimator=obj["estimator"],
            value=obj["value"],
            if_vector=np.asarray(obj.get("if_vector", []), dtype=float),
            x_ids=list(obj.get("x_ids", [])),
            var_main=obj["var_main"],
            var_cal=obj["var_cal"],
            ci_low=obj["ci_low"],
            ci_high=obj["ci_high"],
            level=obj["level"],
            components=dict(obj["components"]),
        )


def make_result(policy, estimator, value, raw_if, x_ids, level=0.95, components=None) -> EstimateResult:
    """Centre ``raw_if``, compute ``var_main`` and a main-variance-only interval."""
    raw_if = np.asarray(raw_if, dtype=float)
    n = raw_if.size
    if n == 0:
        raise EstimatorUnavailable(f"{estimator} for {policy!r} has no rows")
    phi = raw_if - raw_if.mean()
    res = EstimateResult(
        policy=policy,
        estimator=estimator,
        value=float(value),
        if_vector=phi,
        x_ids=list(x_ids),
        var_main=float(np.sum(phi**2) / n**2),
        level=level,
        components=dict(components or {}),
    )
    return res.with_var_cal(None)


def prompt_means(x_ids: Sequence[str], values) -> tuple:
    """Average ``values`` within each x_id; returns (sorted unique ids, means)."""
    values = np.asarray(values, dtype=float)
    uniq, inverse = np.unique(np.asarray(x_ids, dtype=object).astype(str), return_inverse=True)
    sums = np.bincount(inverse, weights=values, minlength=uniq.size)
    counts = np.bincount(inverse, minlength=uniq.size)
    return [str(u) for u in uniq], sums / counts


def estimate_direct(fresh_x_ids, fresh_rewards, policy: str = "", level: float = 0.95) -> EstimateResult:
    """Mean over prompts of calibrated fresh-draw rewards (averaged within prompt first)."""
    if len(fresh_x_ids) == 0:
        raise EstimatorUnavailable(f"no fresh draws for {policy!r}")
    ids, r = prompt_means(fresh_x_ids, fresh_rewards)
    value = float(r.mean())
    return make_result(policy, DIRECT, value, r, ids, level, {"n_draws": float(len(fresh_x_ids))})


def estimate_ips(
    weights,
    rewards,
    rewards_oof,
    x_ids,
    policy: str = "",
    estimator: str = CAL_IPS,
    level: float = 0.95,
) -> EstimateResult:
    """``mean(W * R)`` with pooled rewards; IF from ``W * R_oof``.

    With mean-one baseline weights this is SNIPS; with calibrated weights
    it is calibrated IPS.
    """
    W = np.asarray(weights, dtype=float)
    R = np.asarray(rewards, dtype=float)
    R_oof = np.asarray(rewards_oof, dtype=float)
    if not (W.size == R.size == R_oof.size == len(x_ids)):
        raise ValueError("weights, rewards and x_ids are misaligned")
    if W.size == 0:
        raise EstimatorUnavailable(f"no weighted rows for {policy!r}")
    value = float(np.mean(W * R))
    return make_result(policy, estimator, value, W * R_oof, x_ids, level)


def estimate_dr_cpo(
    weights,
    rewards,
    rewards_oof,
    q_oof,
    g_values,
    x_ids,
    policy: str = "",
    level: float = 0.95,
) -> EstimateResult:
    """Doubly robust estimate ``mean(g) + mean(W * (R - q))``.

    Parameters
    ----------
    weights : array-like
        Calibrated weights on the rows that have both a target log-prob and a fresh draw.
    rewards, rewards_oof : array-like
        Pooled and out-of-fold calibrated rewards of the logged responses.
    q_oof : array-like
        Out-of-fold outcome-model predictions for the logged responses.
    g_values : array-like
        Outcome model averaged over the target's fresh draws at each prompt.
    """
    W, R, R_oof, q, g = (np.asarray(a, dtype=float) for a in (weights, rewards, rewards_oof, q_oof, g_values))
    if not (W.size == R.size == R_oof.size == q.size == g.size == len(x_ids)):
        raise ValueError("DR inputs are misaligned")
    if W.size == 0:
        raise EstimatorUnavailable(f"no rows with both weights and fresh draws for {policy!r}")
    dm = float(g.mean())
    aug = float(np.mean(W * (R - q)))
    raw = g + W * (R_oof - q)
    return make_result(policy, DR_CPO, dm + aug, raw, x_ids, level, {"dm_term": dm, "aug_term": aug})


@dataclass(frozen=True)
class OrthogonalityScore:
    score: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def covers_zero(self) -> bool:
        return self.ci_low <= 0.0 <= self.ci_high

    def to_jsonable(self) -> dict:
        return {
            "score": float(self.score),
            "ci": [float(self.ci_low), float(self.ci_high)],
            "n": int(self.n),
            "covers_zero": bool(self.covers_zero),
        }


def orthogonality_score(weights, r, q, level: float = 0.95) -> OrthogonalityScore:
    """Mean of ``U = W (r - q)`` with a Wald interval from ``Var(U) / n``."""
    U = np.asarray(weights, dtype=float) * (np.asarray(r, dtype=float) - np.asarray(q, dtype=float))
    n = U.size
    if n == 0:
        return OrthogonalityScore(float("nan"), float("nan"), float("nan"), 0)
    mean = float(U.mean())
    half = _z(level) * float(np.std(U, ddof=1 if n > 1 else 0)) / np.sqrt(n)
    return OrthogonalityScore(mean, mean - half, mean + half, n)
