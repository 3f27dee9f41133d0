"""Importance-weight stabilisation: mean-one baseline, monotone OOF projection, simplex stacking, variance guard."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import logsumexp

from .isotonic import DECREASING, INCREASING, monotonicity_violation, pava_fit

ABSOLUTE = "absolute"
RELATIVE = "relative"
RIDGE_CEILING = 1e-4


def mean_one_weights(log_w) -> np.ndarray:
    """Self-normalised weights ``n * exp(log_w) / sum(exp(log_w))``, computed in log space."""
    log_w = np.asarray(log_w, dtype=float)
    if log_w.size == 0:
        raise ValueError("log_w is empty")
    if not np.all(np.isfinite(log_w)):
        raise ValueError("log_w contains non-finite entries; filter them first")
    w = np.exp(log_w - logsumexp(log_w) + np.log(log_w.size))
    return w / w.mean()


def stack_simplex_qp(Sigma, psd_tol: float = 1e-10) -> np.ndarray:
    """Exact minimiser of ``b' Sigma b`` over the probability simplex.

    Every support set is tried; on each face the equality-constrained KKT
    system is solved by least squares (minimum-norm solution when singular)
    and kept if nonnegative. Ties go to the larger support, then to the
    lexicographically first support.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("Sigma must be square")
    d = Sigma.shape[0]
    if d == 0 or d > 12:
        raise ValueError(f"stack_simplex_qp supports 1 <= d <= 12, got {d}")
    Sigma = 0.5 * (Sigma + Sigma.T)
    scale = max(float(np.max(np.abs(np.diag(Sigma)))), 1.0)
    if np.linalg.eigvalsh(Sigma).min() < -psd_tol * scale:
        raise ValueError("Sigma is not positive semidefinite")

    best, best_obj = None, np.inf
    for size in range(d, 0, -1):
        for support in itertools.combinations(range(d), size):
            A = list(support)
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = 2.0 * Sigma[np.ix_(A, A)]
            kkt[:size, size] = 1.0
            kkt[size, :size] = 1.0
            rhs = np.zeros(size + 1)
            rhs[size] = 1.0
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            if np.max(np.abs(kkt @ sol - rhs)) > 1e-8:
                continue
            beta_a = sol[:size]
            if beta_a.min() < -1e-12:
                continue
            beta = np.zeros(d)
            beta[A] = np.maximum(beta_a, 0.0)
            beta /= beta.sum()
            obj = float(beta @ Sigma @ beta)
            # Larger supports are visited first, so a strict improvement is needed to switch.
            if obj < best_obj - 1e-12 * scale:
                best, best_obj = beta, obj
    if best is None:
        raise ValueError("no feasible face found")
    return best


@dataclass
class WeightSet:
    policy: str
    x_ids: List[str]
    log_w: np.ndarray
    w_mean_one: np.ndarray
    w_calibrated: np.ndarray
    stack_beta: np.ndarray
    guard_alpha: float
    guard_engaged: bool
    rho: float
    guard_mode: str = ABSOLUTE
    exact_projection: bool = False
    candidates: tuple = ("baseline", "up", "down")
    sigma: Optional[np.ndarray] = None
    ridge_used: float = 0.0
    fallback: bool = False
    var_stack: float = 0.0
    fold_guard_engaged: List[bool] = field(default_factory=list)
    monotonicity_violation: float = 0.0
    stage_means: Dict[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.w_calibrated)

    @property
    def guard_engaged_share(self) -> float:
        if not self.fold_guard_engaged:
            return float(self.guard_engaged)
        return float(np.mean(self.fold_guard_engaged))

    def to_jsonable(self, include_rows: bool = True) -> dict:
        out = {
            "policy": self.policy,
            "n": self.n,
            "candidates": list(self.candidates),
            "stack_beta": self.stack_beta.tolist(),
            "guard_alpha": self.guard_alpha,
            "guard_engaged": self.guard_engaged,
            "guard_mode": self.guard_mode,
            "rho": self.rho,
            "exact_projection": self.exact_projection,
            "sigma": None if self.sigma is None else self.sigma.tolist(),
            "ridge_used": self.ridge_used,
            "fallback": self.fallback,
            "var_stack": self.var_stack,
            "fold_guard_engaged": list(self.fold_guard_engaged),
            "monotonicity_violation": self.monotonicity_violation,
            "stage_means": dict(sorted(self.stage_means.items())),
        }
        if include_rows:
            out["rows"] = {
                x: {"log_w": float(lw), "w_mean_one": float(m1), "w_calibrated": float(wc)}
                for x, lw, m1, wc in zip(self.x_ids, self.log_w, self.w_mean_one, self.w_calibrated)
            }
        return out


def _project_fold(w_tr, s_tr, s_te, direction, exact):
    """Monotone fit on the training folds, scaled to mean one on train, evaluated on the held-out fold."""
    target = w_tr - w_tr.mean() + 1.0 if exact else w_tr
    fit = pava_fit(s_tr, target, direction=direction)
    train_pred = fit.predict(s_tr)
    test_pred = fit.predict(s_te)
    if exact:
        train_pred = np.maximum(train_pred, 0.0)
        test_pred = np.maximum(test_pred, 0.0)
    mean = train_pred.mean()
    return test_pred / mean if mean > 0 else np.ones_like(test_pred)


def _guard_alpha(var_stack, rho, var_ref, mode):
    cap = rho if mode == ABSOLUTE else rho * var_ref
    if var_stack <= cap or var_stack <= 0:
        return 1.0
    return float(np.sqrt(cap / var_stack))


def simcal_calibrate(
    w_m1,
    S,
    delta,
    fold_ids,
    K: int,
    rho: float = 1.0,
    include_baseline: bool = True,
    ridge: Optional[float] = None,
    guard_mode: str = ABSOLUTE,
    exact: bool = False,
    policy: str = "",
    x_ids: Optional[List[str]] = None,
    log_w=None,
) -> WeightSet:
    """Calibrate mean-one weights against the judge score.

    Parameters
    ----------
    w_m1 : array-like
        Mean-one baseline weights.
    S : array-like
        Judge scores of the same rows.
    delta : array-like
        Residuals used downstream (``R`` for IPS, ``R - q`` for DR).
    fold_ids : array-like of int
        Cross-fitting folds in ``[0, K)``.
    rho : float
        Variance-guard budget.
    ridge : float, optional
        Diagonal ridge on the candidate covariance; defaults to
        ``1e-8 * trace / d`` and escalates by 10x up to ``1e-4`` if needed.
    guard_mode : {"absolute", "relative"}
        ``absolute`` caps ``Var`` at ``rho``; ``relative`` at ``rho * Var(w_m1)``.
    exact : bool
        Use the additive-shift mean-one projection instead of rescaling.
    """
    w_m1 = np.asarray(w_m1, dtype=float)
    S = np.asarray(S, dtype=float)
    delta = np.asarray(delta, dtype=float)
    fold_ids = np.asarray(fold_ids, dtype=int)
    n = w_m1.size
    if not (S.size == n and delta.size == n and fold_ids.size == n):
        raise ValueError("w_m1, S, delta and fold_ids must have equal length")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if guard_mode not in (ABSOLUTE, RELATIVE):
        raise ValueError(f"unknown guard mode {guard_mode!r}")
    if n == 0:
        raise ValueError("no rows to calibrate")

    up = np.empty(n)
    down = np.empty(n)
    for k in range(K):
        test = fold_ids == k
        if not test.any():
            continue
        train = ~test
        if not train.any():
            raise ValueError(f"fold {k} holds every row; cannot cross-fit")
        up[test] = _project_fold(w_m1[train], S[train], S[test], INCREASING, exact)
        down[test] = _project_fold(w_m1[train], S[train], S[test], DECREASING, exact)
    cols, names = [], []
    if include_baseline:
        cols.append(np.ones(n))
        names.append("baseline")
    for name, c in (("up", up), ("down", down)):
        mean = c.mean()
        cols.append(c / mean if mean > 0 else np.ones(n))
        names.append(name)
    C = np.column_stack(cols)
    stage_means = {"mean_one": float(w_m1.mean())}
    stage_means.update({f"candidate_{nm}": float(c.mean()) for nm, c in zip(names, cols)})

    U = C * delta[:, None]
    sigma = np.atleast_2d(np.cov(U, rowvar=False, bias=True))
    d = sigma.shape[0]
    base_ridge = ridge if ridge is not None else 1e-8 * max(np.trace(sigma), 0.0) / d
    lam, beta, fallback = base_ridge, None, False
    while True:
        try:
            beta = stack_simplex_qp(sigma + lam * np.eye(d))
            break
        except ValueError:
            if lam >= RIDGE_CEILING:
                break
            lam = max(lam * 10.0, 1e-12)
            lam = min(lam, RIDGE_CEILING)
    if beta is None:
        fallback = True
        beta = np.zeros(d)
        beta[0] = 1.0

    stack = C @ beta
    stack = stack / stack.mean()
    var_stack = float(np.var(stack))
    var_ref = float(np.var(w_m1))
    alpha = _guard_alpha(var_stack, rho, var_ref, guard_mode)
    blended = 1.0 + alpha * (stack - 1.0)
    w_cal = blended / blended.mean()
    stage_means.update(stacked=float(stack.mean()), blended=float(blended.mean()), calibrated=float(w_cal.mean()))

    fold_flags, violation = [], 0.0
    for k in range(K):
        rows = fold_ids == k
        if rows.any():
            fold_flags.append(_guard_alpha(float(np.var(stack[rows])), rho, var_ref, guard_mode) < 1.0)
            violation = max(
                violation,
                monotonicity_violation(up[rows], S[rows], INCREASING),
                monotonicity_violation(down[rows], S[rows], DECREASING),
            )

    return WeightSet(
        policy=policy,
        x_ids=list(x_ids) if x_ids is not None else [str(i) for i in range(n)],
        log_w=np.log(np.maximum(w_m1, 1e-300)) if log_w is None else np.asarray(log_w, dtype=float),
        w_mean_one=w_m1,
        w_calibrated=w_cal,
        stack_beta=beta,
        guard_alpha=alpha,
        guard_engaged=alpha < 1.0,
        rho=float(rho),
        guard_mode=guard_mode,
        exact_projection=exact,
        candidates=tuple(names),
        sigma=sigma,
        ridge_used=float(lam),
        fallback=fallback,
        var_stack=var_stack,
        fold_guard_engaged=fold_flags,
        monotonicity_violation=violation,
        stage_means=stage_means,
    )
