"""Shape-constrained primitives: PAVA, mean-one isotonic projection, ECDF mid-ranks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INCREASING = "increasing"
DECREASING = "decreasing"


def _check_direction(direction: str) -> str:
    if direction not in (INCREASING, DECREASING):
        raise ValueError(f"direction must be 'increasing' or 'decreasing', got {direction!r}")
    return direction


def pava_blocks(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Nondecreasing least-squares fit to ``y`` (already in x-order) with weights ``w``.

    Classic stack-based pool-adjacent-violators; blocks keep weighted sums
    rather than running means so the weighted mean is preserved to rounding.
    """
    sums = []
    wts = []
    counts = []
    for yi, wi in zip(y.tolist(), w.tolist()):
        s, ww, c = yi * wi, wi, 1
        while sums and sums[-1] / wts[-1] > s / ww:
            s += sums.pop()
            ww += wts.pop()
            c += counts.pop()
        sums.append(s)
        wts.append(ww)
        counts.append(c)
    levels = np.asarray(sums) / np.asarray(wts)
    return np.repeat(levels, counts)


@dataclass(frozen=True)
class IsotonicFit:
    """Monotone piecewise-linear map fitted by PAVA.

    ``breakpoints`` are the distinct training inputs in ascending order and
    ``levels`` the fitted values there. Between breakpoints predictions are
    linear interpolations, which keeps them monotone without the downward
    bias of a step rule. Inputs outside the training range take the nearest
    end level.
    """

    breakpoints: np.ndarray
    levels: np.ndarray
    direction: str = INCREASING

    def predict(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=float), self.breakpoints, self.levels)

    def to_jsonable(self) -> dict:
        return {
            "direction": self.direction,
            "breakpoints": self.breakpoints.tolist(),
            "levels": self.levels.tolist(),
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "IsotonicFit":
        return cls(
            breakpoints=np.asarray(obj["breakpoints"], dtype=float),
            levels=np.asarray(obj["levels"], dtype=float),
            direction=obj["direction"],
        )


def pava_fit(x, y, weights=None, direction: str = INCREASING) -> IsotonicFit:
    """Weighted isotonic regression of ``y`` on ``x``.

    Parameters
    ----------
    x, y : array-like of shape (n,)
    weights : array-like of shape (n,), optional
        Positive observation weights (default all ones).
    direction : {"increasing", "decreasing"}
        A decreasing fit is the increasing fit on ``-x``.

    Returns
    -------
    IsotonicFit
        Tied ``x`` values are pooled into one block before fitting, so the
        result does not depend on the input order of ties.
    """
    _check_direction(direction)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"x and y must be 1-D of equal length, got {x.shape} and {y.shape}")
    if x.size == 0:
        raise ValueError("pava_fit needs at least one observation")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape:
        raise ValueError("weights must match y in length")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")

    u = x if direction == INCREASING else -x
    ux, inverse = np.unique(u, return_inverse=True)
    wsum = np.bincount(inverse, weights=w)
    ysum = np.bincount(inverse, weights=w * y)
    levels = pava_blocks(ysum / wsum, wsum)
    if direction == DECREASING:
        return IsotonicFit(breakpoints=-ux[::-1], levels=levels[::-1], direction=direction)
    return IsotonicFit(breakpoints=ux, levels=levels, direction=direction)


def iso_mean_one_project(w, s, direction: str = INCREASING, exact: bool = False) -> np.ndarray:
    """Project weights onto vectors monotone in ``s`` with sample mean one.

    Weights are first scaled to mean one (only their ratios matter). By
    default the isotonic fit is then rescaled multiplicatively
    (``fit / mean``). With ``exact=True`` the constrained projection is used:
    PAVA on ``w - mean(w) + 1`` (an additive shift), clipped at zero,
    followed by one multiplicative re-normalisation. In sample the two
    coincide; they differ when the fit is evaluated out of fold.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    mean = w.mean()
    if mean <= 0:
        raise ValueError("weights are all zero; mean-one projection is undefined")
    w = w / mean
    target = w - w.mean() + 1.0 if exact else w
    out = pava_fit(s, target, direction=direction).predict(s)
    if exact:
        out = np.maximum(out, 0.0)
    return out / out.mean()


def monotonicity_violation(values, s, direction: str = INCREASING) -> float:
    """Largest backwards step of ``values`` along the ``s`` order (0 if monotone)."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(np.asarray(s, dtype=float), kind="stable")
    v = values[order]
    if direction == DECREASING:
        v = -v
    if v.size < 2:
        return 0.0
    drops = v[:-1] - v[1:]
    return float(max(drops.max(), 0.0))


def ecdf_midranks(z_train, z_query) -> np.ndarray:
    """Mid-rank ECDF of ``z_train`` evaluated at ``z_query``.

    ``(#{train < u} + 0.5 * #{train == u}) / n``, clamped to ``(0, 1]``; a
    query below the whole sample maps to ``0.5 / n``.
    """
    train = np.sort(np.asarray(z_train, dtype=float))
    if train.size == 0:
        raise ValueError("ecdf_midranks needs a nonempty training sample")
    q = np.asarray(z_query, dtype=float)
    less = np.searchsorted(train, q, side="left")
    leq = np.searchsorted(train, q, side="right")
    n = train.size
    u = (less + 0.5 * (leq - less)) / n
    return np.clip(u, 0.5 / n, 1.0)
