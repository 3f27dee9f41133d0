"""Cross-fitted, mean-preserving reward calibration with automatic mode selection.

Two candidate calibrators map a judge score ``S`` (and optional covariates)
to a reward on the oracle scale:

* ``monotone``: isotonic regression of ``Y`` on ``S``;
* ``two_stage``: a ridge-penalised additive natural-spline index
  ``g(S, X)``, converted to mid-ranks on the training sample, followed by
  isotonic regression of ``Y`` on those ranks.

Both end in an isotonic step, so in-sample predictions reproduce the
oracle-slice mean exactly. The mode is chosen from out-of-fold RMSE with a
one-standard-error preference for ``monotone``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .isotonic import IsotonicFit, ecdf_midranks, pava_fit

MONOTONE = "monotone"
TWO_STAGE = "two_stage"
AUTO = "auto"

DEFAULT_RIDGE = 1e-3
KNOT_QUANTILES = (0.10, 0.30, 0.50, 0.70, 0.90)


class InsufficientLabelsError(ValueError):
    def __init__(self, have: int, need: int, detail: str = ""):
        self.have = have
        self.need = need
        msg = f"need at least {need} oracle labels, have {have}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


def _spline_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Restricted (natural) cubic spline basis: ``x`` plus ``len(knots) - 2`` cubic terms."""
    cols = [x]
    k = len(knots)
    if k >= 3:
        t_last, t_pen = knots[-1], knots[-2]
        scale = (t_last - knots[0]) ** 2
        for tj in knots[:-2]:
            h = (
                np.maximum(x - tj, 0) ** 3
                - np.maximum(x - t_pen, 0) ** 3 * (t_last - tj) / (t_last - t_pen)
                + np.maximum(x - t_last, 0) ** 3 * (t_pen - tj) / (t_last - t_pen)
            )
            cols.append(h / scale)
    return np.column_stack(cols)


@dataclass(frozen=True)
class FirstStageIndex:
    """Additive natural-spline index fitted by ridge least squares."""

    feature_names: tuple
    centers: np.ndarray
    scales: np.ndarray
    knots: tuple
    coefficients: np.ndarray
    ridge_lambda: float = DEFAULT_RIDGE

    @classmethod
    def fit(cls, F: np.ndarray, y: np.ndarray, feature_names: Sequence[str], ridge_lambda: float = DEFAULT_RIDGE):
        centers = F.mean(axis=0)
        scales = F.std(axis=0)
        scales = np.where(scales > 0, scales, 1.0)
        Fs = (F - centers) / scales
        knots = []
        for j in range(F.shape[1]):
            kj = np.unique(np.quantile(Fs[:, j], KNOT_QUANTILES))
            knots.append(kj if len(kj) >= 3 else kj[:0])
        tmp = cls(tuple(feature_names), centers, scales, tuple(knots), np.zeros(0), ridge_lambda)
        B = tmp._design(Fs)
        penalty = np.full(B.shape[1], ridge_lambda)
        penalty[0] = 0.0
        A = B.T @ B + np.diag(penalty)
        coef = np.linalg.lstsq(A, B.T @ y, rcond=None)[0]
        return cls(tuple(feature_names), centers, scales, tuple(knots), coef, ridge_lambda)

    def _design(self, Fs: np.ndarray) -> np.ndarray:
        blocks = [np.ones((Fs.shape[0], 1))]
        for j, kj in enumerate(self.knots):
            blocks.append(_spline_basis(Fs[:, j], kj))
        return np.hstack(blocks)

    def predict(self, F: np.ndarray) -> np.ndarray:
        Fs = (np.asarray(F, dtype=float) - self.centers) / self.scales
        return self._design(Fs) @ self.coefficients

    def to_jsonable(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "centers": self.centers.tolist(),
            "scales": self.scales.tolist(),
            "knots": [k.tolist() for k in self.knots],
            "coefficients": self.coefficients.tolist(),
            "ridge_lambda": self.ridge_lambda,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "FirstStageIndex":
        return cls(
            feature_names=tuple(obj["feature_names"]),
            centers=np.asarray(obj["centers"], dtype=float),
            scales=np.asarray(obj["scales"], dtype=float),
            knots=tuple(np.asarray(k, dtype=float) for k in obj["knots"]),
            coefficients=np.asarray(obj["coefficients"], dtype=float),
            ridge_lambda=float(obj["ridge_lambda"]),
        )


@dataclass(frozen=True)
class FittedMap:
    """One fitted calibrator: optional first-stage index, rank table, isotonic map."""

    iso: IsotonicFit
    index: Optional[FirstStageIndex] = None
    z_train: Optional[np.ndarray] = None

    def predict(self, S: np.ndarray, X: Optional[np.ndarray]) -> np.ndarray:
        if self.index is None:
            return self.iso.predict(S)
        z = self.index.predict(_features(S, X, len(self.index.feature_names) - 1))
        return self.iso.predict(ecdf_midranks(self.z_train, z))

    def to_jsonable(self) -> dict:
        out = {"isotonic": self.iso.to_jsonable()}
        if self.index is not None:
            out["first_stage"] = self.index.to_jsonable()
            out["z_train"] = self.z_train.tolist()
        return out

    @classmethod
    def from_jsonable(cls, obj: dict) -> "FittedMap":
        if "first_stage" not in obj:
            return cls(iso=IsotonicFit.from_jsonable(obj["isotonic"]))
        return cls(
            iso=IsotonicFit.from_jsonable(obj["isotonic"]),
            index=FirstStageIndex.from_jsonable(obj["first_stage"]),
            z_train=np.asarray(obj["z_train"], dtype=float),
        )


def _features(S, X, n_cov: int) -> np.ndarray:
    S = np.asarray(S, dtype=float).reshape(-1, 1)
    if n_cov == 0:
        return S
    X = np.asarray(X, dtype=float).reshape(S.shape[0], -1)
    if X.shape[1] != n_cov:
        raise ValueError(f"expected {n_cov} covariate columns, got {X.shape[1]}")
    return np.hstack([S, X])


def _fit_map(mode: str, S, Y, X, names: Sequence[str], ridge_lambda: float) -> FittedMap:
    if mode == MONOTONE:
        return FittedMap(iso=pava_fit(S, Y))
    F = _features(S, X, len(names))
    index = FirstStageIndex.fit(F, Y, ("S",) + tuple(names), ridge_lambda)
    z = index.predict(F)
    iso = pava_fit(ecdf_midranks(z, z), Y)
    return FittedMap(iso=iso, index=index, z_train=np.sort(z))


@dataclass
class CalibratorModel:
    mode: str
    K: int
    per_fold_fits: Dict[int, FittedMap]
    pooled_fit: FittedMap
    covariate_names: List[str]
    oof_rmse: Dict[str, float] = field(default_factory=dict)
    oof_rmse_se: Dict[str, float] = field(default_factory=dict)
    oof_rmse_tertiles: Dict[str, List[float]] = field(default_factory=dict)
    oracle_S_range: tuple = (0.0, 1.0)
    n_labels: int = 0

    def _X(self, X, n):
        if not self.covariate_names:
            return None
        if X is None:
            raise ValueError(f"calibrator needs covariates {self.covariate_names}")
        return np.asarray(X, dtype=float).reshape(n, len(self.covariate_names))

    def predict(self, S, X=None) -> np.ndarray:
        """Pooled-fit rewards (used for point estimates)."""
        S = np.asarray(S, dtype=float)
        return self.pooled_fit.predict(S, self._X(X, S.size))

    def predict_oof(self, S, X, fold_ids) -> np.ndarray:
        """Out-of-fold rewards: row ``i`` uses the fit that excluded fold ``fold_ids[i]``."""
        S = np.asarray(S, dtype=float)
        Xm = self._X(X, S.size)
        fold_ids = np.asarray(fold_ids, dtype=int)
        out = np.empty(S.size)
        for k in np.unique(fold_ids):
            if k not in self.per_fold_fits:
                raise ValueError(f"fold {k} outside [0, {self.K})")
            rows = fold_ids == k
            out[rows] = self.per_fold_fits[k].predict(S[rows], None if Xm is None else Xm[rows])
        return out

    def to_jsonable(self) -> dict:
        body = {
            "mode": self.mode,
            "K": self.K,
            "covariate_names": list(self.covariate_names),
            "oof_rmse": dict(sorted(self.oof_rmse.items())),
            "oof_rmse_se": dict(sorted(self.oof_rmse_se.items())),
            "oof_rmse_tertiles": dict(sorted(self.oof_rmse_tertiles.items())),
            "oracle_S_range": list(self.oracle_S_range),
            "n_labels": self.n_labels,
            "pooled_fit": self.pooled_fit.to_jsonable(),
            "per_fold_fits": {str(k): v.to_jsonable() for k, v in sorted(self.per_fold_fits.items())},
        }
        body["content_hash"] = content_hash(body)
        return body

    @classmethod
    def from_jsonable(cls, obj: dict) -> "CalibratorModel":
        return cls(
            mode=obj["mode"],
            K=int(obj["K"]),
            per_fold_fits={int(k): FittedMap.from_jsonable(v) for k, v in obj["per_fold_fits"].items()},
            pooled_fit=FittedMap.from_jsonable(obj["pooled_fit"]),
            covariate_names=list(obj["covariate_names"]),
            oof_rmse=dict(obj["oof_rmse"]),
            oof_rmse_se=dict(obj["oof_rmse_se"]),
            oof_rmse_tertiles=dict(obj["oof_rmse_tertiles"]),
            oracle_S_range=tuple(obj["oracle_S_range"]),
            n_labels=int(obj["n_labels"]),
        )


def content_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def fit_autocal(
    S,
    Y,
    fold_ids,
    K: int,
    X=None,
    covariate_names: Sequence[str] = (),
    use_covariates: bool = True,
    mode: str = AUTO,
    ridge_lambda: float = DEFAULT_RIDGE,
) -> CalibratorModel:
    """Fit the cross-fitted reward calibrator on an oracle slice.

    Parameters
    ----------
    S, Y : array-like of shape (m,)
        Judge scores and oracle labels of the labeled rows.
    fold_ids : array-like of int, shape (m,)
        Cross-fitting fold of each labeled row, in ``[0, K)``.
    X : array-like of shape (m, p), optional
        Covariates for the two-stage index, columns named by ``covariate_names``.
    use_covariates : bool
        If False the two-stage index is a spline in ``S`` alone.
    mode : {"auto", "monotone", "two_stage"}
        ``"auto"`` fits both candidates per fold and selects by OOF RMSE;
        otherwise the given mode is fitted without selection.

    Raises
    ------
    InsufficientLabelsError
        With fewer than ``2 * K`` labels, or when some fold would train on
        fewer than two labels.
    """
    S = np.asarray(S, dtype=float)
    Y = np.asarray(Y, dtype=float)
    fold_ids = np.asarray(fold_ids, dtype=int)
    m = S.size
    if Y.shape != S.shape or fold_ids.shape != S.shape:
        raise ValueError("S, Y and fold_ids must have equal length")
    if m < 2 * K:
        raise InsufficientLabelsError(m, 2 * K)
    names = list(covariate_names) if use_covariates else []
    Xm = None
    if names:
        if X is None:
            raise ValueError("covariate_names given but X is None")
        Xm = np.asarray(X, dtype=float).reshape(m, -1)[:, : len(names)]
    modes = [MONOTONE, TWO_STAGE] if mode == AUTO else [mode]
    if any(md not in (MONOTONE, TWO_STAGE) for md in modes):
        raise ValueError(f"unknown calibration mode {mode!r}")

    fits = {md: {} for md in modes}
    oof = {md: np.full(m, np.nan) for md in modes}
    for k in range(K):
        train = fold_ids != k
        test = ~train
        if train.sum() < 2:
            raise InsufficientLabelsError(int(train.sum()), 2, f"training set without fold {k}")
        for md in modes:
            fit = _fit_map(md, S[train], Y[train], None if Xm is None else Xm[train], names, ridge_lambda)
            fits[md][k] = fit
            if test.any():
                oof[md][test] = fit.predict(S[test], None if Xm is None else Xm[test])

    rmse = {md: _rmse(oof[md], Y) for md in modes}
    present = [k for k in range(K) if np.any(fold_ids == k)]
    se = {}
    for md in modes:
        per_fold = [_rmse(oof[md][fold_ids == k], Y[fold_ids == k]) for k in present]
        se[md] = float(np.std(per_fold, ddof=1) / np.sqrt(len(per_fold))) if len(per_fold) > 1 else 0.0
    cuts = np.quantile(S, [1 / 3, 2 / 3])
    tertile = np.searchsorted(cuts, S, side="right")
    tertiles = {
        md: [_rmse(oof[md][tertile == t], Y[tertile == t]) if np.any(tertile == t) else float("nan") for t in range(3)]
        for md in modes
    }

    if mode == AUTO:
        chosen = TWO_STAGE if rmse[TWO_STAGE] < rmse[MONOTONE] - se[TWO_STAGE] else MONOTONE
    else:
        chosen = mode
    pooled = _fit_map(chosen, S, Y, Xm, names, ridge_lambda)
    return CalibratorModel(
        mode=chosen,
        K=K,
        per_fold_fits=fits[chosen],
        pooled_fit=pooled,
        covariate_names=names if chosen == TWO_STAGE else [],
        oof_rmse=rmse,
        oof_rmse_se=se,
        oof_rmse_tertiles=tertiles,
        oracle_S_range=(float(S.min()), float(S.max())),
        n_labels=m,
    )


def refit_minus_oracle_fold(
    model: CalibratorModel,
    S,
    Y,
    fold_ids,
    excluded_fold: int,
    X=None,
    oracle_fold_ids=None,
    ridge_lambda: float = DEFAULT_RIDGE,
) -> CalibratorModel:
    """Refit ``model``'s mode on the oracle slice without one oracle fold.

    ``oracle_fold_ids`` defines the jackknife partition (defaults to the
    cross-fitting folds). The mode chosen on the full slice is kept.
    """
    S = np.asarray(S, dtype=float)
    Y = np.asarray(Y, dtype=float)
    fold_ids = np.asarray(fold_ids, dtype=int)
    groups = fold_ids if oracle_fold_ids is None else np.asarray(oracle_fold_ids, dtype=int)
    keep = groups != excluded_fold
    if not keep.any():
        raise InsufficientLabelsError(0, 2 * model.K, f"oracle fold {excluded_fold} holds every label")
    Xk = None
    if model.covariate_names:
        Xk = np.asarray(X, dtype=float).reshape(S.size, -1)[keep]
    return fit_autocal(
        S[keep],
        Y[keep],
        fold_ids[keep],
        model.K,
        X=Xk,
        covariate_names=model.covariate_names,
        use_covariates=bool(model.covariate_names),
        mode=model.mode,
        ridge_lambda=ridge_lambda,
    )


def predict_reward(model: CalibratorModel, S: float, covariates: Optional[dict] = None, which="pooled") -> float:
    """Reward for a single row; ``which`` is ``"pooled"`` or an integer fold index."""
    covariates = covariates or {}
    unknown = set(covariates) - set(model.covariate_names)
    if unknown and model.covariate_names:
        raise ValueError(f"unknown covariates {sorted(unknown)}")
    X = None
    if model.covariate_names:
        missing = [c for c in model.covariate_names if c not in covariates]
        if missing:
            raise ValueError(f"missing covariates {missing}")
        X = np.array([[covariates[c] for c in model.covariate_names]])
    if which == "pooled":
        return float(model.predict([S], X)[0])
    k = int(which)
    if not 0 <= k < model.K:
        raise ValueError(f"fold {k} outside [0, {model.K})")
    return float(model.predict_oof([S], X, [k])[0])
