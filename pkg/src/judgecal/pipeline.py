"""End-to-end evaluation: calibrate, weight, estimate, stack, OUA, diagnose.

The numerical core works on plain arrays (:class:`EvalData`) so the same
code path serves JSONL datasets and in-memory simulations.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import estimators as est
from .calibration import AUTO, CalibratorModel, content_hash, fit_autocal, refit_minus_oracle_fold
from .data import Dataset, FoldMap, fold_hash
from .diagnostics import (
    DiagnosticsReport,
    GateThresholds,
    bhattacharyya_affinity,
    chi_square_binned,
    chi_square_weights,
    cle_factor,
    coverage_badge,
    ess,
    evaluate_gates,
    hill_tail_index,
    judge_reliability_ece,
    max_weight_share,
    transport_test,
    ttc,
)
from .inference import OuaTrace, if_stack, jackknife_variance, stacked_leave_out
from .weights import ABSOLUTE, WeightSet, mean_one_weights, simcal_calibrate

ALL_ESTIMATORS = (est.DIRECT, est.SNIPS, est.CAL_IPS, est.DR_CPO, est.STACKED_DR)
STACK_MEMBERS = (est.DIRECT, est.CAL_IPS, est.DR_CPO)


@dataclass
class RunConfig:
    logs: Optional[str] = None
    tf_cache: List[str] = field(default_factory=list)
    fresh_draws: List[str] = field(default_factory=list)
    out_dir: str = "artifacts"
    K: int = 5
    rho: float = 1.0
    guard_mode: str = ABSOLUTE
    exact_projection: bool = False
    include_baseline: bool = True
    weight_ridge: Optional[float] = None
    stack_ridge: float = 0.0
    calibration_mode: str = AUTO
    use_covariates: bool = True
    covariates: List[str] = field(default_factory=lambda: ["response_length"])
    calibration_ridge: float = 1e-3
    oua: bool = True
    oua_folds: Optional[int] = None
    level: float = 0.95
    eps_additivity: float = 1e-6
    estimators: List[str] = field(default_factory=lambda: list(ALL_ESTIMATORS))
    bins: int = 20
    thresholds: GateThresholds = field(default_factory=GateThresholds)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.thresholds, dict):
            self.thresholds = GateThresholds(**self.thresholds)
        if isinstance(self.tf_cache, str):
            self.tf_cache = [self.tf_cache]
        if isinstance(self.fresh_draws, str):
            self.fresh_draws = [self.fresh_draws]
        unknown = set(self.estimators) - set(ALL_ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")

    def to_jsonable(self) -> dict:
        return asdict(self)

    @classmethod
    def from_jsonable(cls, obj: dict) -> "RunConfig":
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonable(json.load(fh))


@dataclass
class PolicyData:
    name: str
    idx: np.ndarray
    log_w: np.ndarray
    surprisal_logged: Optional[np.ndarray] = None
    fresh_x_ids: List[str] = field(default_factory=list)
    fresh_S: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fresh_X: Optional[np.ndarray] = None
    fresh_folds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    fresh_Y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fresh_surprisal: Optional[np.ndarray] = None

    def __post_init__(self):
        # Prompt-level grouping of fresh draws and its join with the weighted rows.
        ids = np.asarray(self.fresh_x_ids, dtype=object).astype(str)
        self._uniq, self._inverse = np.unique(ids, return_inverse=True)
        self._counts = np.bincount(self._inverse, minlength=self._uniq.size)

    @property
    def has_weights(self) -> bool:
        return self.idx.size > 0

    @property
    def has_fresh(self) -> bool:
        return len(self.fresh_x_ids) > 0

    def prompt_mean(self, values) -> np.ndarray:
        return np.bincount(self._inverse, weights=values, minlength=self._uniq.size) / self._counts

    def dr_join(self, x_ids: Sequence[str]) -> tuple:
        """Positions in ``idx`` with fresh draws and their positions among the fresh prompts."""
        logged_ids = np.asarray(x_ids, dtype=object)[self.idx].astype(str)
        pos = np.searchsorted(self._uniq, logged_ids)
        pos = np.clip(pos, 0, max(self._uniq.size - 1, 0))
        hit = self._uniq.size > 0
        ok = (self._uniq[pos] == logged_ids) if hit else np.zeros(logged_ids.size, dtype=bool)
        return np.flatnonzero(ok), pos[ok]


@dataclass
class EvalData:
    x_ids: List[str]
    S: np.ndarray
    Y: np.ndarray
    labeled: np.ndarray
    fold_ids: np.ndarray
    K: int
    X: Optional[np.ndarray]
    covariate_names: List[str]
    policies: Dict[str, PolicyData]
    n_dropped: Dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.S.size

    def oracle_slice(self):
        L = self.labeled
        return self.S[L], self.Y[L], self.fold_ids[L], (None if self.X is None else self.X[L])


def eval_data_from_dataset(ds: Dataset, covariates: Sequence[str] = ()) -> EvalData:
    names = [c for c in covariates if all(c in r.covariates for r in ds.records)]
    X = ds.covariate_matrix(names) if names else None
    policies = {}
    for p in ds.policies:
        idx, log_w = ds.log_ratios(p)
        _, lp, tok = ds.target_logp(p)
        fresh = ds.fresh_arrays(p, [c for c in names if all(c in d.covariates for d in ds.fresh_draws.get(p, []))])
        fX = fresh["X"] if names and fresh["X"].shape[1] == len(names) else None
        surprisal_f = -fresh["logp"] / fresh["tokens"]
        policies[p] = PolicyData(
            name=p,
            idx=idx,
            log_w=log_w,
            surprisal_logged=(-lp / tok) if idx.size else None,
            fresh_x_ids=fresh["x_ids"],
            fresh_S=fresh["S"],
            fresh_X=fX,
            fresh_folds=fresh["folds"],
            fresh_Y=fresh["Y"],
            fresh_surprisal=surprisal_f if np.any(np.isfinite(surprisal_f)) else None,
        )
    return EvalData(
        x_ids=ds.x_ids,
        S=ds.S,
        Y=ds.Y,
        labeled=ds.labeled,
        fold_ids=ds.fold_ids,
        K=ds.folds.K,
        X=X,
        covariate_names=names,
        policies=policies,
        n_dropped={p: ds.n - v.idx.size for p, v in policies.items()},
    )


def eval_data_from_sim(sim, K: int = 5, use_length: bool = True) -> EvalData:
    """Build :class:`EvalData` straight from simulation arrays (no JSON round trip)."""
    folds = FoldMap(K).assign(sim.x_ids)
    X = sim.tokens.astype(float)[:, None] if use_length else None
    all_idx = np.arange(len(sim.x_ids))
    policies = {}
    for name in sorted(set(sim.logp_target) | set(sim.fresh)):
        lp = sim.logp_target.get(name)
        f = sim.fresh.get(name)
        kwargs = {}
        if f is not None:
            kwargs = dict(
                fresh_x_ids=list(sim.x_ids),
                fresh_S=f["S"],
                fresh_X=f["tokens"].astype(float)[:, None] if use_length else None,
                fresh_folds=folds,
                fresh_Y=f["Y"],
                fresh_surprisal=-f["logp"] / f["tokens"],
            )
        policies[name] = PolicyData(
            name=name,
            idx=all_idx if lp is not None else np.zeros(0, dtype=int),
            log_w=(lp - sim.logp0) if lp is not None else np.zeros(0),
            surprisal_logged=(-lp / sim.tokens) if lp is not None else None,
            **kwargs,
        )
    return EvalData(
        x_ids=list(sim.x_ids),
        S=sim.S,
        Y=sim.Y,
        labeled=sim.labeled,
        fold_ids=folds,
        K=K,
        X=X,
        covariate_names=["response_length"] if use_length else [],
        policies=policies,
    )


def fit_calibrator(data: EvalData, cfg: RunConfig) -> CalibratorModel:
    S, Y, folds, X = data.oracle_slice()
    return fit_autocal(
        S,
        Y,
        folds,
        data.K,
        X=X,
        covariate_names=data.covariate_names,
        use_covariates=cfg.use_covariates and bool(data.covariate_names),
        mode=cfg.calibration_mode,
        ridge_lambda=cfg.calibration_ridge,
    )


def _X_for(cal: CalibratorModel, X):
    return X if cal.covariate_names else None


@dataclass
class PolicyOutput:
    estimates: Dict[str, est.EstimateResult] = field(default_factory=dict)
    weights: Dict[str, WeightSet] = field(default_factory=dict)
    orthogonality: Optional[est.OrthogonalityScore] = None
    stack: Optional[object] = None
    unavailable: Dict[str, str] = field(default_factory=dict)


def estimate_policy(data: EvalData, pol: PolicyData, cal: CalibratorModel, cfg: RunConfig, wanted=None) -> PolicyOutput:
    """All requested estimators for one policy under calibrator ``cal``."""
    wanted = set(cfg.estimators if wanted is None else wanted)
    if est.STACKED_DR in wanted:
        wanted |= set(STACK_MEMBERS)
    out = PolicyOutput()
    X_all = _X_for(cal, data.X)
    need_logged = wanted & {est.SNIPS, est.CAL_IPS, est.DR_CPO}
    if need_logged:
        R = cal.predict(data.S, X_all)
        R_oof = cal.predict_oof(data.S, X_all, data.fold_ids)
    ids = np.asarray(data.x_ids, dtype=object)
    wkw = dict(
        K=data.K,
        rho=cfg.rho,
        include_baseline=cfg.include_baseline,
        ridge=cfg.weight_ridge,
        guard_mode=cfg.guard_mode,
        exact=cfg.exact_projection,
        policy=pol.name,
    )

    if est.DIRECT in wanted or est.DR_CPO in wanted:
        if not pol.has_fresh:
            for e in {est.DIRECT, est.DR_CPO} & wanted:
                out.unavailable[e] = "no fresh draws"
        else:
            fX = _X_for(cal, pol.fresh_X)
            if est.DIRECT in wanted:
                r_f = cal.predict(pol.fresh_S, fX)
                out.estimates[est.DIRECT] = est.estimate_direct(pol.fresh_x_ids, r_f, pol.name, cfg.level)

    if need_logged & {est.SNIPS, est.CAL_IPS}:
        if not pol.has_weights:
            for e in need_logged & {est.SNIPS, est.CAL_IPS}:
                out.unavailable[e] = "no target log-probabilities"
        else:
            idx = pol.idx
            w_m1 = mean_one_weights(pol.log_w)
            x_sub = list(ids[idx])
            if est.SNIPS in wanted:
                out.estimates[est.SNIPS] = est.estimate_ips(w_m1, R[idx], R_oof[idx], x_sub, pol.name, est.SNIPS, cfg.level)
            if est.CAL_IPS in wanted:
                ws = simcal_calibrate(w_m1, data.S[idx], R[idx], data.fold_ids[idx], x_ids=x_sub, log_w=pol.log_w, **wkw)
                out.weights[est.CAL_IPS] = ws
                out.estimates[est.CAL_IPS] = est.estimate_ips(
                    ws.w_calibrated, R[idx], R_oof[idx], x_sub, pol.name, est.CAL_IPS, cfg.level
                )

    if est.DR_CPO in wanted and pol.has_fresh:
        if not pol.has_weights:
            out.unavailable[est.DR_CPO] = "no target log-probabilities"
        else:
            rows, g_pos = pol.dr_join(data.x_ids)
            if rows.size == 0:
                out.unavailable[est.DR_CPO] = "no prompt has both weights and fresh draws"
            else:
                idx = pol.idx[rows]
                fX = _X_for(cal, pol.fresh_X)
                g = pol.prompt_mean(cal.predict_oof(pol.fresh_S, fX, pol.fresh_folds))[g_pos]
                q = R_oof[idx]
                w_m1 = mean_one_weights(pol.log_w[rows])
                x_sub = list(ids[idx])
                ws = simcal_calibrate(w_m1, data.S[idx], R[idx] - q, data.fold_ids[idx], x_ids=x_sub, log_w=pol.log_w[rows], **wkw)
                out.weights[est.DR_CPO] = ws
                out.estimates[est.DR_CPO] = est.estimate_dr_cpo(
                    ws.w_calibrated, R[idx], R_oof[idx], q, g, x_sub, pol.name, cfg.level
                )
                lab = data.labeled[idx]
                out.orthogonality = est.orthogonality_score(ws.w_calibrated[lab], data.Y[idx][lab], q[lab], cfg.level)

    if est.STACKED_DR in wanted:
        members = [out.estimates[e] for e in STACK_MEMBERS if e in out.estimates]
        if len(members) >= 2:
            try:
                st = if_stack(members, ridge=cfg.stack_ridge, align=True)
                out.stack = st
                out.estimates[est.STACKED_DR] = st.as_estimate(pol.name, cfg.level)
            except ValueError as exc:
                out.unavailable[est.STACKED_DR] = str(exc)
        else:
            out.unavailable[est.STACKED_DR] = "fewer than two stack members available"
    return out


def oracle_fold_ids(data: EvalData, cfg: RunConfig) -> np.ndarray:
    """Jackknife groups of the labeled rows (the cross-fitting folds unless ``oua_folds`` is set)."""
    L = data.labeled
    if not cfg.oua_folds or cfg.oua_folds == data.K:
        return data.fold_ids[L]
    ids = np.asarray(data.x_ids, dtype=object)[L]
    return np.array([fold_hash(str(x), cfg.oua_folds) for x in ids], dtype=int)


@dataclass
class RunResult:
    calibrator: CalibratorModel
    outputs: Dict[str, PolicyOutput]
    oua: Dict[str, Dict[str, OuaTrace]] = field(default_factory=dict)
    diagnostics: Dict[str, DiagnosticsReport] = field(default_factory=dict)
    gates: Dict[str, object] = field(default_factory=dict)
    transport: Dict[str, object] = field(default_factory=dict)


def run_oua(data: EvalData, cal: CalibratorModel, outputs: Dict[str, PolicyOutput], cfg: RunConfig):
    """Delete-one-oracle-fold refits; fills ``var_cal`` on every estimate and returns the traces."""
    S, Y, folds, X = data.oracle_slice()
    groups = oracle_fold_ids(data, cfg)
    present = sorted(set(groups.tolist()))
    sizes = [int(np.sum(groups == k)) for k in present]
    leave_out = {p: {e: [] for e in o.estimates if e != est.STACKED_DR} for p, o in outputs.items()}
    for k in present:
        try:
            cal_k = refit_minus_oracle_fold(cal, S, Y, folds, k, X=X, oracle_fold_ids=groups, ridge_lambda=cfg.calibration_ridge)
        except Exception as exc:
            raise RuntimeError(f"OUA refit without oracle fold {k} failed: {exc}") from exc
        for p, o in outputs.items():
            wanted = [e for e in o.estimates if e != est.STACKED_DR]
            if not wanted:
                continue
            res = estimate_policy(data, data.policies[p], cal_k, cfg, wanted)
            for e in wanted:
                leave_out[p][e].append(res.estimates[e].value)
    traces = {}
    for p, o in outputs.items():
        traces[p] = {}
        for e, vals in leave_out[p].items():
            r = o.estimates[e]
            traces[p][e] = OuaTrace(vals, sizes, jackknife_variance(vals, sizes, r.value), r.var_main)
            o.estimates[e] = r.with_var_cal(traces[p][e].var_cal)
        if o.stack is not None and est.STACKED_DR in o.estimates:
            members = [traces[p][e] for e in o.stack.estimators]
            vals = stacked_leave_out(o.stack.alpha, members)
            r = o.estimates[est.STACKED_DR]
            traces[p][est.STACKED_DR] = OuaTrace(vals, sizes, jackknife_variance(vals, sizes, r.value), r.var_main)
            o.estimates[est.STACKED_DR] = r.with_var_cal(traces[p][est.STACKED_DR].var_cal)
    return traces


def diagnose_policy(data: EvalData, pol: PolicyData, cal: CalibratorModel, out: PolicyOutput, cfg: RunConfig, n_policies: int) -> DiagnosticsReport:
    rep = DiagnosticsReport(policy=pol.name, n_policies=n_policies)
    if pol.has_weights:
        w_m1 = mean_one_weights(pol.log_w)
        _, frac_raw = ess(w_m1)
        rep.ess_fraction_raw = frac_raw
        ws = out.weights.get(est.CAL_IPS)
        w_used = ws.w_calibrated if ws is not None else w_m1
        _, frac = ess(w_used)
        rep.ess_fraction = frac
        rep.ess_uplift = frac / frac_raw
        rep.max_weight_share = max_weight_share(w_used)
        h = hill_tail_index(w_m1)
        rep.hill_alpha = (h.median, h.iqr)
        if ws is not None:
            rep.guard_fold_share = ws.guard_engaged_share
    else:
        rep.unavailable.append("weights")
    if pol.has_fresh:
        rep.bhattacharyya = bhattacharyya_affinity(data.S, pol.fresh_S, cfg.bins)
        badge = coverage_badge(cal, pol.fresh_S)
        rep.out_of_range = badge.out_of_range
        rep.out_of_range_side = (badge.below, badge.above)
        rep.boundary_flat = badge.boundary_flat
    else:
        rep.unavailable.append("fresh_draws")
    if pol.has_weights and pol.fresh_surprisal is not None and pol.surprisal_logged is not None:
        rep.ttc, rep.ttc_threshold = ttc(pol.fresh_surprisal, pol.surprisal_logged)
        in_T_logged = pol.surprisal_logged <= rep.ttc_threshold
        in_T_target = pol.fresh_surprisal <= rep.ttc_threshold
        chi_s, _ = chi_square_binned(pol.fresh_S[in_T_target], data.S[pol.idx][in_T_logged], cfg.bins)
        chi_w = chi_square_weights(np.exp(pol.log_w - pol.log_w.max())[in_T_logged])
        if np.isfinite(chi_s):
            rep.chi_sq, rep.chi_sq_space = chi_s, "score"
        elif np.isfinite(chi_w):
            rep.chi_sq, rep.chi_sq_space = chi_w, "response"
        rep.cle_factor = cle_factor(0.9, rep.ttc, rep.chi_sq or 0.0) if rep.ttc > 0 else float("inf")
    else:
        rep.unavailable.append("ttc")
    if out.orthogonality is not None:
        rep.orthogonality = out.orthogonality.to_jsonable()
    S, Y, folds, X = data.oracle_slice()
    rep.judge_ece = judge_reliability_ece(S, Y, cal.predict_oof(S, _X_for(cal, X), folds))
    return rep


def transport_residuals(data: EvalData, cal: CalibratorModel) -> Dict[str, np.ndarray]:
    """``Y - f(S)`` on fresh draws that carry oracle labels, per policy."""
    out = {}
    for name, pol in data.policies.items():
        if not pol.has_fresh:
            continue
        lab = np.isfinite(pol.fresh_Y)
        if lab.sum() >= 2:
            X = None if pol.fresh_X is None else pol.fresh_X[lab]
            out[name] = pol.fresh_Y[lab] - cal.predict(pol.fresh_S[lab], _X_for(cal, X))
    return out


def evaluate(data: EvalData, cfg: RunConfig, diagnose: bool = True, cal: Optional[CalibratorModel] = None) -> RunResult:
    """Run every stage after ingestion in memory."""
    cal = cal or fit_calibrator(data, cfg)
    outputs = {p: estimate_policy(data, pol, cal, cfg) for p, pol in sorted(data.policies.items())}
    result = RunResult(cal, outputs)
    if cfg.oua:
        result.oua = run_oua(data, cal, outputs, cfg)
    if diagnose:
        residuals = transport_residuals(data, cal)
        extra = {}
        for p in residuals:
            r = outputs[p].estimates.get(est.DIRECT)
            if r is not None and r.var_cal:
                extra[p] = r.var_cal
        result.transport = transport_test(residuals, n_policies=max(1, len(residuals)), extra_var=extra)
        for p, pol in sorted(data.policies.items()):
            rep = diagnose_policy(data, pol, cal, outputs[p], cfg, len(data.policies))
            if p in result.transport:
                rep.transport = result.transport[p].to_jsonable()
            result.diagnostics[p] = rep
            result.gates[p] = evaluate_gates(rep, cfg.thresholds)
    return result


def evaluate_simulation(dgp, cell: int = 0, estimators=(est.DIRECT,), cfg: Optional[RunConfig] = None, diagnose: bool = False):
    """Simulate and evaluate in memory; returns ``({policy: {estimator: EstimateResult}}, truth)``."""
    from .sim import simulate_arrays

    cfg = replace(cfg or RunConfig(), estimators=list(estimators), K=dgp.K)
    sim = simulate_arrays(dgp, cell)
    data = eval_data_from_sim(sim, K=dgp.K, use_length=cfg.use_covariates)
    res = evaluate(data, cfg, diagnose=diagnose)
    return {p: o.estimates for p, o in res.outputs.items()}, sim.truth
