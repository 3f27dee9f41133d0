"""Weight, overlap and judge diagnostics; coverage floor; transport test; gate logic."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

PASS, WARN, FAIL = "pass", "warn", "fail"
_RANK = {PASS: 0, WARN: 1, FAIL: 2}


def ess(weights) -> tuple:
    """``(sum W)**2 / sum W**2`` and its fraction of ``n``."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if w.size == 0 or total <= 0:
        raise ValueError("weights must have a positive sum")
    value = float(total**2 / np.sum(w**2))
    return value, value / w.size


def max_weight_share(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.max() / w.sum())


def default_k_grid(n: int) -> List[int]:
    return sorted({max(10, int(round(p * n))) for p in (0.01, 0.02, 0.03, 0.04, 0.05)})


@dataclass(frozen=True)
class HillResult:
    median: float
    iqr: float
    k_grid: tuple
    alphas: tuple
    shrunk: bool = False


def hill_tail_index(weights, k_grid: Optional[Sequence[int]] = None) -> HillResult:
    """Hill estimate of the upper-tail index over a grid of order statistics.

    For each ``k``, ``1/alpha(k) = mean_{j<=k} log(W_(j) / W_(k+1))`` with
    ``W_(1) >= W_(2) >= ...``. Grid values that need more positive weights
    than are available are dropped (``shrunk=True``).
    """
    w = np.asarray(weights, dtype=float)
    pos = np.sort(w[w > 0])[::-1]
    grid = list(default_k_grid(w.size) if k_grid is None else k_grid)
    usable = [k for k in grid if 1 <= k < pos.size]
    shrunk = len(usable) < len(grid)
    if not usable:
        return HillResult(float("nan"), float("nan"), tuple(), tuple(), True)
    logs = np.log(pos)
    alphas = []
    for k in usable:
        inv = float(np.mean(logs[:k]) - logs[k])
        alphas.append(math.inf if inv <= 0 else 1.0 / inv)
    a = np.array(alphas)
    med = float(np.median(a))
    if np.all(np.isinf(a)):
        iqr = 0.0
    else:
        q75, q25 = np.percentile(a, [75, 25])
        iqr = float(q75 - q25) if np.isfinite(q75 - q25) else math.inf
    return HillResult(med, iqr, tuple(usable), tuple(alphas), shrunk)


def bhattacharyya_affinity(s_logger, s_target, bins: int = 20) -> float:
    """``sum_b sqrt(p_b q_b)`` over equal-width bins on [0, 1]."""
    a = np.asarray(s_logger, dtype=float)
    b = np.asarray(s_target, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    edges = np.linspace(0.0, 1.0, bins + 1)
    p = np.histogram(np.clip(a, 0, 1), edges)[0] / a.size
    q = np.histogram(np.clip(b, 0, 1), edges)[0] / b.size
    return float(min(1.0, np.sum(np.sqrt(p * q))))


def ttc(surprisal_target_on_target, surprisal_target_on_logged, level: float = 0.9) -> tuple:
    """Share of logged rows whose target surprisal is within the target's own ``level`` quantile.

    Returns ``(ttc, threshold)``.
    """
    tt = np.asarray(surprisal_target_on_target, dtype=float)
    tl = np.asarray(surprisal_target_on_logged, dtype=float)
    tt, tl = tt[np.isfinite(tt)], tl[np.isfinite(tl)]
    if tt.size == 0 or tl.size == 0:
        raise ValueError("typicality coverage needs target surprisal on both target and logged responses")
    q = float(np.quantile(tt, level))
    return float(np.mean(tl <= q)), q


def cle_floor(sigma_T: float, alpha: float, beta: float, n: int, chi_sq: float = 0.0) -> float:
    """Standard-error floor ``sigma_T * alpha / sqrt(beta * n) * sqrt(1 + chi_sq)``."""
    if not (0 < alpha <= 1) or beta < 0 or beta > 1 or sigma_T < 0 or chi_sq < 0 or n <= 0:
        raise ValueError("need 0 < alpha <= 1, 0 <= beta <= 1, sigma_T >= 0, chi_sq >= 0, n > 0")
    if beta == 0:
        return math.inf
    return float(sigma_T * alpha / math.sqrt(beta * n) * math.sqrt(1.0 + chi_sq))


def cle_factor(alpha: float, beta: float, chi_sq: float = 0.0) -> float:
    """Floor relative to the ``beta = alpha, chi_sq = 0`` baseline, at least 1."""
    if beta <= 0:
        return math.inf
    return float(max(1.0, math.sqrt(alpha / beta) * math.sqrt(1.0 + chi_sq)))


def chi_square_binned(s_target_in_T, s_logger_in_T, bins: int = 20) -> tuple:
    """Binned chi-square of target vs logger score histograms, both restricted to T.

    Returns ``(chi_sq, uncovered_mass)``; bins with target mass but no logger
    mass are skipped and their target mass reported.
    """
    a = np.asarray(s_target_in_T, dtype=float)
    b = np.asarray(s_logger_in_T, dtype=float)
    if a.size == 0 or b.size == 0:
        return float("nan"), float("nan")
    edges = np.linspace(0.0, 1.0, bins + 1)
    p = np.histogram(np.clip(a, 0, 1), edges)[0] / a.size
    q = np.histogram(np.clip(b, 0, 1), edges)[0] / b.size
    ok = q > 0
    return float(np.sum((p[ok] - q[ok]) ** 2 / q[ok])), float(p[~ok].sum())


def chi_square_weights(weights_in_T) -> float:
    """Chi-square inside T from importance weights: ``mean(W**2) / mean(W)**2 - 1``."""
    w = np.asarray(weights_in_T, dtype=float)
    if w.size == 0 or w.mean() <= 0:
        return float("nan")
    return float(max(0.0, np.mean(w**2) / w.mean() ** 2 - 1.0))


@dataclass(frozen=True)
class CoverageBadge:
    out_of_range: float
    below: float
    above: float
    boundary_flat: tuple

    def to_jsonable(self) -> dict:
        return {
            "out_of_range": self.out_of_range,
            "below": self.below,
            "above": self.above,
            "boundary_flat": list(self.boundary_flat),
        }


def _slope(iso, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    levels = iso.predict(np.array([lo, hi]))
    return float((levels[1] - levels[0]) / (hi - lo))


def coverage_badge(calibrator, target_S, rel_slope_tol: float = 0.1) -> CoverageBadge:
    """Target-score mass outside the oracle range and flatness of the calibrator at both ends.

    An end counts as flat when the slope of the terminal isotonic map over
    its extreme input decile is below ``rel_slope_tol`` times its average
    slope across the whole input range (inputs are scores in monotone mode,
    index mid-ranks in two-stage mode). A map with no overall rise is flat
    at both ends.
    """
    s = np.asarray(target_S, dtype=float)
    lo, hi = calibrator.oracle_S_range
    below = float(np.mean(s < lo)) if s.size else 0.0
    above = float(np.mean(s > hi)) if s.size else 0.0
    iso = calibrator.pooled_fit.iso
    bp = iso.breakpoints
    b_min, b_max = float(bp.min()), float(bp.max())
    d_lo, d_hi = np.quantile(bp, [0.1, 0.9])
    overall = _slope(iso, b_min, b_max)
    if overall <= 0:
        flat = (True, True)
    else:
        cut = rel_slope_tol * overall
        flat = (bool(_slope(iso, b_min, d_lo) <= cut), bool(_slope(iso, d_hi, b_max) <= cut))
    return CoverageBadge(below + above, below, above, flat)


@dataclass(frozen=True)
class TransportResult:
    policy: str
    n: int
    mean_residual: float
    se: float
    p_value: float
    passed: bool
    level: float

    @property
    def direction(self) -> str:
        if self.passed:
            return "none"
        return "surrogate_overstates" if self.mean_residual < 0 else "surrogate_understates"

    def to_jsonable(self) -> dict:
        out = asdict(self)
        out["direction"] = self.direction
        return out


def transport_test(
    residuals: Dict[str, Sequence[float]],
    n_policies: Optional[int] = None,
    alpha: float = 0.05,
    extra_var: Optional[Dict[str, float]] = None,
) -> Dict[str, TransportResult]:
    """One-sample t-test of zero mean residual ``Y - f(S)`` per policy, Bonferroni-corrected.

    ``extra_var`` optionally adds a calibration-variance term to each
    policy's squared standard error. Policies with fewer than two
    residuals are omitted (test unavailable).
    """
    n_pol = n_policies if n_policies is not None else max(1, len(residuals))
    level = alpha / n_pol
    out = {}
    for policy, res in sorted(residuals.items()):
        r = np.asarray(res, dtype=float)
        r = r[np.isfinite(r)]
        m = r.size
        if m < 2:
            continue
        mean = float(r.mean())
        var = float(np.var(r, ddof=1)) / m + (extra_var or {}).get(policy, 0.0)
        se = math.sqrt(var)
        if se == 0:
            p = 1.0 if mean == 0 else 0.0
        else:
            p = float(2 * stats.t.sf(abs(mean) / se, df=m - 1))
        out[policy] = TransportResult(policy, m, mean, se, p, p >= level, level)
    return out


@dataclass
class GateThresholds:
    ess_fraction: float = 0.30
    hill_warn: float = 2.0
    hill_fail: float = 1.0
    bhattacharyya: float = 0.85
    ttc: float = 0.70
    out_of_range: float = 0.05
    cap_fold_share: float = 0.50
    judge_ece: float = 0.05
    max_policies_note: int = 5


@dataclass
class DiagnosticsReport:
    policy: str
    ess_fraction: Optional[float] = None
    ess_fraction_raw: Optional[float] = None
    ess_uplift: Optional[float] = None
    max_weight_share: Optional[float] = None
    hill_alpha: Optional[tuple] = None
    bhattacharyya: Optional[float] = None
    ttc: Optional[float] = None
    ttc_threshold: Optional[float] = None
    cle_factor: Optional[float] = None
    chi_sq: Optional[float] = None
    chi_sq_space: Optional[str] = None
    out_of_range: Optional[float] = None
    boundary_flat: Optional[tuple] = None
    out_of_range_side: Optional[tuple] = None
    orthogonality: Optional[dict] = None
    transport: Optional[dict] = None
    guard_fold_share: Optional[float] = None
    judge_ece: Optional[float] = None
    n_policies: int = 1
    unavailable: List[str] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        out = asdict(self)
        for key in ("hill_alpha", "boundary_flat", "out_of_range_side"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


@dataclass
class GateStatus:
    overlap: str = PASS
    judge: str = PASS
    identification: str = PASS
    dr: str = PASS
    cap: str = PASS
    refuse_level: bool = False
    messages: List[str] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return asdict(self)


def _worse(a: str, b: str) -> str:
    return a if _RANK[a] >= _RANK[b] else b


def judge_reliability_ece(S, Y, R, bins: int = 10) -> float:
    """Expected calibration error of rewards ``R`` against labels ``Y`` over score bins."""
    S, Y, R = (np.asarray(a, dtype=float) for a in (S, Y, R))
    if S.size == 0:
        return float("nan")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, S, side="right") - 1, 0, bins - 1)
    ece = 0.0
    for b in range(bins):
        rows = idx == b
        if rows.any():
            ece += rows.mean() * abs(Y[rows].mean() - R[rows].mean())
    return float(ece)


def evaluate_gates(report: DiagnosticsReport, thresholds: Optional[GateThresholds] = None) -> GateStatus:
    """Map a diagnostics report to pass/warn/fail gates with messages."""
    t = thresholds or GateThresholds()
    g = GateStatus()
    msgs = g.messages

    if report.ttc is not None and report.ttc < t.ttc:
        g.overlap = FAIL
        msgs.append(f"overlap: TTC {report.ttc:.2f} < {t.ttc:.2f}; logs-only IPS expected to fail, prefer Direct over IPS")
    if report.hill_alpha is not None and np.isfinite(report.hill_alpha[0]):
        h = report.hill_alpha[0]
        if h < t.hill_fail:
            g.overlap = FAIL
            msgs.append(f"overlap: Hill tail index {h:.2f} < {t.hill_fail:.1f} (infinite-mean tail)")
        elif h < t.hill_warn:
            g.overlap = _worse(g.overlap, WARN)
            msgs.append(f"overlap: Hill tail index {h:.2f} < {t.hill_warn:.1f} (infinite variance); restrict or use overlap weights")
    if report.ess_fraction is not None and report.ess_fraction < t.ess_fraction:
        g.overlap = _worse(g.overlap, WARN)
        msgs.append(f"overlap: ESS fraction {report.ess_fraction:.2f} < {t.ess_fraction:.2f}")
    if report.bhattacharyya is not None and report.bhattacharyya < t.bhattacharyya:
        g.overlap = _worse(g.overlap, WARN)
        msgs.append(f"overlap: score affinity {report.bhattacharyya:.2f} < {t.bhattacharyya:.2f}")

    if report.judge_ece is not None and np.isfinite(report.judge_ece) and report.judge_ece > t.judge_ece:
        g.judge = WARN
        msgs.append(f"judge: reliability error {report.judge_ece:.3f} > {t.judge_ece:.3f}; consider two-stage calibration")

    if report.out_of_range is not None and report.out_of_range > t.out_of_range:
        below, above = report.out_of_range_side or (report.out_of_range, report.out_of_range)
        flat_lo, flat_hi = report.boundary_flat or (True, True)
        flat_side = (below > 0 and flat_lo) or (above > 0 and flat_hi)
        if flat_side:
            g.identification = FAIL
            msgs.append(
                f"identification: {report.out_of_range:.1%} of target scores outside the oracle range with a flat boundary; "
                "report rankings and partial identification only"
            )
        else:
            g.identification = WARN
            msgs.append(f"identification: {report.out_of_range:.1%} of target scores outside the oracle range")
    if report.transport is not None and not report.transport.get("passed", True):
        g.identification = FAIL
        msgs.append(
            f"identification: mean transport test rejects (residual {report.transport['mean_residual']:+.3f}); "
            "recalibrate with target-policy labels"
        )
    g.refuse_level = g.identification == FAIL

    orth = report.orthogonality
    if orth is not None and orth.get("n", 0) > 1 and not orth.get("covers_zero", True):
        g.dr = FAIL
        msgs.append(f"dr: orthogonality score {orth['score']:+.4f} has a CI excluding 0")

    if report.guard_fold_share is not None and report.guard_fold_share > t.cap_fold_share:
        g.cap = WARN
        msgs.append(f"cap: variance guard engaged on {report.guard_fold_share:.0%} of folds")

    if report.n_policies > t.max_policies_note:
        msgs.append(f"multiplicity: {report.n_policies} policies compared; intervals are per-policy, not simultaneous")
    return g
