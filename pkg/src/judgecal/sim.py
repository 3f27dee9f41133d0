"""Synthetic logs with analytically known policy values.

Each prompt has a latent effect ``u ~ N(0, tau^2)``. A policy answers with
a response ``A = (q, l, style)``: latent quality ``q ~ N(u + mu, sd^2)``,
length ``l ~ N(mu_l, 1)`` and a nuisance style vector ``style ~ N(s e, I)``
(``e`` the unit diagonal direction). The judge sees
``S = logistic(q + length_bias * l + judge_noise * eps)``; the oracle mean is
a link of quality or of ``S`` plus an optional per-policy level shift, and
``Y`` is Beta-distributed around it.

Log-probabilities are exact Gaussian log-densities (minus a shared constant
and a per-token entropy charge), so importance ratios are exact and
per-token surprisal is available for typicality coverage.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit, roots_hermite
from scipy.stats import norm

from .data import Dataset, attach_fresh_rows, attach_tf_rows, build_dataset, write_jsonl

LINKS = ("probit", "quadratic", "confounded")
MEAN_CLIP = (1e-3, 1.0 - 1e-3)


@dataclass
class PolicySpec:
    name: str
    quality_mean: float = 0.0
    quality_sd: float = 1.0
    length_mean: float = 0.0
    style_shift: float = 0.0
    level_shift: float = 0.0
    # None spreads the style shift evenly over all axes; an int puts it on one axis.
    style_axis: Optional[int] = None

    def style_centre(self, dim: int) -> np.ndarray:
        c = np.zeros(dim)
        if dim == 0:
            return c
        if self.style_axis is None:
            c[:] = self.style_shift / math.sqrt(dim)
        else:
            c[self.style_axis] = self.style_shift
        return c


@dataclass
class SyntheticDGP:
    seed: int = 0
    n: int = 1000
    logger: PolicySpec = field(default_factory=lambda: PolicySpec("base"))
    targets: List[PolicySpec] = field(default_factory=list)
    link: str = "probit"
    link_a: float = 0.0
    link_b: float = 1.0
    quad_c0: float = 0.2
    quad_c1: float = 2.0
    length_effect: float = 0.5
    prompt_sd: float = 0.5
    length_bias: float = 0.0
    judge_noise: float = 0.0
    noise_sd: float = 0.15
    oracle_fraction: float = 0.25
    style_dim: int = 4
    fresh_draws: bool = True
    fresh_oracle_fraction: float = 0.0
    tokens_base: float = 60.0
    tokens_scale: float = 0.1
    entropy_per_token: float = 1.0
    K: int = 5

    def __post_init__(self):
        if isinstance(self.logger, dict):
            self.logger = PolicySpec(**self.logger)
        self.targets = [PolicySpec(**t) if isinstance(t, dict) else t for t in self.targets]
        self.validate()

    def validate(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")
        if not 0 < self.noise_sd < 0.5:
            raise ValueError("noise_sd must lie in (0, 0.5) for Beta outcomes")
        if not 0 <= self.oracle_fraction <= 1 or not 0 <= self.fresh_oracle_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        names = [self.logger.name] + [t.name for t in self.targets]
        if len(set(names)) != len(names):
            raise ValueError("policy names must be unique")
        for p in [self.logger] + self.targets:
            if p.quality_sd <= 0:
                raise ValueError(f"quality_sd of {p.name!r} must be positive")
            if p.style_axis is not None and not 0 <= p.style_axis < self.style_dim:
                raise ValueError(f"style_axis of {p.name!r} must index one of {self.style_dim} style axes")
        if self.style_dim < 0 or self.prompt_sd < 0 or self.judge_noise < 0:
            raise ValueError("style_dim, prompt_sd and judge_noise must be nonnegative")

    @property
    def policies(self) -> List[PolicySpec]:
        return [self.logger] + list(self.targets)

    def to_jsonable(self) -> dict:
        return asdict(self)

    @classmethod
    def from_jsonable(cls, obj: dict) -> "SyntheticDGP":
        obj = dict(obj)
        if isinstance(obj.get("logger"), dict):
            obj["logger"] = PolicySpec(**obj["logger"])
        obj["targets"] = [PolicySpec(**t) if isinstance(t, dict) else t for t in obj.get("targets", [])]
        return cls(**obj)


def rng_for(seed: int, cell: int = 0) -> np.random.Generator:
    """Independent stream per (seed, cell), reproducible regardless of scheduling."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(cell)])))


def _oracle_mean(dgp: SyntheticDGP, q, length, S, shift):
    if dgp.link == "probit":
        m = norm.cdf(dgp.link_a + dgp.link_b * q)
    elif dgp.link == "quadratic":
        m = dgp.quad_c0 + dgp.quad_c1 * (S - 0.5) ** 2
    else:
        m = norm.cdf(dgp.link_a + dgp.link_b * q - dgp.length_effect * length)
    return np.clip(m + shift, *MEAN_CLIP)


def _judge(dgp: SyntheticDGP, q, length, eps):
    return expit(q + dgp.length_bias * length + dgp.judge_noise * eps)


def truth(dgp: SyntheticDGP, policy: PolicySpec, nodes: int = 48) -> float:
    """Exact policy value by tensor Gauss-Hermite quadrature over (q, length, judge noise)."""
    x, w = roots_hermite(nodes)
    z = x * math.sqrt(2.0)
    w = w / math.sqrt(math.pi)
    sd_q = math.sqrt(policy.quality_sd**2 + dgp.prompt_sd**2)
    q = policy.quality_mean + sd_q * z[:, None, None]
    length = policy.length_mean + z[None, :, None]
    eps = z[None, None, :] if dgp.judge_noise > 0 else np.zeros((1, 1, 1))
    we = w if dgp.judge_noise > 0 else np.ones(1)
    S = _judge(dgp, q, length, eps)
    m = _oracle_mean(dgp, q, length, S, policy.level_shift)
    weight = w[:, None, None] * w[None, :, None] * we[None, None, :]
    return float(np.sum(weight * np.broadcast_to(m, weight.shape)))


def truths(dgp: SyntheticDGP) -> Dict[str, float]:
    return {p.name: truth(dgp, p) for p in dgp.policies}


def _log_norm_const(dgp: SyntheticDGP) -> float:
    """Upper bound on the response log-density over all policies (its modal value)."""
    sd_min = min(p.quality_sd for p in dgp.policies)
    return -0.5 * math.log(2 * math.pi * sd_min**2) - 0.5 * (1 + dgp.style_dim) * math.log(2 * math.pi)


@dataclass
class Responses:
    q: np.ndarray
    length: np.ndarray
    style: np.ndarray
    eps: np.ndarray

    @property
    def size(self) -> int:
        return self.q.size


def _draw(rng, dgp: SyntheticDGP, policy: PolicySpec, u: np.ndarray) -> Responses:
    n = u.size
    q = u + policy.quality_mean + policy.quality_sd * rng.standard_normal(n)
    length = policy.length_mean + rng.standard_normal(n)
    style = rng.standard_normal((n, dgp.style_dim))
    if dgp.style_dim:
        style += policy.style_centre(dgp.style_dim)
    eps = rng.standard_normal(n)
    return Responses(q, length, style, eps)


def _tokens(dgp: SyntheticDGP, length: np.ndarray) -> np.ndarray:
    return np.maximum(1, np.round(dgp.tokens_base * np.exp(dgp.tokens_scale * length))).astype(int)


def response_logp(dgp: SyntheticDGP, policy: PolicySpec, u: np.ndarray, resp: Responses) -> np.ndarray:
    """Summed log-probability of ``resp`` under ``policy`` (always <= 0)."""
    lq = norm.logpdf(resp.q, loc=u + policy.quality_mean, scale=policy.quality_sd)
    ll = norm.logpdf(resp.length, loc=policy.length_mean)
    if dgp.style_dim:
        centre = policy.style_centre(dgp.style_dim)
        ls = norm.logpdf(resp.style, loc=centre).sum(axis=1)
    else:
        ls = 0.0
    tokens = _tokens(dgp, resp.length)
    return lq + ll + ls - _log_norm_const(dgp) - dgp.entropy_per_token * tokens


def _beta_draw(rng, mean, noise_sd):
    kappa = 0.25 / noise_sd**2 - 1.0
    return rng.beta(mean * kappa, (1.0 - mean) * kappa)


def _pick(rng, n: int, frac: float) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: int(round(frac * n))]] = True
    return mask


@dataclass
class SimArrays:
    """Column-oriented simulation output (the same content as the JSONL rows)."""

    x_ids: List[str]
    S: np.ndarray
    Y: np.ndarray
    labeled: np.ndarray
    tokens: np.ndarray
    logp0: np.ndarray
    logp_target: Dict[str, np.ndarray]
    fresh: Dict[str, dict]
    truth: Dict[str, float]
    prefix: np.ndarray


def simulate_arrays(dgp: SyntheticDGP, cell: int = 0) -> SimArrays:
    rng = rng_for(dgp.seed, cell)
    n = dgp.n
    u = dgp.prompt_sd * rng.standard_normal(n)
    logged = _draw(rng, dgp, dgp.logger, u)
    S = _judge(dgp, logged.q, logged.length, logged.eps)
    mean_y = _oracle_mean(dgp, logged.q, logged.length, S, dgp.logger.level_shift)
    Y_all = _beta_draw(rng, mean_y, dgp.noise_sd)
    labeled = _pick(rng, n, dgp.oracle_fraction)
    Y = np.where(labeled, Y_all, np.nan)
    tokens = _tokens(dgp, logged.length)
    logp0 = response_logp(dgp, dgp.logger, u, logged)
    prefix = -(5.0 + np.abs(u) * 3.0)
    logp_target = {p.name: response_logp(dgp, p, u, logged) for p in dgp.targets}

    fresh = {}
    if dgp.fresh_draws:
        for p in dgp.targets:
            r = _draw(rng, dgp, p, u)
            s_f = _judge(dgp, r.q, r.length, r.eps)
            y_f = _beta_draw(rng, _oracle_mean(dgp, r.q, r.length, s_f, p.level_shift), dgp.noise_sd)
            lab = _pick(rng, n, dgp.fresh_oracle_fraction)
            fresh[p.name] = {
                "S": s_f,
                "Y": np.where(lab, y_f, np.nan),
                "tokens": _tokens(dgp, r.length),
                "logp": response_logp(dgp, p, u, r),
            }
    x_ids = [f"x{i:06d}" for i in range(n)]
    return SimArrays(x_ids, S, Y, labeled, tokens, logp0, logp_target, fresh, truths(dgp), prefix)


def to_rows(sim: SimArrays) -> dict:
    """JSONL-ready rows: ``{"logs": [...], "tf": [...], "fresh": [...]}``."""
    logs = []
    for i, x in enumerate(sim.x_ids):
        row = {
            "x_id": x,
            "judge_S": float(sim.S[i]),
            "covariates": {"response_length": int(sim.tokens[i])},
            "logp_pi0": float(sim.logp0[i]),
        }
        if sim.labeled[i]:
            row["oracle_Y"] = float(sim.Y[i])
        logs.append(row)
    tf = []
    for name, lp in sim.logp_target.items():
        for i, x in enumerate(sim.x_ids):
            tf.append(
                {
                    "x_id": x,
                    "policy": name,
                    "logp_pi_prime": float(lp[i]),
                    "logp_prefix": float(sim.prefix[i]),
                    "logp_joint": float(sim.prefix[i] + lp[i]),
                    "token_count": int(sim.tokens[i]),
                }
            )
    fresh = []
    for name, f in sim.fresh.items():
        for i, x in enumerate(sim.x_ids):
            row = {
                "x_id": x,
                "policy": name,
                "judge_S": float(f["S"][i]),
                "covariates": {"response_length": int(f["tokens"][i])},
                "logp_target": float(f["logp"][i]),
                "token_count": int(f["tokens"][i]),
            }
            if np.isfinite(f["Y"][i]):
                row["oracle_Y"] = float(f["Y"][i])
            fresh.append(row)
    return {"logs": logs, "tf": tf, "fresh": fresh}


def generate(dgp: SyntheticDGP, cell: int = 0):
    """Simulate one dataset; returns ``(Dataset, truth)`` built through the normal ingestion path."""
    sim = simulate_arrays(dgp, cell)
    rows = to_rows(sim)
    ds = build_dataset(rows["logs"], K=dgp.K)
    if rows["tf"]:
        ds = attach_tf_rows(rows["tf"], ds)
    if rows["fresh"]:
        ds = attach_fresh_rows(rows["fresh"], ds)
    return ds, dict(sim.truth)


def write_simulation(dgp: SyntheticDGP, out_dir, cell: int = 0) -> dict:
    """Write ``logs.jsonl``, ``tf_cache.jsonl``, ``fresh_draws.jsonl`` and ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate_arrays(dgp, cell)
    rows = to_rows(sim)
    write_jsonl(out / "logs.jsonl", rows["logs"])
    write_jsonl(out / "tf_cache.jsonl", rows["tf"])
    write_jsonl(out / "fresh_draws.jsonl", rows["fresh"])
    meta = {"truth": sim.truth, "spec": dgp.to_jsonable(), "cell": cell}
    (out / "truth.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
    return {k: str(out / v) for k, v in (("logs", "logs.jsonl"), ("tf_cache", "tf_cache.jsonl"), ("fresh_draws", "fresh_draws.jsonl"), ("truth", "truth.json"))}


def pairwise_accuracy(estimates: Dict[str, float], truth_values: Dict[str, float]) -> float:
    """Share of policy pairs ordered the same way by estimates and truth (truth ties skipped)."""
    names = sorted(set(estimates) & set(truth_values))
    agree = total = 0
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            dt = truth_values[names[i]] - truth_values[names[j]]
            if dt == 0:
                continue
            de = estimates[names[i]] - estimates[names[j]]
            total += 1
            agree += (de > 0) == (dt > 0) and de != 0
    return agree / total if total else float("nan")


def run_grid(
    template: SyntheticDGP,
    oracle_fractions: Sequence[float],
    sample_sizes: Sequence[int],
    seeds: Sequence[int],
    estimators: Sequence[str] = ("direct",),
    evaluate=None,
    **eval_kwargs,
) -> List[dict]:
    """Per-cell RMSE, pairwise accuracy, CI coverage and OUA share.

    ``evaluate(dgp, cell)`` must return ``{policy: {estimator: EstimateResult}}``
    and ``truth``; the default runs the in-memory pipeline.
    """
    if not oracle_fractions or not sample_sizes or not seeds:
        raise ValueError("grid must be nonempty")
    if evaluate is None:
        from .pipeline import evaluate_simulation

        evaluate = evaluate_simulation
    out = []
    cell = 0
    for frac in oracle_fractions:
        for n in sample_sizes:
            per_est = {e: {"sq": [], "acc": [], "cover": [], "share": []} for e in estimators}
            for seed in seeds:
                dgp = replace(template, seed=int(seed), n=int(n), oracle_fraction=float(frac))
                results, truth_values = evaluate(dgp, cell, estimators=tuple(estimators), **eval_kwargs)
                for e in estimators:
                    vals = {p: r[e] for p, r in results.items() if e in r}
                    if not vals:
                        continue
                    acc = per_est[e]
                    acc["acc"].append(pairwise_accuracy({p: v.value for p, v in vals.items()}, truth_values))
                    for p, v in vals.items():
                        acc["sq"].append((v.value - truth_values[p]) ** 2)
                        acc["cover"].append(v.ci_low <= truth_values[p] <= v.ci_high)
                        if v.var_total > 0:
                            acc["share"].append((v.var_cal or 0.0) / v.var_total)
            for e, acc in per_est.items():
                out.append(
                    {
                        "oracle_fraction": frac,
                        "n": n,
                        "estimator": e,
                        "rmse": float(np.sqrt(np.mean(acc["sq"]))) if acc["sq"] else float("nan"),
                        "pairwise_accuracy": float(np.nanmean(acc["acc"])) if acc["acc"] else float("nan"),
                        "coverage": float(np.mean(acc["cover"])) if acc["cover"] else float("nan"),
                        "oua_share": float(np.mean(acc["share"])) if acc["share"] else float("nan"),
                        "seeds": len(seeds),
                    }
                )
            cell += 1
    return out


@dataclass
class AtomDGP:
    """Discrete action model with known overlap quantities.

    Actions are ``len(p_logger)`` atoms. ``Y | a ~ N(mu[a], sd[a]**2)`` and the
    judge score is ``S = mu[a] + s_noise * eps``. ``region`` marks the atoms
    forming the target-typical set.
    """

    p_logger: Sequence[float]
    p_target: Sequence[float]
    mu: Sequence[float]
    sd: Sequence[float]
    region: Sequence[bool]
    s_noise: float = 0.1

    def __post_init__(self):
        for name in ("p_logger", "p_target", "mu", "sd"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.region = np.asarray(self.region, dtype=bool)
        for p in (self.p_logger, self.p_target):
            if abs(p.sum() - 1.0) > 1e-12 or np.any(p <= 0):
                raise ValueError("atom probabilities must be positive and sum to one")

    @property
    def alpha(self) -> float:
        return float(self.p_target[self.region].sum())

    @property
    def beta(self) -> float:
        return float(self.p_logger[self.region].sum())

    @property
    def chi_sq(self) -> float:
        a = self.p_target[self.region] / self.alpha
        b = self.p_logger[self.region] / self.beta
        return float(np.sum(a**2 / b) - 1.0)

    @property
    def sigma_T(self) -> float:
        return float(self.sd[self.region].min())

    @property
    def value(self) -> float:
        return float(self.p_target @ self.mu)

    def sample(self, rng, n: int) -> dict:
        a = rng.choice(self.p_logger.size, size=n, p=self.p_logger)
        Y = self.mu[a] + self.sd[a] * rng.standard_normal(n)
        S = self.mu[a] + self.s_noise * rng.standard_normal(n)
        W = self.p_target[a] / self.p_logger[a]
        return {"atom": a, "Y": Y, "S": S, "W": W}
