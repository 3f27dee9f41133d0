"""Acceptance criteria 1-9; each test prints one PASS/FAIL line (also gathered in the terminal summary)."""
import json
import shutil
import time

import numpy as np
import pytest
from scipy.special import logit
from scipy.stats import norm

from judgecal import cli
from judgecal.diagnostics import cle_floor, ess, transport_test
from judgecal.isotonic import pava_fit
from judgecal.pipeline import (
    ALL_ESTIMATORS, RunConfig, estimate_policy, eval_data_from_sim, evaluate, evaluate_simulation,
    fit_calibrator, transport_residuals,
)
from judgecal.planner import allocate_budget
from judgecal.sim import MEAN_CLIP, AtomDGP, PolicySpec, SyntheticDGP, pairwise_accuracy, rng_for, simulate_arrays
from judgecal.weights import simcal_calibrate, stack_simplex_qp

cvxopt = pytest.importorskip("cvxopt")
from cvxopt import matrix, solvers  # noqa: E402

solvers.options.update(show_progress=False, abstol=1e-10, reltol=1e-10, feastol=1e-10, maxiters=200)


# ---------------------------------------------------------------- criterion 1


def _qp_isotonic(x, y, w):
    """Weighted monotone least squares by a generic QP solver, then an exact polish.

    Tied x must share one fitted value, so they are first collapsed to their
    weighted mean (an exact reduction). The interior-point solution is
    accurate to about 1e-6; runs it already equates are replaced by their
    weighted means, which is the exact optimum once the KKT certificate
    passes. The pooling gap is tightened until the certificate holds.
    """
    ux, inv = np.unique(x, return_inverse=True)
    ws = np.bincount(inv, weights=w)
    ys = np.bincount(inv, weights=w * y) / ws
    k = ux.size
    if k == 1:
        levels = ys
    else:
        D = np.zeros((k - 1, k))
        D[np.arange(k - 1), np.arange(k - 1)] = 1.0
        D[np.arange(k - 1), np.arange(1, k)] = -1.0
        sol = solvers.qp(matrix(np.diag(ws)), matrix(-(ws * ys)), matrix(D), matrix(np.zeros(k - 1)))
        fs = np.array(sol["x"]).ravel()
        for gap in 10.0 ** np.arange(-2.0, -10.5, -0.5):
            levels, blocks = _pool_runs(fs, ys, ws, gap)
            if _kkt_ok(ys, ws, levels, blocks):
                break
        else:
            raise AssertionError("QP oracle failed its optimality certificate")
    return levels[inv]


def _pool_runs(fs, ys, ws, gap):
    k = fs.size
    levels = np.empty(k)
    blocks, start = [], 0
    for i in range(1, k + 1):
        if i < k and fs[i] - fs[i - 1] <= gap:
            continue
        levels[start:i] = np.dot(ws[start:i], ys[start:i]) / ws[start:i].sum()
        blocks.append((start, i))
        start = i
    return levels, blocks


def _kkt_ok(ys, ws, f, blocks, tol=1e-10):
    """Optimality of a pooled fit on distinct x: block levels strictly increase,
    every proper prefix of a block has nonnegative weighted residual sum, and
    each block's residuals sum to zero."""
    if np.any(np.diff([f[a] for a, _ in blocks]) <= 0):
        return False
    for a, b in blocks:
        r = np.cumsum(ws[a:b] * (ys[a:b] - f[a:b]))
        if np.any(r[:-1] < -tol) or abs(r[-1]) > tol * max(1.0, b - a):
            return False
    return True


def test_criterion_1_isotonic_suite(verdict):
    rng = np.random.default_rng(1)
    worst, mean_err, major_fail, pava_time = 0.0, 0.0, 0, 0.0
    for i in range(1000):
        n = int(rng.integers(2, 201))
        x = rng.integers(0, max(2, n // 2), n).astype(float) if i % 2 else rng.uniform(size=n)
        y = rng.standard_normal(n) + 0.02 * x * (i % 3)
        w = rng.uniform(0.1, 3.0, n)
        t0 = time.perf_counter()
        f = pava_fit(x, y, w).predict(x)
        pava_time += time.perf_counter() - t0
        worst = max(worst, float(np.abs(f - _qp_isotonic(x, y, w)).max()))
        mean_err = max(mean_err, abs(np.dot(w, f) - np.dot(w, y)) / w.sum())
        for phi in (np.square, np.abs):
            major_fail += np.dot(w, phi(f)) > np.dot(w, phi(y)) + 1e-12
    ok = worst <= 1e-6 and mean_err <= 1e-12 and major_fail == 0 and pava_time < 10
    verdict("criterion 1", ok, f"max |PAVA-QP| {worst:.1e}, mean drift {mean_err:.1e}, majorization failures {major_fail}, PAVA time {pava_time:.2f}s")


# ---------------------------------------------------------------- criterion 2


def _simplex_grid(d, step):
    k = int(round(1 / step))
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    return np.column_stack([i[keep], j[keep], k - i[keep] - j[keep]]) / k


def _grid_min(sigma, grid):
    """Brute-force simplex minimum: coarse grid, then four zooms of a local 41 x 41 grid."""
    obj = np.einsum("ij,jk,ik->i", grid, sigma, grid)
    best = grid[np.argmin(obj)]
    radius = 2e-3
    for _ in range(4):
        a, b = np.meshgrid(np.linspace(-radius, radius, 41), np.linspace(-radius, radius, 41))
        pts = np.column_stack([best[0] + a.ravel(), best[1] + b.ravel()])
        pts = np.column_stack([pts, 1 - pts.sum(axis=1)])
        pts = pts[np.all(pts >= 0, axis=1)]
        vals = np.einsum("ij,jk,ik->i", pts, sigma, pts)
        if vals.min() < best @ sigma @ best:
            best = pts[np.argmin(vals)]
        radius /= 10
    return float(best @ sigma @ best)


def test_criterion_2_simcal_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    grid = _simplex_grid(3, 1e-3)
    qp_gap, above_diag, worse_than_grid = 0.0, 0, 0
    for _ in range(500):
        A = rng.standard_normal((3, 3)) * rng.uniform(0.1, 3.0, 3)
        sigma = A @ A.T
        beta = stack_simplex_qp(sigma)
        obj = beta @ sigma @ beta
        grid_obj = _grid_min(sigma, grid)
        qp_gap = max(qp_gap, abs(obj - grid_obj))
        worse_than_grid += obj > grid_obj + 1e-12
        above_diag += obj > np.diag(sigma).min() + 1e-12
    mean_dev, ess_fail = 0.0, 0
    for i in range(500):
        n = int(rng.integers(200, 1000))
        kind = i % 3
        if kind == 0:
            lw = rng.standard_normal(n) * rng.uniform(1.0, 2.5)
        elif kind == 1:
            lw = np.log(rng.pareto(rng.uniform(0.8, 2.0), n) + 1e-3)
        else:
            lw = rng.standard_t(2, n)
        w = np.exp(lw - lw.max())
        w /= w.mean()
        S = rng.uniform(size=n) + 0.3 * np.tanh(lw)
        ws = simcal_calibrate(w, S, rng.uniform(size=n), rng.integers(0, 5, n), 5, exact=True)
        mean_dev = max(mean_dev, max(abs(v - 1.0) for v in ws.stage_means.values()))
        ess_fail += ess(ws.w_calibrated)[0] < ess(w)[0] * (1 - 1e-12)
    elapsed = time.perf_counter() - t0
    ok = qp_gap <= 1e-5 and worse_than_grid == 0 and above_diag == 0 and mean_dev <= 1e-10 and ess_fail == 0 and elapsed < 30
    verdict("criterion 2", ok, f"QP-grid gap {qp_gap:.1e}, QP worse than grid {worse_than_grid}, above min diagonal {above_diag}, stage mean drift {mean_dev:.1e}, ESS losses {ess_fail}/500, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_clone_consistency(verdict):
    hits = {}
    for seed in range(100):
        dgp = SyntheticDGP(seed=seed, n=2000, targets=[PolicySpec("clone")])
        res, truth = evaluate_simulation(dgp, estimators=ALL_ESTIMATORS)
        for e, r in res["clone"].items():
            hits.setdefault(e, []).append(abs(r.value - truth["clone"]) <= 3 * r.se)
    rates = {e: float(np.mean(h)) for e, h in sorted(hits.items())}

    dgp = SyntheticDGP(seed=0, n=2000, targets=[PolicySpec("clone")])
    sim = simulate_arrays(dgp)
    sim.fresh["clone"]["S"] = sim.S.copy()
    sim.fresh["clone"]["tokens"] = sim.tokens.copy()
    data = eval_data_from_sim(sim, K=5)
    cfg = RunConfig(estimators=["direct", "dr_cpo"])
    out = estimate_policy(data, data.policies["clone"], fit_calibrator(data, cfg), cfg)
    gap = abs(out.estimates["dr_cpo"].value - out.estimates["direct"].value)
    unit = bool(np.all(out.weights["dr_cpo"].w_calibrated == 1.0))

    ok = len(rates) == len(ALL_ESTIMATORS) and min(rates.values()) >= 0.95 and gap <= 1e-12 and unit
    detail = ", ".join(f"{e} {v:.2f}" for e, v in rates.items())
    verdict("criterion 3", ok, f"within 3 SE: {detail}; |DR - Direct| with unit weights {gap:.1e}")


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_oua_coverage(verdict):
    t0 = time.perf_counter()
    cover, naive = {}, []
    for frac in (0.05, 0.25, 1.0):
        hits = []
        for seed in range(200):
            dgp = SyntheticDGP(seed=seed, n=1000, oracle_fraction=frac, targets=[PolicySpec("better", quality_mean=0.3)])
            res, truth = evaluate_simulation(dgp, cfg=RunConfig(oua_folds=10))
            r = res["better"]["direct"]
            hits.append(r.ci_low <= truth["better"] <= r.ci_high)
            if frac == 0.05:
                naive.append(abs(r.value - truth["better"]) <= norm.ppf(0.975) * np.sqrt(r.var_main))
        cover[frac] = float(np.mean(hits))
    naive_cov = float(np.mean(naive))
    elapsed = time.perf_counter() - t0
    ok = all(0.90 <= c <= 0.99 for c in cover.values()) and naive_cov <= 0.80 and elapsed < 600
    detail = ", ".join(f"{f:.0%} {c:.3f}" for f, c in cover.items())
    verdict("criterion 4", ok, f"OUA coverage {detail}; naive at 5% {naive_cov:.3f}; {elapsed:.0f}s")


# ---------------------------------------------------------------- criterion 5


def _ips_se(d, n, cell, seeds=200):
    vals = []
    for seed in range(seeds):
        s = d.sample(rng_for(seed, cell), n)
        vals.append(np.mean(s["W"] * s["Y"]))
    return float(np.std(vals, ddof=1))


def test_criterion_5_cle_floor(verdict):
    n = 2000
    ses, floors, ess_min = [], [], 1.0
    for b in (0.4, 0.2, 0.1, 0.05, 0.02):
        d = AtomDGP([(1 - b) / 2, b / 2, b / 2, (1 - b) / 2], [0.05, 0.6, 0.3, 0.05],
                    [0.2, 0.4, 0.6, 0.8], [0.2, 0.1, 0.15, 0.2], [False, True, True, False])
        ses.append(_ips_se(d, n, cell=0))
        floors.append(cle_floor(d.sigma_T, d.alpha, d.beta, n, d.chi_sq))
        for seed in range(20):
            s = d.sample(rng_for(seed, 0), n)
            ws = simcal_calibrate(s["W"] / s["W"].mean(), s["S"], s["Y"], np.arange(n) % 5, 5)
            ess_min = min(ess_min, ess(ws.w_calibrated)[1])
    # random 4-atom configurations
    g = np.random.default_rng(2024)
    for c in range(20):
        pl = np.maximum(g.dirichlet(np.ones(4)), 0.01)
        pt = np.maximum(g.dirichlet(np.ones(4)), 0.01)
        region = np.zeros(4, bool)
        region[g.choice(4, 2, replace=False)] = True
        d = AtomDGP(pl / pl.sum(), pt / pt.sum(), g.uniform(0, 1, 4), g.uniform(0.05, 0.3, 4), region)
        m = int(g.integers(500, 3000))
        ses.append(_ips_se(d, m, cell=100 + c))
        floors.append(cle_floor(d.sigma_T, d.alpha, d.beta, m, d.chi_sq))
    above = sum(s >= f for s, f in zip(ses, floors))
    grows = bool(np.all(np.diff(ses[:5]) > 0))
    ok = above == len(ses) and grows and ess_min > 0.8
    ratios = np.array(ses) / np.array(floors)
    verdict("criterion 5", ok, f"SE >= floor in {above}/{len(ses)} configs (min ratio {ratios.min():.2f}); "
            f"SE by shrinking beta {np.round(ses[:5], 4).tolist()}; min calibrated ESS {ess_min:.3f}")


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_transport(verdict):
    rej = tests = 0
    for seed in range(1000):
        dgp = SyntheticDGP(seed=seed, n=200, fresh_oracle_fraction=1.0, targets=[
            PolicySpec("a", quality_mean=0.2), PolicySpec("b", quality_mean=-0.2), PolicySpec("c", length_mean=0.5)])
        sim = simulate_arrays(dgp)
        # residuals against the true link: the null holds exactly
        res = {p: f["Y"] - np.clip(norm.cdf(logit(f["S"])), *MEAN_CLIP) for p, f in sim.fresh.items()}
        out = transport_test(res, n_policies=3)
        rej += sum(not r.passed for r in out.values())
        tests += len(out)
    level = 0.05 / 3
    rate = rej / tests
    band = 2 * np.sqrt(level * (1 - level) / tests)

    hit = 0
    for seed in range(200):
        dgp = SyntheticDGP(seed=seed, n=1000, oracle_fraction=0.25, fresh_oracle_fraction=0.2, targets=[
            PolicySpec("shifted", level_shift=-0.31), PolicySpec("ok", quality_mean=0.2)])
        data = eval_data_from_sim(simulate_arrays(dgp), K=5)
        out = transport_test(transport_residuals(data, fit_calibrator(data, RunConfig())), n_policies=2)
        hit += not out["shifted"].passed
    power = hit / 200
    ok = power > 0.95 and abs(rate - level) <= band
    verdict("criterion 6", ok, f"power {power:.3f} at 200 labels; null rate {rate:.4f} vs {level:.4f} +/- {band:.4f}")


# ---------------------------------------------------------------- criterion 7


def _grid_m(c_S, c_Y, s_eval, s_cal, B):
    m = np.arange(1, int(B / c_Y) + 1, dtype=float)
    n = (B - c_Y * m) / c_S
    keep = (n >= m) & (n > 0)
    m, n = m[keep], n[keep]
    return m[np.argmin(s_eval / n + s_cal / m)]


def test_criterion_7_planner(verdict):
    rng = np.random.default_rng(7)
    worst, checked = 0.0, 0
    for _ in range(50):
        args = (rng.uniform(0.01, 1.0), rng.uniform(1.0, 20.0), rng.uniform(0.01, 1.0), rng.uniform(0.001, 1.0), rng.uniform(2000, 20000))
        plan = allocate_budget(*args)
        m_grid = _grid_m(*args)
        m_plan = plan.m_star if plan.feasible else m_grid
        worst = max(worst, abs(m_plan - m_grid))
        checked += 1
    ratio = allocate_budget(0.064, 1.0, 1.0, 0.061, 1000.0).ratio
    ok = checked == 50 and worst <= 1.0 and abs(ratio - 0.062) <= 0.002
    verdict("criterion 7", ok, f"max |m* - grid| {worst:.2f} labels over {checked} tuples; worked-example ratio {ratio:.4f}")


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_ranking(verdict):
    direct_acc, snips_acc, fired = [], [], 0
    for seed in range(50):
        targets = [PolicySpec(f"p{i}", quality_mean=q, style_shift=5.0, style_axis=i) for i, q in enumerate((-0.2, 0.0, 0.2, 0.4))]
        sim = simulate_arrays(SyntheticDGP(seed=seed, n=2000, targets=targets))
        res = evaluate(eval_data_from_sim(sim, K=5), RunConfig(estimators=["direct", "snips"], oua=False), diagnose=True)
        truth = {p: sim.truth[p] for p in res.outputs}
        direct_acc.append(pairwise_accuracy({p: o.estimates["direct"].value for p, o in res.outputs.items()}, truth))
        snips_acc.append(pairwise_accuracy({p: o.estimates["snips"].value for p, o in res.outputs.items()}, truth))
        fired += all(d.ttc is not None and d.ttc < 0.7 for d in res.diagnostics.values())
    d_acc, s_acc, fire = float(np.mean(direct_acc)), float(np.mean(snips_acc)), fired / 50
    ok = d_acc >= 0.95 and s_acc <= 0.65 and fire >= 0.95
    verdict("criterion 8", ok, f"Direct pairwise {d_acc:.3f}; SNIPS {s_acc:.3f}; TTC gate fired in {fire:.0%} of seeds")


# ---------------------------------------------------------------- criterion 9


def _pipeline_files(root):
    sim = root / "sim"
    out = root / "out"
    spec = root / "spec.json"
    if not spec.exists():
        spec.write_text(json.dumps({"seed": 11, "n": 800, "fresh_oracle_fraction": 0.1,
                                    "targets": [{"name": "a", "quality_mean": 0.2}, {"name": "b", "quality_mean": -0.1}]}))
        assert cli.main(["simulate", "--spec", str(spec), "--out", str(sim)]) == 0
    code = cli.main(["pipeline", "--logs", str(sim / "logs.jsonl"), "--tf-cache", str(sim / "tf_cache.jsonl"),
                     "--fresh-draws", str(sim / "fresh_draws.jsonl"), "--out", str(out), "--seed", "3"])
    assert code == 0
    files = {}
    for p in sorted(out.glob("*.json")):
        data = p.read_bytes()
        if p.name == "report.json":
            doc = json.loads(data)
            doc.pop("meta")
            data = json.dumps(doc, sort_keys=True).encode()
        files[p.name] = data
    shutil.rmtree(out)
    return files


def test_criterion_9_determinism(tmp_path, verdict):
    # both runs use the same --out path, which is part of the recorded config
    first = _pipeline_files(tmp_path)
    second = _pipeline_files(tmp_path)
    differ = [k for k in first if first[k] != second.get(k)]
    ok = len(first) == 8 and set(first) == set(second) and not differ
    verdict("criterion 9", ok, f"{len(first)} artifacts compared, {len(differ)} differ {differ}")
