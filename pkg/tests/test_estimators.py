import numpy as np
import pytest

from judgecal import estimators as est
from judgecal.pipeline import RunConfig, estimate_policy, eval_data_from_sim, evaluate_simulation, fit_calibrator
from judgecal.sim import PolicySpec, SyntheticDGP, simulate_arrays


def test_direct_arithmetic():
    r = est.estimate_direct(["a", "b", "c"], [0.2, 0.4, 0.6])
    assert r.value == pytest.approx(0.4)
    assert np.allclose(r.if_vector, [-0.2, 0.0, 0.2])
    assert r.var_main == pytest.approx(0.08 / 9)
    const = est.estimate_direct(["a", "b"], [0.3, 0.3])
    assert const.value == 0.3 and const.var_main == 0.0
    with pytest.raises(est.EstimatorUnavailable):
        est.estimate_direct([], [])


def test_direct_averages_draws_within_prompt():
    r = est.estimate_direct(["a", "a", "b"], [0.2, 0.4, 0.9])
    assert r.x_ids == ["a", "b"]
    assert r.value == pytest.approx((0.3 + 0.9) / 2)


def test_ips_arithmetic():
    R = np.array([0.1, 0.5, 0.7])
    assert est.estimate_ips(np.ones(3), R, R, ["a", "b", "c"]).value == pytest.approx(R.mean())
    assert est.estimate_ips([2.0, 0.0], [0.5, 0.9], [0.5, 0.9], ["a", "b"]).value == pytest.approx(0.5)
    with pytest.raises(ValueError):
        est.estimate_ips([1.0], [0.5, 0.9], [0.5, 0.9], ["a", "b"])


def test_dr_reductions(rng):
    n = 50
    W = rng.uniform(0, 2, n)
    R = rng.uniform(size=n)
    g = rng.uniform(size=n)
    ids = [str(i) for i in range(n)]
    assert est.estimate_dr_cpo(np.ones(n), R, R, R, g, ids).value == pytest.approx(g.mean())
    r = est.estimate_dr_cpo(W, R, R, np.zeros(n), g, ids)
    assert r.value == pytest.approx(g.mean() + np.mean(W * R))
    assert r.components["dm_term"] == pytest.approx(g.mean())
    with pytest.raises(est.EstimatorUnavailable):
        est.estimate_dr_cpo([], [], [], [], [], [])


def _two_action_world(rng, n, good_q, good_w):
    x = rng.uniform(size=n)
    a = rng.integers(0, 2, n)
    mu = lambda xx, aa: 0.3 + 0.4 * aa * xx
    y = mu(x, a) + 0.1 * rng.standard_normal(n)
    p_target = np.where(a == 1, x, 1 - x)
    W = p_target / 0.5 if good_w else np.ones(n)
    if good_q:
        q = mu(x, a)
        g = (1 - x) * mu(x, 0) + x * mu(x, 1)
    else:
        q = np.full(n, 0.5)
        g = np.full(n, 0.5)
    return W, y, q, g


@pytest.mark.parametrize("good_q,good_w", [(True, False), (False, True)])
def test_dr_is_doubly_robust(good_q, good_w):
    truth = 0.3 + 0.4 / 3
    errs = []
    for seed in range(60):
        rng = np.random.default_rng(seed)
        W, y, q, g = _two_action_world(rng, 4000, good_q, good_w)
        ids = [str(i) for i in range(4000)]
        errs.append(est.estimate_dr_cpo(W, y, y, q, g, ids).value - truth)
    errs = np.asarray(errs)
    assert abs(errs.mean()) < 3 * errs.std(ddof=1) / np.sqrt(errs.size)
    assert abs(errs.mean()) < 0.005


def test_dr_with_both_nuisances_wrong_is_biased():
    rng = np.random.default_rng(0)
    W, y, q, g = _two_action_world(rng, 4000, False, False)
    v = est.estimate_dr_cpo(W, y, y, q, g, [str(i) for i in range(4000)]).value
    assert abs(v - (0.3 + 0.4 / 3)) > 0.02


def test_orthogonality_score_cases():
    r = np.array([0.2, 0.5, 0.9])
    assert est.orthogonality_score(np.ones(3), r, r).score == 0.0
    covered, widths = 0, []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        U = 0.1 * rng.standard_normal(400)
        s = est.orthogonality_score(np.ones(400), U, np.zeros(400))
        covered += s.covers_zero
        widths.append((s.ci_high - s.ci_low) / 2)
    assert np.mean(widths) == pytest.approx(1.96 * 0.1 / 20, rel=0.05)
    assert 0.90 <= covered / 200 <= 0.99
    power = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        s = est.orthogonality_score(np.ones(1000), 0.05 + 0.1 * rng.standard_normal(1000), np.zeros(1000))
        power += not s.covers_zero
    assert power / 200 > 0.9


def test_result_roundtrip_and_var_cal():
    r = est.estimate_direct(["a", "b", "c"], [0.2, 0.4, 0.6])
    again = est.EstimateResult.from_jsonable(r.to_jsonable(include_if=True))
    assert again.value == r.value and np.array_equal(again.if_vector, r.if_vector)
    wide = r.with_var_cal(0.01)
    assert wide.var_total == pytest.approx(r.var_main + 0.01)
    assert wide.ci_high - wide.ci_low > r.ci_high - r.ci_low
    assert est.if_hash(r.if_vector) == r.to_jsonable()["if_hash"]


def test_direct_covers_truth_in_simulation():
    hits = 0
    for seed in range(200):
        dgp = SyntheticDGP(seed=seed, n=1000, targets=[PolicySpec("t", quality_mean=0.2)])
        res, truth = evaluate_simulation(dgp, estimators=("direct",))
        r = res["t"]["direct"]
        hits += abs(r.value - truth["t"]) <= 3 * r.se
    assert hits / 200 >= 0.99


def test_snips_matches_truth_under_high_overlap():
    hits = 0
    for seed in range(40):
        dgp = SyntheticDGP(seed=seed, n=2000, targets=[PolicySpec("t", quality_mean=0.1, quality_sd=1.0)])
        res, truth = evaluate_simulation(dgp, estimators=("snips",))
        r = res["t"]["snips"]
        hits += abs(r.value - truth["t"]) <= 3 * r.se
    assert hits / 40 >= 0.95


def matched_clone_data(seed=0, n=500):
    dgp = SyntheticDGP(seed=seed, n=n, targets=[PolicySpec("clone")])
    sim = simulate_arrays(dgp)
    sim.fresh["clone"]["S"] = sim.S.copy()
    sim.fresh["clone"]["tokens"] = sim.tokens.copy()
    return eval_data_from_sim(sim, K=5)


def test_dr_equals_direct_with_unit_weights_and_matched_draws():
    data = matched_clone_data()
    assert np.all(data.policies["clone"].log_w == 0.0)
    cfg = RunConfig(estimators=["direct", "dr_cpo"])
    cal = fit_calibrator(data, cfg)
    out = estimate_policy(data, data.policies["clone"], cal, cfg)
    assert np.all(out.weights["dr_cpo"].w_calibrated == 1.0)
    assert abs(out.estimates["dr_cpo"].value - out.estimates["direct"].value) <= 1e-12
