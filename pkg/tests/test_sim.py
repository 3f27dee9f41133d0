import json

import numpy as np
import pytest

from judgecal import sim as sm
from judgecal.diagnostics import ess
from judgecal.weights import mean_one_weights


def _mc_truth(dgp, policy, n=2_000_000, seed=99):
    """Monte-Carlo value: mean oracle mean under fresh responses (the label noise averages out)."""
    rng = np.random.default_rng(seed)
    u = dgp.prompt_sd * rng.standard_normal(n)
    r = sm._draw(rng, dgp, policy, u)
    S = sm._judge(dgp, r.q, r.length, r.eps)
    m = sm._oracle_mean(dgp, r.q, r.length, S, policy.level_shift)
    return m.mean(), m.std() / np.sqrt(n)


@pytest.mark.parametrize("link", sm.LINKS)
def test_quadrature_truth_matches_monte_carlo(link):
    dgp = sm.SyntheticDGP(link=link, length_bias=0.3, judge_noise=0.5,
                          targets=[sm.PolicySpec("t", quality_mean=0.4, length_mean=0.5, level_shift=-0.05)])
    pol = dgp.targets[0]
    mc, se = _mc_truth(dgp, pol)
    assert abs(sm.truth(dgp, pol) - mc) <= 3 * se + 1e-6


def test_clone_has_unit_weights():
    dgp = sm.SyntheticDGP(seed=1, n=500, targets=[sm.PolicySpec("clone")])
    s = sm.simulate_arrays(dgp)
    log_w = s.logp_target["clone"] - s.logp0
    assert np.all(log_w == 0.0)
    assert ess(mean_one_weights(log_w))[1] == 1.0


def test_simulation_is_deterministic_per_seed_and_cell():
    dgp = sm.SyntheticDGP(seed=3, n=200, targets=[sm.PolicySpec("t", quality_mean=0.2)])
    a, b = sm.simulate_arrays(dgp), sm.simulate_arrays(dgp)
    assert np.array_equal(a.S, b.S) and np.array_equal(a.fresh["t"]["S"], b.fresh["t"]["S"])
    c = sm.simulate_arrays(dgp, cell=1)
    assert not np.array_equal(a.S, c.S)


def test_oracle_fraction_and_score_range():
    dgp = sm.SyntheticDGP(seed=0, n=2000, oracle_fraction=0.1, targets=[sm.PolicySpec("t")])
    s = sm.simulate_arrays(dgp)
    assert s.labeled.sum() == 200
    assert np.all((s.S > 0) & (s.S < 1))
    Y = s.Y[s.labeled]
    assert np.all((Y > 0) & (Y < 1))


@pytest.mark.parametrize("bad", [
    dict(n=0), dict(link="cubic"), dict(noise_sd=0.6), dict(oracle_fraction=1.5),
    dict(targets=[sm.PolicySpec("base")]), dict(targets=[sm.PolicySpec("t", quality_sd=0.0)]),
    dict(targets=[sm.PolicySpec("t", style_axis=9)]),
])
def test_validation(bad):
    with pytest.raises(ValueError):
        sm.SyntheticDGP(**bad)


def test_json_roundtrip(tmp_path):
    dgp = sm.SyntheticDGP(seed=5, n=50, targets=[sm.PolicySpec("t", style_shift=1.0, style_axis=2)])
    again = sm.SyntheticDGP.from_jsonable(json.loads(json.dumps(dgp.to_jsonable())))
    assert again == dgp
    paths = sm.write_simulation(dgp, tmp_path)
    meta = json.loads(open(paths["truth"]).read())
    assert meta["truth"]["t"] == pytest.approx(sm.truth(dgp, dgp.targets[0]))
    logs = [json.loads(l) for l in open(paths["logs"])]
    assert len(logs) == 50 and sum("oracle_Y" in r for r in logs) == round(0.25 * 50)


def test_generate_goes_through_ingestion():
    dgp = sm.SyntheticDGP(seed=2, n=100, targets=[sm.PolicySpec("t", quality_mean=0.1)])
    ds, truth = sm.generate(dgp)
    assert set(truth) == {"base", "t"}
    assert truth["base"] == pytest.approx(0.5)
    assert len(ds.records) == 100
    assert list(ds.tf_caches) == ["t"] and len(ds.fresh_draws["t"]) == 100


def test_style_centre():
    p = sm.PolicySpec("t", style_shift=2.0)
    assert np.allclose(p.style_centre(4), 1.0)
    q = sm.PolicySpec("t", style_shift=2.0, style_axis=1)
    assert np.allclose(q.style_centre(3), [0.0, 2.0, 0.0])


def test_pairwise_accuracy():
    truth = {"a": 0.1, "b": 0.2, "c": 0.3}
    assert sm.pairwise_accuracy({"a": 1, "b": 2, "c": 3}, truth) == 1.0
    assert sm.pairwise_accuracy({"a": 3, "b": 2, "c": 1}, truth) == 0.0
    assert sm.pairwise_accuracy({"a": 1, "b": 3, "c": 2}, truth) == pytest.approx(2 / 3)


def test_run_grid_rows():
    tmpl = sm.SyntheticDGP(n=300, targets=[sm.PolicySpec("t", quality_mean=0.2), sm.PolicySpec("u", quality_mean=-0.2)])
    rows = sm.run_grid(tmpl, [0.25], [300], seeds=range(3))
    assert len(rows) == 1 and rows[0]["seeds"] == 3
    assert 0 <= rows[0]["coverage"] <= 1 and rows[0]["rmse"] < 0.1
    with pytest.raises(ValueError):
        sm.run_grid(tmpl, [], [300], seeds=[0])


def test_atom_dgp_properties():
    d = sm.AtomDGP([0.4, 0.1, 0.1, 0.4], [0.05, 0.6, 0.3, 0.05], [0.2, 0.4, 0.6, 0.8], [0.2, 0.1, 0.15, 0.2],
                   [False, True, True, False])
    assert d.alpha == pytest.approx(0.9) and d.beta == pytest.approx(0.2)
    # conditional target (2/3, 1/3) vs logger (1/2, 1/2)
    assert d.chi_sq == pytest.approx((4 / 9) / 0.5 + (1 / 9) / 0.5 - 1)
    assert d.sigma_T == 0.1
    assert d.value == pytest.approx(0.05 * 0.2 + 0.6 * 0.4 + 0.3 * 0.6 + 0.05 * 0.8)
    draw = d.sample(np.random.default_rng(0), 200_000)
    assert np.mean(draw["W"] * draw["Y"]) == pytest.approx(d.value, abs=0.01)
    with pytest.raises(ValueError):
        sm.AtomDGP([0.5, 0.6], [0.5, 0.5], [0, 1], [1, 1], [True, False])
