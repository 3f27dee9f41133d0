"""How label count drives the calibration share of variance, and what the planner recommends."""
import numpy as np

from judgecal.pipeline import RunConfig, eval_data_from_sim, evaluate
from judgecal.planner import allocate_budget, mde, variances_from_run
from judgecal.sim import PolicySpec, SyntheticDGP, simulate_arrays


def run(frac, seeds=range(20)):
    shares, cover = [], []
    last = None
    for seed in seeds:
        dgp = SyntheticDGP(seed=seed, n=1000, oracle_fraction=frac, targets=[PolicySpec("t", quality_mean=0.3)])
        sim = simulate_arrays(dgp)
        data = eval_data_from_sim(sim, K=dgp.K)
        res = evaluate(data, RunConfig(estimators=["direct"], oua_folds=10), diagnose=False)
        r = res.outputs["t"].estimates["direct"]
        shares.append(res.oua["t"]["direct"].oua_share)
        cover.append(r.ci_low <= sim.truth["t"] <= r.ci_high)
        last = (r, int(data.labeled.sum()))
    return float(np.mean(shares)), float(np.mean(cover)), last


def main():
    print("oracle  OUA share  coverage  MDE")
    for frac in (0.05, 0.1, 0.25, 0.5, 1.0):
        share, cov, (r, m) = run(frac)
        print(f"{frac:>5.0%}  {share:9.2f}  {cov:8.2f}  {mde(r.se):.4f}")
        if frac == 0.05:
            s_eval, s_cal = variances_from_run(r.var_main, r.n, r.var_cal, m)
    plan = allocate_budget(c_S=1.0, c_Y=20.0, sigma2_eval=s_eval, sigma2_cal=s_cal, B=10_000.0)
    print(f"\nbudget 10000 at label cost 20x: n*={plan.n_star:.0f}, m*={plan.m_star:.0f} (ratio {plan.ratio:.3f})")
    print(plan.caveat)


if __name__ == "__main__":
    main()
