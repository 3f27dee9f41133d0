"""Evaluate three target policies on a synthetic log and print estimates and gates."""
from judgecal.pipeline import RunConfig, eval_data_from_sim, evaluate
from judgecal.sim import PolicySpec, SyntheticDGP, simulate_arrays


def main():
    dgp = SyntheticDGP(
        seed=0,
        n=2000,
        oracle_fraction=0.1,
        targets=[
            PolicySpec("sharper", quality_mean=0.3),
            PolicySpec("verbose", quality_mean=0.1, length_mean=0.8),
            PolicySpec("drifted", quality_mean=-0.1, style_shift=2.0),
        ],
    )
    sim = simulate_arrays(dgp)
    res = evaluate(eval_data_from_sim(sim, K=dgp.K), RunConfig())
    print(f"calibrator: {res.calibrator.mode}")
    for p, out in res.outputs.items():
        print(f"\n{p}  (truth {sim.truth[p]:.4f})")
        for e, r in sorted(out.estimates.items()):
            print(f"  {e:<11} {r.value:.4f}  [{r.ci_low:.4f}, {r.ci_high:.4f}]")
        g = res.gates[p]
        print(f"  gates: overlap={g.overlap} judge={g.judge} identification={g.identification} dr={g.dr}")
        for m in g.messages:
            print(f"    - {m}")


if __name__ == "__main__":
    main()
