import json

import pytest

from judgecal import cli
from judgecal.artifacts import STAGES

LEDGER = ("i_calibration", "ii_weights", "iii_overlap", "iv_orthogonality", "v_oua", "vi_filters", "vii_multiplicity")


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    spec = d / "spec.json"
    spec.write_text(json.dumps({
        "seed": 4, "n": 600, "oracle_fraction": 0.3,
        "targets": [{"name": "good", "quality_mean": 0.3}, {"name": "weak", "quality_mean": -0.2}],
    }))
    assert cli.main(["simulate", "--spec", str(spec), "--out", str(d)]) == 0
    return d


def _run(simdir, out, *extra, fresh=True):
    argv = ["pipeline", "--logs", str(simdir / "logs.jsonl"), "--tf-cache", str(simdir / "tf_cache.jsonl"), "--out", str(out)]
    if fresh:
        argv += ["--fresh-draws", str(simdir / "fresh_draws.jsonl")]
    return cli.main(argv + list(extra))


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_pipeline_writes_every_artifact_and_full_ledger(simdir, tmp_path):
    assert _run(simdir, tmp_path) == 0
    for s in STAGES:
        assert (tmp_path / f"{s}.json").exists()
    rep = _report(tmp_path)
    assert set(LEDGER) <= set(rep["ledger"])
    assert all(rep["ledger"][k] is not None for k in LEDGER)
    assert rep["absent"] == []
    direct = rep["estimates"]["direct"]
    assert direct["good"]["rank"] == 1 and direct["weak"]["rank"] == 2
    assert direct["good"]["interval"] == "oua"
    truth = json.loads((simdir / "truth.json").read_text())["truth"]
    lo, hi = direct["good"]["ci"]
    assert lo - 0.05 <= truth["good"] <= hi + 0.05
    assert set(rep["estimates"]) >= {"direct", "snips", "cal_ips", "dr_cpo", "stacked_dr"}


def test_missing_fresh_draws_limits_estimators(simdir, tmp_path):
    assert _run(simdir, tmp_path, fresh=False) == 0
    est = json.loads((tmp_path / "estimate.json").read_text())["content"]
    block = est["good"]
    assert "direct" in block["unavailable"] and "dr_cpo" in block["unavailable"]
    assert "cal_ips" in block["estimates"]
    rep = _report(tmp_path)
    assert "direct" not in rep["estimates"]


def test_no_oua_gives_naive_intervals(simdir, tmp_path):
    assert _run(simdir, tmp_path, "--no-oua") == 0
    rep = _report(tmp_path)
    assert rep["ledger"]["v_oua"] == {"absent": True, "intervals": "naive"}
    assert all(r["interval"] == "naive" for rows in rep["estimates"].values() for r in rows.values())


def test_report_lists_missing_artifacts(simdir, tmp_path):
    assert _run(simdir, tmp_path) == 0
    (tmp_path / "oua.json").unlink()
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    rep = _report(tmp_path)
    assert rep["absent"] == ["oua"]


def test_rho_changes_guard(simdir, tmp_path):
    tight, loose = tmp_path / "tight", tmp_path / "loose"
    assert _run(simdir, tight, "--rho", "1e-6", "--estimators", "cal_ips", "--no-oua") == 0
    assert _run(simdir, loose, "--rho", "100", "--estimators", "cal_ips", "--no-oua") == 0
    wt = json.loads((tight / "weights.json").read_text())["content"]["weak"]["cal_ips"]
    wl = json.loads((loose / "weights.json").read_text())["content"]["weak"]["cal_ips"]
    assert wt["guard_engaged"] and wt["guard_alpha"] < 1
    assert not wl["guard_engaged"] and wl["guard_alpha"] == 1.0
    assert wt["rho"] == 1e-6 and wl["rho"] == 100


def test_stage_failure_exits_2_naming_stage(simdir, tmp_path, capsys):
    logs = [json.loads(l) for l in open(simdir / "logs.jsonl")]
    few = []
    seen = 0
    for r in logs:
        if "oracle_Y" in r:
            seen += 1
            if seen > 3:
                r = {k: v for k, v in r.items() if k != "oracle_Y"}
        few.append(r)
    path = tmp_path / "few.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in few) + "\n")
    code = cli.main(["calibrate", "--logs", str(path), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "calibrate" in capsys.readouterr().err
    assert (tmp_path / "out" / "ingest.json").exists()
    assert not (tmp_path / "out" / "calibrate.json").exists()


def test_missing_logs_file_exits_2(tmp_path, capsys):
    assert cli.main(["ingest", "--logs", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 2
    assert "ingest" in capsys.readouterr().err


def test_plan_command(capsys):
    assert cli.main(["plan", "--se", "0.01"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mde"] == pytest.approx(0.03962, abs=1e-5)
    assert cli.main(["plan", "--budget", "1000", "--cost-ratio", "15.625", "--c-s", "1",
                     "--sigma2-eval", "1", "--sigma2-cal", "0.061"]) == 0
    plan = json.loads(capsys.readouterr().out)["plan"]
    assert plan["ratio"] == pytest.approx(0.062, abs=0.002)
    assert cli.main(["plan"]) == 2


def test_plan_from_run(simdir, tmp_path, capsys):
    assert _run(simdir, tmp_path, "--estimators", "direct") == 0
    capsys.readouterr()
    assert cli.main(["plan", "--budget", "5000", "--cost-ratio", "20", "--from-run", str(tmp_path)]) == 0
    plan = json.loads(capsys.readouterr().out)["plan"]
    assert plan["n_star"] > 0 and plan["m_star"] >= 0


def test_stage_subcommand_stops_early(simdir, tmp_path):
    argv = ["weights", "--logs", str(simdir / "logs.jsonl"), "--tf-cache", str(simdir / "tf_cache.jsonl"), "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    assert (tmp_path / "weights.json").exists() and not (tmp_path / "estimate.json").exists()
