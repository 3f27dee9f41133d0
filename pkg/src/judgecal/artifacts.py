"""Stage artifacts on disk and the consolidated report.

Every stage writes ``<stage>.json`` holding the run configuration, the stage
content and a SHA-256 hash of that content. Only ``report.json`` carries a
timestamp, under ``meta.timestamp``.
"""
from __future__ import annotations

import datetime as _dt
import json
import math
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import estimators as est
from .calibration import content_hash
from .data import Dataset, attach_fresh_rows, ingest_fresh_draws, ingest_logs, ingest_tf_cache
from .inference import OuaTrace
from .pipeline import (
    RunConfig,
    diagnose_policy,
    estimate_policy,
    eval_data_from_dataset,
    fit_calibrator,
    run_oua,
    transport_residuals,
)
from .diagnostics import evaluate_gates, transport_test

STAGES = ("ingest", "calibrate", "weights", "estimate", "stack", "oua", "diagnose", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {exc}")


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats to plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def write_artifact(out_dir, stage: str, content, cfg: RunConfig) -> dict:
    content = jsonable(content)
    doc = {"stage": stage, "config": jsonable(cfg.to_jsonable()), "content": content, "content_hash": content_hash(content)}
    path = Path(out_dir) / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc), encoding="utf-8")
    return doc


def read_artifact(out_dir, stage: str) -> Optional[dict]:
    path = Path(out_dir) / f"{stage}.json"
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def load_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.logs:
        raise ValueError("no log file configured (--logs)")
    ds = ingest_logs(cfg.logs, K=cfg.K)
    for path in cfg.tf_cache:
        ds = ingest_tf_cache(path, ds, eps_additivity=cfg.eps_additivity)
    for path in cfg.fresh_draws:
        ds = ingest_fresh_draws(path, ds)
    return ds


def run_stages(cfg: RunConfig, upto: str = "report") -> Dict[str, dict]:
    """Run the pipeline through ``upto``, writing one artifact per stage.

    Raises :class:`StageError` naming the failing stage; artifacts of earlier
    stages stay on disk.
    """
    if upto not in STAGES:
        raise ValueError(f"unknown stage {upto!r}")
    last = STAGES.index(upto)
    out = cfg.out_dir
    docs: Dict[str, dict] = {}

    def stage(name):
        return STAGES.index(name) <= last

    try:
        ds = load_dataset(cfg)
    except Exception as exc:
        raise StageError("ingest", exc) from exc
    docs["ingest"] = write_artifact(out, "ingest", ds.to_jsonable(), cfg)
    if not stage("calibrate"):
        return docs

    current = "calibrate"
    try:
        data = eval_data_from_dataset(ds, cfg.covariates if cfg.use_covariates else [])
        cal = fit_calibrator(data, cfg)
        docs["calibrate"] = write_artifact(out, "calibrate", cal.to_jsonable(), cfg)
        if not stage("weights"):
            return docs

        current = "weights"
        outputs = {p: estimate_policy(data, pol, cal, cfg) for p, pol in sorted(data.policies.items())}
        weights_doc = {
            p: {e: ws.to_jsonable() for e, ws in sorted(o.weights.items())} for p, o in outputs.items()
        }
        docs["weights"] = write_artifact(out, "weights", weights_doc, cfg)
        if not stage("estimate"):
            return docs

        current = "estimate"
        est_doc = {
            p: {
                "estimates": {
                    e: r.to_jsonable(include_if=True) for e, r in sorted(o.estimates.items()) if e != est.STACKED_DR
                },
                "unavailable": dict(sorted(o.unavailable.items())),
                "n_weight_rows": int(data.policies[p].idx.size),
                "n_missing_target_logp": int(data.n_dropped.get(p, 0)),
            }
            for p, o in outputs.items()
        }
        docs["estimate"] = write_artifact(out, "estimate", est_doc, cfg)
        if not stage("stack"):
            return docs

        current = "stack"
        stack_doc = {}
        for p, o in outputs.items():
            if o.stack is not None:
                stack_doc[p] = {**o.stack.to_jsonable(), "estimate": o.estimates[est.STACKED_DR].to_jsonable()}
            else:
                stack_doc[p] = {"unavailable": o.unavailable.get(est.STACKED_DR, "not requested")}
        docs["stack"] = write_artifact(out, "stack", stack_doc, cfg)
        if not stage("oua"):
            return docs

        current = "oua"
        if cfg.oua:
            traces = run_oua(data, cal, outputs, cfg)
            oua_doc = {
                p: {
                    e: {
                        **t.to_jsonable(),
                        "value": outputs[p].estimates[e].value,
                        "ci_low": outputs[p].estimates[e].ci_low,
                        "ci_high": outputs[p].estimates[e].ci_high,
                    }
                    for e, t in sorted(tr.items())
                }
                for p, tr in traces.items()
            }
        else:
            oua_doc = {"disabled": True}
        docs["oua"] = write_artifact(out, "oua", oua_doc, cfg)
        if not stage("diagnose"):
            return docs

        current = "diagnose"
        residuals = transport_residuals(data, cal)
        extra = {}
        for p in residuals:
            r = outputs[p].estimates.get(est.DIRECT)
            if r is not None and r.var_cal:
                extra[p] = r.var_cal
        transport = transport_test(residuals, n_policies=max(1, len(residuals)), extra_var=extra)
        diag_doc = {}
        for p, pol in sorted(data.policies.items()):
            rep = diagnose_policy(data, pol, cal, outputs[p], cfg, len(data.policies))
            if p in transport:
                rep.transport = transport[p].to_jsonable()
            diag_doc[p] = {"report": rep.to_jsonable(), "gates": evaluate_gates(rep, cfg.thresholds).to_jsonable()}
        docs["diagnose"] = write_artifact(
            out, "diagnose", {"policies": diag_doc, "thresholds": vars(cfg.thresholds), "bins": cfg.bins}, cfg
        )
        if not stage("report"):
            return docs

        current = "report"
        docs["report"] = write_report(out, cfg)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(current, exc) from exc
    return docs


def _rank(values: Dict[str, float]) -> Dict[str, int]:
    order = sorted(values, key=lambda p: (-values[p], p))
    return {p: i + 1 for i, p in enumerate(order)}


def build_report(out_dir) -> dict:
    """Consolidate stage artifacts into the seven-part reporting ledger.

    Only copies numbers from the artifacts; missing artifacts are listed
    under ``absent``.
    """
    arts = {s: read_artifact(out_dir, s) for s in STAGES[:-1]}
    absent = [s for s, a in arts.items() if a is None]
    c = {s: (a["content"] if a else None) for s, a in arts.items()}
    oua_on = c["oua"] is not None and not c["oua"].get("disabled", False)

    diag = (c["diagnose"] or {}).get("policies", {})
    refuse = {p: d["gates"]["refuse_level"] for p, d in diag.items()}

    table: Dict[str, Dict[str, dict]] = {}
    if c["estimate"]:
        for p, block in c["estimate"].items():
            for e, r in block["estimates"].items():
                table.setdefault(e, {})[p] = {"value": r["value"], "se": r["se"], "ci": [r["ci_low"], r["ci_high"]], "source": "estimate"}
    if c["stack"]:
        for p, block in c["stack"].items():
            if "estimate" in block:
                r = block["estimate"]
                table.setdefault(est.STACKED_DR, {})[p] = {"value": r["value"], "se": r["se"], "ci": [r["ci_low"], r["ci_high"]], "source": "stack"}
    for e, rows in table.items():
        for p, row in rows.items():
            trace = (c["oua"] or {}).get(p, {}).get(e) if oua_on else None
            if trace is not None:
                row["ci"] = [trace["ci_low"], trace["ci_high"]]
                row["se"] = math.sqrt(trace["var_total"])
                row["var_cal"] = trace["var_cal"]
                row["interval"] = "oua"
                row["source"] = "oua"
            else:
                row["interval"] = "naive"
    estimates_section = {}
    for e, rows in sorted(table.items()):
        ranks = _rank({p: r["value"] for p, r in rows.items()})
        for p, row in rows.items():
            row["rank"] = ranks[p]
            if refuse.get(p, False):
                row["withheld"] = True
                row["value"] = None
                row["ci"] = None
                row["se"] = None
        estimates_section[e] = dict(sorted(rows.items()))

    ledger = {}
    cal = c["calibrate"]
    ledger["i_calibration"] = None if cal is None else {
        k: cal[k] for k in ("mode", "oof_rmse", "oof_rmse_se", "oof_rmse_tertiles", "n_labels", "covariate_names", "content_hash")
    }
    w = c["weights"]
    ledger["ii_weights"] = None if w is None else {
        p: {
            e: {k: ws[k] for k in ("stack_beta", "candidates", "rho", "guard_alpha", "guard_engaged", "guard_mode", "fold_guard_engaged", "monotonicity_violation")}
            for e, ws in block.items()
        }
        for p, block in w.items()
    }
    keys = ("ess_fraction", "ess_fraction_raw", "ess_uplift", "max_weight_share", "hill_alpha", "bhattacharyya", "ttc", "cle_factor", "chi_sq", "chi_sq_space", "out_of_range", "boundary_flat")
    ledger["iii_overlap"] = {p: {k: d["report"][k] for k in keys} for p, d in diag.items()} if diag else None
    split = {}
    if c["estimate"]:
        for p, block in c["estimate"].items():
            dr = block["estimates"].get(est.DR_CPO)
            split[p] = {
                "orthogonality": diag.get(p, {}).get("report", {}).get("orthogonality"),
                "dm_term": None if dr is None else dr["components"].get("dm_term"),
                "aug_term": None if dr is None else dr["components"].get("aug_term"),
            }
    ledger["iv_orthogonality"] = split or None
    ledger["v_oua"] = c["oua"] if oua_on else {"absent": True, "intervals": "naive"}
    ing = c["ingest"]
    ledger["vi_filters"] = None if ing is None else {
        k: ing[k] for k in ("raw_rows", "n_records", "n_labeled", "filter_ledger", "tf_ledger", "fresh_ledger", "inclusion_manifest")
    }
    n_pol = len(diag) if diag else (len(c["estimate"]) if c["estimate"] else 0)
    ledger["vii_multiplicity"] = {
        "n_policies": n_pol,
        "note": "intervals are per-policy 95% Wald intervals; the transport test uses a Bonferroni level"
        + ("; with more than five policies, treat rankings as exploratory" if n_pol > 5 else ""),
    }

    hashes = {s: a["content_hash"] for s, a in arts.items() if a is not None}
    config = next((a["config"] for a in arts.values() if a is not None), None)
    return {
        "estimates": estimates_section,
        "gates": {p: d["gates"] for p, d in sorted(diag.items())},
        "transport": {p: d["report"].get("transport") for p, d in sorted(diag.items())},
        "ledger": ledger,
        "absent": absent,
        "artifact_hashes": hashes,
        "config": config,
    }


def write_report(out_dir, cfg: Optional[RunConfig] = None) -> dict:
    report = jsonable(build_report(out_dir))
    report["meta"] = {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    path = Path(out_dir) / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(report), encoding="utf-8")
    return report
