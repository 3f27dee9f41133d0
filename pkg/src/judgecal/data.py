"""Log schema, JSONL ingestion, conformance checks and deterministic folds."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_EPS_ADDITIVITY = 1e-6


class IngestError(Exception):
    """Fatal ingestion failure (unreadable file, empty dataset, cache conflict)."""


def fold_hash(x_id: str, K: int) -> int:
    """Fold index of ``x_id``: 64-bit FNV-1a over its UTF-8 bytes, modulo ``K``."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    h = FNV64_OFFSET
    for byte in x_id.encode("utf-8"):
        h ^= byte
        h = (h * FNV64_PRIME) & MASK64
    return h % K


@dataclass(frozen=True)
class FoldMap:
    K: int = 5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")

    def __call__(self, x_id: str) -> int:
        return fold_hash(x_id, self.K)

    def assign(self, x_ids: Iterable[str]) -> np.ndarray:
        return np.array([fold_hash(x, self.K) for x in x_ids], dtype=int)


@dataclass(frozen=True)
class LogRecord:
    x_id: str
    judge_S: float
    oracle_Y: Optional[float]
    covariates: Mapping[str, float]
    logp_pi0: float
    fold_id: int

    @property
    def L(self) -> bool:
        return self.oracle_Y is not None


@dataclass(frozen=True)
class TFCacheEntry:
    x_id: str
    policy: str
    logp_pi_prime: float
    token_count: int
    logp_prefix: Optional[float] = None
    logp_joint: Optional[float] = None
    per_token_logp: Optional[tuple] = None


@dataclass(frozen=True)
class FreshDrawRecord:
    """A rollout of a target policy on a logged prompt, scored by the judge.

    ``oracle_Y``, ``logp_target`` and ``token_count`` are optional extras used
    by the transport test and the typicality-coverage diagnostic.
    """

    x_id: str
    policy: str
    judge_S: float
    covariates: Mapping[str, float]
    oracle_Y: Optional[float] = None
    logp_target: Optional[float] = None
    token_count: Optional[int] = None


@dataclass
class Dataset:
    records: List[LogRecord]
    folds: FoldMap
    tf_caches: Dict[str, List[TFCacheEntry]] = field(default_factory=dict)
    fresh_draws: Dict[str, List[FreshDrawRecord]] = field(default_factory=dict)
    filter_ledger: Dict[str, int] = field(default_factory=dict)
    tf_ledger: Dict[str, Dict[str, int]] = field(default_factory=dict)
    fresh_ledger: Dict[str, int] = field(default_factory=dict)
    raw_rows: int = 0

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.x_id)
        self._index = {r.x_id: i for i, r in enumerate(self.records)}
        self._cache = {}

    def __len__(self):
        return len(self.records)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def policies(self) -> List[str]:
        return sorted(set(self.tf_caches) | set(self.fresh_draws))

    def index_of(self, x_id: str) -> int:
        return self._index[x_id]

    def has_x_id(self, x_id: str) -> bool:
        return x_id in self._index

    # Array views; cached because records are never mutated after construction.
    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def x_ids(self) -> List[str]:
        return self._cached("x_ids", lambda: [r.x_id for r in self.records])

    @property
    def S(self) -> np.ndarray:
        return self._cached("S", lambda: np.array([r.judge_S for r in self.records], dtype=float))

    @property
    def Y(self) -> np.ndarray:
        """Oracle labels with NaN where unlabeled."""
        return self._cached(
            "Y",
            lambda: np.array(
                [np.nan if r.oracle_Y is None else r.oracle_Y for r in self.records], dtype=float
            ),
        )

    @property
    def labeled(self) -> np.ndarray:
        return self._cached("L", lambda: ~np.isnan(self.Y))

    @property
    def fold_ids(self) -> np.ndarray:
        return self._cached("folds", lambda: np.array([r.fold_id for r in self.records], dtype=int))

    @property
    def logp_pi0(self) -> np.ndarray:
        return self._cached("logp0", lambda: np.array([r.logp_pi0 for r in self.records], dtype=float))

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        names = tuple(names)

        def build():
            out = np.empty((self.n, len(names)))
            for i, r in enumerate(self.records):
                for j, name in enumerate(names):
                    if name not in r.covariates:
                        raise KeyError(f"record {r.x_id!r} lacks covariate {name!r}")
                    out[i, j] = r.covariates[name]
            return out

        return self._cached(("cov", names), build)

    def target_logp(self, policy: str):
        """Return (row indices with a TF entry, logp_pi_prime, token_count) for ``policy``."""

        def build():
            entries = self.tf_caches.get(policy, [])
            idx = np.array([self._index[e.x_id] for e in entries], dtype=int)
            lp = np.array([e.logp_pi_prime for e in entries], dtype=float)
            tok = np.array([e.token_count for e in entries], dtype=float)
            order = np.argsort(idx, kind="stable")
            return idx[order], lp[order], tok[order]

        return self._cached(("tf", policy), build)

    def log_ratios(self, policy: str):
        """Row indices (complete cases) and log importance ratios for ``policy``."""
        idx, lp, _ = self.target_logp(policy)
        return idx, lp - self.logp_pi0[idx]

    def fresh_arrays(self, policy: str, covariate_names: Sequence[str] = ()):
        """Fresh draws for ``policy`` as arrays, ordered by (x_id, input order)."""
        names = tuple(covariate_names)

        def build():
            draws = sorted(self.fresh_draws.get(policy, []), key=lambda d: d.x_id)
            x_ids = [d.x_id for d in draws]
            S = np.array([d.judge_S for d in draws], dtype=float)
            X = np.array([[d.covariates[c] for c in names] for d in draws], dtype=float).reshape(
                len(draws), len(names)
            )
            Y = np.array([np.nan if d.oracle_Y is None else d.oracle_Y for d in draws], dtype=float)
            lp = np.array([np.nan if d.logp_target is None else d.logp_target for d in draws])
            tok = np.array([np.nan if d.token_count is None else d.token_count for d in draws])
            folds = np.array([self.folds(x) for x in x_ids], dtype=int)
            return {"x_ids": x_ids, "S": S, "X": X, "Y": Y, "logp": lp, "tokens": tok, "folds": folds}

        return self._cached(("fresh", policy, names), build)

    def with_tf_cache(self, policy: str, entries: List[TFCacheEntry], ledger: Dict[str, int]) -> "Dataset":
        caches = dict(self.tf_caches)
        caches[policy] = sorted(entries, key=lambda e: e.x_id)
        tf_ledger = {k: dict(v) for k, v in self.tf_ledger.items()}
        tf_ledger[policy] = dict(ledger)
        return Dataset(
            records=self.records,
            folds=self.folds,
            tf_caches=caches,
            fresh_draws=self.fresh_draws,
            filter_ledger=self.filter_ledger,
            tf_ledger=tf_ledger,
            fresh_ledger=self.fresh_ledger,
            raw_rows=self.raw_rows,
        )

    def with_fresh_draws(self, draws: Dict[str, List[FreshDrawRecord]], ledger: Dict[str, int]) -> "Dataset":
        fresh = dict(self.fresh_draws)
        for policy, rows in draws.items():
            fresh[policy] = fresh.get(policy, []) + list(rows)
        merged = Counter(self.fresh_ledger)
        merged.update(ledger)
        return Dataset(
            records=self.records,
            folds=self.folds,
            tf_caches=self.tf_caches,
            fresh_draws=fresh,
            filter_ledger=self.filter_ledger,
            tf_ledger=self.tf_ledger,
            fresh_ledger=dict(merged),
            raw_rows=self.raw_rows,
        )

    def to_jsonable(self) -> dict:
        return {
            "n_records": self.n,
            "raw_rows": self.raw_rows,
            "K": self.folds.K,
            "n_labeled": int(self.labeled.sum()),
            "filter_ledger": dict(sorted(self.filter_ledger.items())),
            "tf_ledger": {p: dict(sorted(v.items())) for p, v in sorted(self.tf_ledger.items())},
            "fresh_ledger": dict(sorted(self.fresh_ledger.items())),
            "tf_counts": {p: len(v) for p, v in sorted(self.tf_caches.items())},
            "fresh_counts": {p: len(v) for p, v in sorted(self.fresh_draws.items())},
            "inclusion_manifest": self.x_ids,
            "fold_ids": [int(f) for f in self.fold_ids],
        }


def _finite(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _read_jsonl(path) -> List[Optional[dict]]:
    """Parse a JSONL file; malformed lines come back as ``None``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            rows.append(None)
            continue
        rows.append(obj if isinstance(obj, dict) else None)
    return rows


def _parse_covariates(obj) -> Optional[Dict[str, float]]:
    cov = obj.get("covariates", {})
    if cov is None:
        return {}
    if not isinstance(cov, dict):
        return None
    out = {}
    for key, value in cov.items():
        if not _finite(value):
            return None
        out[str(key)] = float(value)
    return out


def _check_log_row(obj) -> tuple:
    """Return (record_fields, None) or (None, reason)."""
    if obj is None or not isinstance(obj.get("x_id"), str) or not obj["x_id"]:
        return None, "malformed_row"
    S = obj.get("judge_S")
    if S is None or not _finite(S):
        return None, "missing_judge_score"
    if not 0.0 <= S <= 1.0:
        return None, "score_out_of_range"
    has_y = obj.get("oracle_Y") is not None
    if "L" in obj and bool(obj["L"]) != has_y:
        return None, "label_inconsistent"
    Y = obj.get("oracle_Y")
    if has_y:
        if not _finite(Y):
            return None, "label_out_of_range"
        if not 0.0 <= Y <= 1.0:
            return None, "label_out_of_range"
    lp = obj.get("logp_pi0")
    if lp is None or not _finite(lp):
        return None, "nonfinite_logp"
    if lp > 0:
        return None, "positive_logp"
    cov = _parse_covariates(obj)
    if cov is None:
        return None, "invalid_covariates"
    return (obj["x_id"], float(S), None if Y is None else float(Y), cov, float(lp)), None


def build_dataset(rows: Sequence[Optional[dict]], K: int = 5) -> Dataset:
    """Validate already-parsed log rows; see :func:`ingest_logs`."""
    folds = FoldMap(K)
    ledger: Counter = Counter()
    seen = set()
    records = []
    for obj in rows:
        fields, reason = _check_log_row(obj)
        if reason is not None:
            ledger[reason] += 1
            continue
        x_id = fields[0]
        if x_id in seen:
            ledger["duplicate_x_id"] += 1
            continue
        seen.add(x_id)
        records.append(LogRecord(*fields, fold_id=folds(x_id)))
    if not records:
        raise IngestError("no valid log rows")
    return Dataset(records=records, folds=folds, filter_ledger=dict(ledger), raw_rows=len(rows))


def ingest_logs(path, K: int = 5) -> Dataset:
    """Read a JSONL log file into a :class:`Dataset`.

    Invalid rows are dropped and counted by reason in ``filter_ledger``;
    ``fold_id`` is always recomputed from ``x_id`` and any value in the
    input is ignored.
    """
    return build_dataset(_read_jsonl(path), K=K)


def _check_tf_row(obj, dataset: Dataset, eps: float) -> tuple:
    if obj is None or not isinstance(obj.get("x_id"), str):
        return None, "tf_malformed"
    lp = obj.get("logp_pi_prime")
    if lp is None or not _finite(lp):
        return None, "tf_nonfinite"
    if lp > 0:
        return None, "tf_positive_logp"
    if not dataset.has_x_id(obj["x_id"]):
        return None, "tf_unknown_x_id"
    tok = obj.get("token_count")
    if not isinstance(tok, int) or isinstance(tok, bool) or tok < 1:
        return None, "tf_malformed"
    prefix, joint = obj.get("logp_prefix"), obj.get("logp_joint")
    if prefix is not None and joint is not None:
        if not (_finite(prefix) and _finite(joint)):
            return None, "tf_nonfinite"
        if abs(joint - (prefix + lp)) >= eps:
            return None, "tf_additivity"
    per_token = obj.get("per_token_logp")
    if per_token is not None:
        if not isinstance(per_token, list) or not all(_finite(v) for v in per_token):
            return None, "tf_malformed"
        per_token = tuple(float(v) for v in per_token)
    entry = TFCacheEntry(
        x_id=obj["x_id"],
        policy=str(obj.get("policy", "")),
        logp_pi_prime=float(lp),
        token_count=int(tok),
        logp_prefix=None if prefix is None else float(prefix),
        logp_joint=None if joint is None else float(joint),
        per_token_logp=per_token,
    )
    return entry, None


def attach_tf_rows(
    rows: Sequence[Optional[dict]],
    dataset: Dataset,
    policy: Optional[str] = None,
    eps_additivity: float = DEFAULT_EPS_ADDITIVITY,
) -> Dataset:
    """Validate parsed TF-cache rows and attach them; see :func:`ingest_tf_cache`."""
    by_policy: Dict[str, List[TFCacheEntry]] = {}
    ledgers: Dict[str, Counter] = {}
    seen: Dict[str, set] = {}
    unnamed: Counter = Counter()
    for obj in rows:
        row_policy = policy if obj is None else str(obj.get("policy", policy or ""))
        if policy is not None and obj is not None and "policy" in obj and obj["policy"] != policy:
            continue
        if not row_policy:
            unnamed["tf_malformed"] += 1
            continue
        ledger = ledgers.setdefault(row_policy, Counter())
        entry, reason = _check_tf_row(obj, dataset, eps_additivity)
        if reason is not None:
            ledger[reason] += 1
            continue
        entry = TFCacheEntry(**{**entry.__dict__, "policy": row_policy})
        if entry.x_id in seen.setdefault(row_policy, set()):
            ledger["tf_duplicate"] += 1
            continue
        seen[row_policy].add(entry.x_id)
        by_policy.setdefault(row_policy, []).append(entry)

    out = dataset
    for name in sorted(ledgers):
        entries = sorted(by_policy.get(name, []), key=lambda e: e.x_id)
        if name in out.tf_caches:
            if out.tf_caches[name] == entries:
                continue
            raise IngestError(f"policy {name!r} already has a different TF cache")
        ledger = ledgers[name]
        missing = out.n - len(entries)
        if missing:
            ledger["missing_target_logp"] += missing
        out = out.with_tf_cache(name, entries, dict(ledger))
    if unnamed:
        ledger = {k: dict(v) for k, v in out.tf_ledger.items()}
        ledger["<unnamed>"] = dict(unnamed)
        out.tf_ledger = ledger
    return out


def ingest_tf_cache(
    path,
    dataset: Dataset,
    policy: Optional[str] = None,
    eps_additivity: float = DEFAULT_EPS_ADDITIVITY,
) -> Dataset:
    """Attach a JSONL teacher-forcing cache to ``dataset``.

    Rows with a positive or non-finite ``logp_pi_prime``, an additivity
    violation ``|logp_joint - (logp_prefix + logp_pi_prime)| >= eps``, or an
    ``x_id`` absent from the logs are discarded and counted in
    ``dataset.tf_ledger[policy]``. Log rows without an entry are counted as
    ``missing_target_logp``; they stay available for the Direct estimator.
    """
    return attach_tf_rows(_read_jsonl(path), dataset, policy, eps_additivity)


def attach_fresh_rows(rows: Sequence[Optional[dict]], dataset: Dataset, policy: Optional[str] = None) -> Dataset:
    ledger: Counter = Counter()
    draws: Dict[str, List[FreshDrawRecord]] = {}
    for obj in rows:
        if obj is None or not isinstance(obj.get("x_id"), str):
            ledger["fresh_malformed"] += 1
            continue
        name = str(obj.get("policy", policy or ""))
        if policy is not None and name != policy:
            continue
        S = obj.get("judge_S")
        if S is None or not _finite(S) or not 0.0 <= S <= 1.0:
            ledger["fresh_score_invalid"] += 1
            continue
        if not dataset.has_x_id(obj["x_id"]):
            ledger["fresh_unknown_x_id"] += 1
            continue
        cov = _parse_covariates(obj)
        Y = obj.get("oracle_Y")
        lp = obj.get("logp_target")
        tok = obj.get("token_count")
        if cov is None or (Y is not None and (not _finite(Y) or not 0 <= Y <= 1)):
            ledger["fresh_malformed"] += 1
            continue
        if lp is not None and (not _finite(lp) or lp > 0):
            lp = None
        draws.setdefault(name, []).append(
            FreshDrawRecord(
                x_id=obj["x_id"],
                policy=name,
                judge_S=float(S),
                covariates=cov,
                oracle_Y=None if Y is None else float(Y),
                logp_target=None if lp is None else float(lp),
                token_count=None if tok is None else int(tok),
            )
        )
    return dataset.with_fresh_draws(draws, dict(ledger))


def ingest_fresh_draws(path, dataset: Dataset, policy: Optional[str] = None) -> Dataset:
    """Attach JSONL fresh draws (target-policy rollouts scored by the judge)."""
    return attach_fresh_rows(_read_jsonl(path), dataset, policy)


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
