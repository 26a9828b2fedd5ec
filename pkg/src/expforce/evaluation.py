"""Cross-validation protocol, metrics, outcome labels, and report emission.

The protocol: partition the pool into seeded folds, query every record
exactly once, and restrict each query's retrieval candidates to the records
outside its own fold. Per-query failures (transport trouble, unparseable
responses) are recorded, never imputed. Reports are emitted with no
timestamps and fully sorted keys, so a rerun with the same configuration
reproduces them byte for byte regardless of concurrency.

Metric conventions: std_n inside a MetricBlock is the population standard
deviation (ddof 0) of per-query absolute errors; sweep points additionally
carry the spread of per-fold MAEs for plot shading.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, ExpForceError, InvalidArgument, InvalidK
from .gateway import EmbeddingVector, Gateway, embed
from .pool import Category, Pool, load_image, partition_folds, pool_digest
from .predictors import BackendKind, PredictionRequest, run_prediction
from .prompting import PromptTemplates, SharedContext, default_templates

log = logging.getLogger(__name__)

_RETRIEVAL_BACKENDS = (BackendKind.EXP_FORCE, BackendKind.KNN_AVERAGE)
_MODEL_BACKENDS = (BackendKind.EXP_FORCE, BackendKind.ZERO_SHOT)


class Outcome(str, Enum):
    APPROPRIATE = "Appropriate"
    OVERESTIMATE = "Overestimate"
    INSUFFICIENT = "Insufficient"


def classify_outcome(f_hat_n: float, f_star_n: float, lift_succeeded: bool) -> Outcome:
    """Label one grasp. Both overestimate bounds are strict: exactly 3x the
    minimum force, or exactly 4 N over it, still counts as Appropriate."""
    if not lift_succeeded:
        return Outcome.INSUFFICIENT
    if f_hat_n > 3.0 * f_star_n or f_hat_n > f_star_n + 4.0:
        return Outcome.OVERESTIMATE
    return Outcome.APPROPRIATE


def offline_lift_success(f_hat_n: float, f_star_n: float) -> bool:
    """Proxy for a physical lift when no hardware trial exists."""
    return f_hat_n >= f_star_n


@dataclass(frozen=True)
class MetricBlock:
    """Aggregate error stats over n (f_hat, f_star) pairs."""

    mae_n: float
    rmse_n: float
    std_n: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgument("metric block needs n >= 1")
        if self.mae_n < 0 or self.rmse_n < 0 or self.std_n < 0:
            raise InvalidArgument("metrics must be non-negative")
        # Jensen guarantees rmse >= mae mathematically; allow one-ulp float slack.
        if self.rmse_n < self.mae_n - 1e-9 * max(1.0, self.mae_n):
            raise InvalidArgument("rmse below mae beyond float tolerance")

    def as_dict(self) -> dict:
        return {"mae_n": self.mae_n, "rmse_n": self.rmse_n, "std_n": self.std_n, "n": self.n}


def compute_metrics(pairs: Sequence[tuple[float, float]]) -> MetricBlock:
    """MAE, RMSE, and the std of absolute errors over (f_hat, f_star) pairs."""
    if len(pairs) == 0:
        raise EmptyInput("no prediction pairs to score")
    arr = np.asarray(pairs, dtype=np.float64)
    abs_err = np.abs(arr[:, 0] - arr[:, 1])
    return MetricBlock(
        mae_n=float(np.mean(abs_err)),
        rmse_n=float(np.sqrt(np.mean(abs_err ** 2))),
        std_n=float(np.std(abs_err)),
        n=int(abs_err.size),
    )


@dataclass(frozen=True)
class QueryRow:
    """Per-query evaluation record; error is set exactly when f_hat_n is not."""

    query_id: str
    fold: int
    category: Category
    f_star_n: float
    f_hat_n: float | None
    outcome: Outcome | None
    clamped: bool
    error: str | None

    def as_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "fold": self.fold,
            "category": self.category.value,
            "f_star_n": self.f_star_n,
            "f_hat_n": self.f_hat_n,
            "outcome": self.outcome.value if self.outcome else None,
            "clamped": self.clamped,
            "error": self.error,
        }


@dataclass(frozen=True)
class EvalReport:
    """Everything one cross-validation run produced."""

    backend: BackendKind
    k: int
    n_folds: int
    seed: int
    config_fingerprint: str
    overall: MetricBlock | None
    per_fold: tuple[MetricBlock | None, ...]
    per_category: dict[Category, MetricBlock]
    outcomes: dict[Outcome, int]
    per_category_outcomes: dict[Category, dict[Outcome, int]]
    failures: int
    queries: tuple[QueryRow, ...]

    def __post_init__(self):
        classified = sum(self.outcomes.values())
        if classified + self.failures != len(self.queries):
            raise InvalidArgument("outcome counts plus failures must equal query count")


@dataclass(frozen=True)
class SweepPoint:
    k: int
    overall: MetricBlock | None
    fold_mae_std: float


@dataclass(frozen=True)
class SweepResult:
    backend: BackendKind
    n_folds: int
    seed: int
    config_fingerprint: str
    points: tuple[SweepPoint, ...]

    def __post_init__(self):
        ks = [p.k for p in self.points]
        if ks != sorted(set(ks)):
            raise InvalidArgument("sweep points must have strictly increasing k")


@dataclass
class EvalSetup:
    """Everything besides the pool that a run needs: endpoints, context,
    instruction templates, where images live, and how many queries may be
    in flight at once. Concurrency affects wall time only, never results."""

    backend: BackendKind
    gateway: Gateway
    pool_root: str | Path
    context: SharedContext | None = None
    templates: PromptTemplates | None = None
    concurrency: int = 1

    def __post_init__(self):
        if self.concurrency < 1:
            raise InvalidArgument("concurrency must be >= 1")
        if self.context is None:
            self.context = SharedContext.from_templates()
        if self.templates is None:
            self.templates = default_templates()


def _context_fingerprint(ctx: SharedContext) -> str:
    h = hashlib.sha256()

    def put(data: bytes):
        h.update(len(data).to_bytes(8, "big"))
        h.update(data)

    put(ctx.task_objective.encode("utf-8"))
    put(ctx.embodiment_text.encode("utf-8"))
    put(b"1" if ctx.include_embodiment else b"0")
    for ref in (ctx.embodiment_image_ref, ctx.scale_reference_image_ref):
        put(Path(ref).read_bytes() if ref is not None else b"")
    return h.hexdigest()


def config_fingerprint(pool_root: str | Path, setup: EvalSetup, k_spec: str,
                       n_folds: int, seed: int) -> str:
    """Digest of every result-affecting input. Concurrency and output paths
    stay out on purpose: they must not change a single byte of the report."""
    body = {
        "pool": pool_digest(pool_root),
        "backend": setup.backend.value,
        "k": k_spec,
        "n_folds": n_folds,
        "seed": seed,
        "gateway": setup.gateway.fingerprint(),
        "context": _context_fingerprint(setup.context),
        "templates": hashlib.sha256(
            "\x1e".join([setup.templates.context, setup.templates.desc_instruction,
                         setup.templates.pred_instruction]).encode("utf-8")).hexdigest(),
        "outcome_mode": "offline-proxy",
    }
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


def _embed_pool(pool: Pool, setup: EvalSetup) -> dict[str, EmbeddingVector]:
    """Embed every record from its stored image and description."""
    if setup.gateway.embedder is None:
        raise InvalidArgument(f"backend {setup.backend.value} needs an embedding provider")
    vectors = {}
    for rec in pool:
        vectors[rec.id] = embed(setup.gateway.embedder, load_image(setup.pool_root, rec),
                                rec.description)
    return vectors


def _run_queries(pool: Pool, setup: EvalSetup, k: int, seed: int,
                 folds: Sequence[tuple[list[str], list[str]]],
                 embeddings: dict[str, EmbeddingVector]) -> list[QueryRow]:
    jobs = []
    for fold_idx, (query_ids, pool_ids) in enumerate(folds):
        for qid in query_ids:
            jobs.append((fold_idx, qid, pool_ids))

    def one(job) -> QueryRow:
        fold_idx, qid, pool_ids = job
        rec = pool.by_id(qid)
        req = PredictionRequest(query_id=qid,
                                query_image_ref=Path(setup.pool_root) / rec.image_ref,
                                k=k, backend=setup.backend, seed=seed)
        try:
            pred = run_prediction(req, pool=pool, embeddings=embeddings,
                                  ctx=setup.context, gateway=setup.gateway,
                                  pool_root=setup.pool_root, pool_ids=pool_ids,
                                  templates=setup.templates)
        except ExpForceError as exc:
            log.warning("query %s failed: %s", qid, exc)
            return QueryRow(qid, fold_idx, rec.category, rec.f_star_n,
                            None, None, False, f"{type(exc).__name__}: {exc}")
        outcome = classify_outcome(pred.f_hat_n, rec.f_star_n,
                                   offline_lift_success(pred.f_hat_n, rec.f_star_n))
        return QueryRow(qid, fold_idx, rec.category, rec.f_star_n,
                        pred.f_hat_n, outcome, pred.clamped, None)

    if setup.concurrency > 1:
        with ThreadPoolExecutor(max_workers=setup.concurrency) as pool_exec:
            rows = list(pool_exec.map(one, jobs))
    else:
        rows = [one(job) for job in jobs]
    rows.sort(key=lambda r: (r.fold, r.query_id))
    return rows


def _aggregate(rows: Sequence[QueryRow], n_folds: int) -> tuple:
    scored = [r for r in rows if r.f_hat_n is not None]
    overall = compute_metrics([(r.f_hat_n, r.f_star_n) for r in scored]) if scored else None
    per_fold = []
    for f in range(n_folds):
        fold_rows = [r for r in scored if r.fold == f]
        per_fold.append(
            compute_metrics([(r.f_hat_n, r.f_star_n) for r in fold_rows]) if fold_rows else None)
    per_category = {}
    per_category_outcomes = {}
    for cat in Category:
        cat_rows = [r for r in scored if r.category == cat]
        if not cat_rows:
            continue
        per_category[cat] = compute_metrics([(r.f_hat_n, r.f_star_n) for r in cat_rows])
        per_category_outcomes[cat] = {
            out: sum(1 for r in cat_rows if r.outcome == out) for out in Outcome}
    outcomes = {out: sum(1 for r in scored if r.outcome == out) for out in Outcome}
    failures = len(rows) - len(scored)
    return overall, tuple(per_fold), per_category, outcomes, per_category_outcomes, failures


def _run_cv_core(pool: Pool, setup: EvalSetup, k: int, n_folds: int, seed: int,
                 folds, embeddings, fingerprint: str) -> EvalReport:
    rows = _run_queries(pool, setup, k, seed, folds, embeddings)
    overall, per_fold, per_category, outcomes, per_cat_out, failures = _aggregate(rows, n_folds)
    return EvalReport(backend=setup.backend, k=k, n_folds=n_folds, seed=seed,
                      config_fingerprint=fingerprint, overall=overall, per_fold=per_fold,
                      per_category=per_category, outcomes=outcomes,
                      per_category_outcomes=per_cat_out, failures=failures,
                      queries=tuple(rows))


def _needs_embeddings(backend: BackendKind, ks: Iterable[int]) -> bool:
    return backend in _RETRIEVAL_BACKENDS and any(k > 0 for k in ks)


def _check_k(backend: BackendKind, k: int) -> None:
    if k < 0:
        raise InvalidK("k must be non-negative")
    if k == 0 and backend not in _MODEL_BACKENDS:
        raise InvalidK(f"k=0 has no meaning for backend {backend.value}")


def run_cross_validation(pool: Pool, setup: EvalSetup, k: int,
                         n_folds: int = 5, seed: int = 0) -> EvalReport:
    """Evaluate one backend at one k over seeded folds.

    Every record is queried exactly once; its own fold's records are never
    retrieval candidates. Embeddings are computed once per record up front
    (for backends that retrieve), from the stored image and description.
    """
    _check_k(setup.backend, k)
    folds = partition_folds(pool, n_folds, seed)
    embeddings = _embed_pool(pool, setup) if _needs_embeddings(setup.backend, [k]) else {}
    fingerprint = config_fingerprint(setup.pool_root, setup, str(k), n_folds, seed)
    return _run_cv_core(pool, setup, k, n_folds, seed, folds, embeddings, fingerprint)


def run_k_sweep(pool: Pool, setup: EvalSetup, k_values: Sequence[int],
                n_folds: int = 5, seed: int = 0) -> SweepResult:
    """Run the full protocol at each k, sharing folds and embeddings.

    The fold partition is computed once and the pool is embedded once, so
    points differ only in how many experiences each prompt carries.
    """
    if not k_values:
        raise InvalidArgument("k_values must be non-empty")
    ks = sorted(set(int(k) for k in k_values))
    for k in ks:
        _check_k(setup.backend, k)
    folds = partition_folds(pool, n_folds, seed)
    embeddings = _embed_pool(pool, setup) if _needs_embeddings(setup.backend, ks) else {}
    sweep_fp = config_fingerprint(setup.pool_root, setup, ",".join(map(str, ks)), n_folds, seed)
    points = []
    for k in ks:
        fp = config_fingerprint(setup.pool_root, setup, str(k), n_folds, seed)
        report = _run_cv_core(pool, setup, k, n_folds, seed, folds, embeddings, fp)
        fold_maes = [mb.mae_n for mb in report.per_fold if mb is not None]
        fold_std = float(np.std(np.asarray(fold_maes, dtype=np.float64))) if fold_maes else 0.0
        points.append(SweepPoint(k=k, overall=report.overall, fold_mae_std=fold_std))
    return SweepResult(backend=setup.backend, n_folds=n_folds, seed=seed,
                       config_fingerprint=sweep_fp, points=tuple(points))


# --- serialization -----------------------------------------------------------


def report_to_dict(report: EvalReport) -> dict:
    return {
        "kind": "cv-report",
        "backend": report.backend.value,
        "k": report.k,
        "n_folds": report.n_folds,
        "seed": report.seed,
        "config_fingerprint": report.config_fingerprint,
        "overall": report.overall.as_dict() if report.overall else None,
        "per_fold": [mb.as_dict() if mb else None for mb in report.per_fold],
        "per_category": {cat.value: mb.as_dict() for cat, mb in report.per_category.items()},
        "outcomes": {out.value: report.outcomes.get(out, 0) for out in Outcome},
        "per_category_outcomes": {
            cat.value: {out.value: counts.get(out, 0) for out in Outcome}
            for cat, counts in report.per_category_outcomes.items()},
        "failures": report.failures,
        "queries": [row.as_dict() for row in report.queries],
    }


def sweep_to_dict(sweep: SweepResult) -> dict:
    return {
        "kind": "k-sweep",
        "backend": sweep.backend.value,
        "n_folds": sweep.n_folds,
        "seed": sweep.seed,
        "config_fingerprint": sweep.config_fingerprint,
        "points": [
            {"k": p.k, "overall": p.overall.as_dict() if p.overall else None,
             "fold_mae_std": p.fold_mae_std}
            for p in sweep.points],
    }


def _metric_block_from(obj) -> MetricBlock | None:
    if obj is None:
        return None
    return MetricBlock(mae_n=obj["mae_n"], rmse_n=obj["rmse_n"], std_n=obj["std_n"], n=obj["n"])


def report_from_dict(body: dict) -> "EvalReport | SweepResult":
    kind = body.get("kind")
    if kind == "k-sweep":
        return SweepResult(
            backend=BackendKind(body["backend"]), n_folds=body["n_folds"], seed=body["seed"],
            config_fingerprint=body["config_fingerprint"],
            points=tuple(SweepPoint(k=p["k"], overall=_metric_block_from(p["overall"]),
                                    fold_mae_std=p["fold_mae_std"]) for p in body["points"]))
    if kind != "cv-report":
        raise InvalidArgument(f"unknown results kind {kind!r}")
    queries = tuple(
        QueryRow(query_id=q["query_id"], fold=q["fold"], category=Category(q["category"]),
                 f_star_n=q["f_star_n"], f_hat_n=q["f_hat_n"],
                 outcome=Outcome(q["outcome"]) if q["outcome"] else None,
                 clamped=q["clamped"], error=q["error"])
        for q in body["queries"])
    return EvalReport(
        backend=BackendKind(body["backend"]), k=body["k"], n_folds=body["n_folds"],
        seed=body["seed"], config_fingerprint=body["config_fingerprint"],
        overall=_metric_block_from(body["overall"]),
        per_fold=tuple(_metric_block_from(mb) for mb in body["per_fold"]),
        per_category={Category(c): _metric_block_from(mb)
                      for c, mb in body["per_category"].items()},
        outcomes={Outcome(o): n for o, n in body["outcomes"].items()},
        per_category_outcomes={
            Category(c): {Outcome(o): n for o, n in counts.items()}
            for c, counts in body["per_category_outcomes"].items()},
        failures=body["failures"], queries=queries)


def _outcome_percents(counts: dict[Outcome, int]) -> dict[Outcome, float]:
    total = sum(counts.values())
    if total == 0:
        return {out: 0.0 for out in Outcome}
    return {out: 100.0 * counts.get(out, 0) / total for out in Outcome}


def _markdown_report(report: EvalReport) -> str:
    lines = [
        "# Cross-validation report",
        "",
        f"backend: {report.backend.value} | k: {report.k} | folds: {report.n_folds}"
        f" | seed: {report.seed}",
        f"queries: {len(report.queries)} | failures: {report.failures}",
        f"config_fingerprint: {report.config_fingerprint}",
        "",
        "| Category | n | Appr. [%] | Overest. [%] | Insuff. [%] | MAE ± STD [N] | RMSE [N] |",
        "|---|---|---|---|---|---|---|",
    ]

    def row(label: str, mb: MetricBlock | None, counts: dict[Outcome, int]) -> str:
        if mb is None:
            return f"| {label} | 0 | - | - | - | - | - |"
        pct = _outcome_percents(counts)
        return (f"| {label} | {mb.n} | {pct[Outcome.APPROPRIATE]:.1f} "
                f"| {pct[Outcome.OVERESTIMATE]:.1f} | {pct[Outcome.INSUFFICIENT]:.1f} "
                f"| {mb.mae_n:.3f} ± {mb.std_n:.3f} | {mb.rmse_n:.3f} |")

    for cat in Category:
        if cat in report.per_category:
            lines.append(row(cat.value, report.per_category[cat],
                             report.per_category_outcomes[cat]))
    lines.append(row("Overall", report.overall, report.outcomes))
    lines.append("")
    return "\n".join(lines)


def _markdown_sweep(sweep: SweepResult) -> str:
    lines = [
        "# k sweep",
        "",
        f"backend: {sweep.backend.value} | folds: {sweep.n_folds} | seed: {sweep.seed}",
        f"config_fingerprint: {sweep.config_fingerprint}",
        "",
        "| k | MAE [N] | fold MAE std [N] | n |",
        "|---|---|---|---|",
    ]
    for p in sweep.points:
        if p.overall is None:
            lines.append(f"| {p.k} | - | - | 0 |")
        else:
            lines.append(f"| {p.k} | {p.overall.mae_n:.3f} | {p.fold_mae_std:.3f} "
                         f"| {p.overall.n} |")
    lines.append("")
    return "\n".join(lines)


def emit_report(result: "EvalReport | SweepResult", out_dir: str | Path) -> list[Path]:
    """Write results under out_dir and return the paths written.

    Cross-validation reports become report.json and report.md; sweeps become
    sweep.json and the plot-ready sweep.csv (header `k,mae_n,std_n`, std
    being the across-fold MAE spread). Emission is deterministic: emitting
    the same object twice writes identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(result, EvalReport):
        json_path = out / "report.json"
        json_path.write_text(
            json.dumps(report_to_dict(result), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        md_path = out / "report.md"
        md_path.write_text(_markdown_report(result), encoding="utf-8")
        written = [json_path, md_path]
    elif isinstance(result, SweepResult):
        json_path = out / "sweep.json"
        json_path.write_text(
            json.dumps(sweep_to_dict(result), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        csv_path = out / "sweep.csv"
        csv_lines = ["k,mae_n,std_n"]
        for p in sweep_points_for_csv(result):
            csv_lines.append(p)
        csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
        md_path = out / "sweep.md"
        md_path.write_text(_markdown_sweep(result), encoding="utf-8")
        written = [json_path, csv_path, md_path]
    else:
        raise InvalidArgument(f"cannot emit a {type(result).__name__}")
    return written


def sweep_points_for_csv(sweep: SweepResult) -> list[str]:
    rows = []
    for p in sweep.points:
        mae = repr(p.overall.mae_n) if p.overall else ""
        rows.append(f"{p.k},{mae},{p.fold_mae_std!r}")
    return rows
