"""Command-line interface.

Commands mirror the pipeline stages: build or validate pools, embed them,
retrieve, describe, predict single queries, and run the evaluation
protocols. Every command prints the effective config fingerprint so runs
can be audited and compared. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import ExpForceError, InvalidArgument
from .evaluation import (
    EvalReport,
    EvalSetup,
    emit_report,
    report_from_dict,
    run_cross_validation,
    run_k_sweep,
)
from .gateway import embed as embed_op
from .oracle import generate_synthetic_pool
from .pool import load_image, load_pool, pool_digest
from .predictors import BackendKind, PredictionRequest, run_prediction
from .prompting import describe_object
from .retrieval import top_k

log = logging.getLogger(__name__)

_BACKEND_CHOICES = [b.value for b in BackendKind]


def _fingerprint_line(parts: dict) -> None:
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True).encode("utf-8")).hexdigest()
    print(f"config-fingerprint: {digest}")


def _load_cfg(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_run_config(getattr(args, "config", None))
    return cfgmod.override(
        cfg,
        seed=getattr(args, "seed", None),
        concurrency_limit=getattr(args, "concurrency", None),
        cache_dir=Path(args.cache_dir) if getattr(args, "cache_dir", None) else None,
    )


def _query_rows(report: EvalReport) -> None:
    for row in report.queries:
        if row.error is not None:
            print(f"QUERY query_id={row.query_id} fold={row.fold} "
                  f"backend={report.backend.value} k={report.k} error={row.error!r}")
        else:
            print(f"QUERY query_id={row.query_id} fold={row.fold} "
                  f"backend={report.backend.value} k={report.k} "
                  f"f_hat_n={row.f_hat_n!r} f_star_n={row.f_star_n!r} "
                  f"outcome={row.outcome.value} clamped={row.clamped}")


# --- command handlers ------------------------------------------------------


def _cmd_pool_validate(args) -> int:
    pool = load_pool(args.pool_dir)
    _fingerprint_line({"command": "pool validate", "pool": pool_digest(args.pool_dir)})
    categories = sorted({rec.category.value for rec in pool})
    print(f"OK: {len(pool)} records, categories: {', '.join(categories)}")
    return 0


def _cmd_synth_pool(args) -> int:
    cfg = _load_cfg(args)
    pool = generate_synthetic_pool(args.n, cfg.seed, args.out, cfg.oracle)
    _fingerprint_line({"command": "synth-pool", "n": args.n, "seed": cfg.seed,
                       "oracle": repr(cfg.oracle)})
    print(f"wrote {len(pool)} records to {args.out}")
    return 0


def _cmd_embed(args) -> int:
    cfg = _load_cfg(args)
    if cfg.cache_dir is None:
        cfg = cfgmod.override(cfg, cache_dir=Path(args.pool) / "cache")
    pool = load_pool(args.pool)
    gateway = cfgmod.build_gateway(cfg, pool, args.pool)
    _fingerprint_line({"command": "embed", "pool": pool_digest(args.pool),
                       "embedder": gateway.embedder.fingerprint()})
    d = None
    for rec in pool:
        vec = embed_op(gateway.embedder, load_image(args.pool, rec), rec.description)
        d = vec.d
    cache = getattr(gateway.embedder, "cache", None)
    stats = (f", cache hits={cache.hits} misses={cache.misses}" if cache else "")
    print(f"embedded {len(pool)} records (d={d}, provider={gateway.embedder.provider_id}{stats})")
    return 0


def _cmd_retrieve(args) -> int:
    cfg = _load_cfg(args)
    pool = load_pool(args.pool)
    gateway = cfgmod.build_gateway(cfg, pool, args.pool)
    templates = cfgmod.build_templates(cfg)
    ctx = cfgmod.build_context(cfg, templates)
    query_image = Path(args.query_image).read_bytes()
    description = args.description
    if description is None:
        description = describe_object(ctx, query_image, gateway.descriptor,
                                      instruction=templates.desc_instruction)
    _fingerprint_line({"command": "retrieve", "pool": pool_digest(args.pool),
                       "k": args.k, "description": description,
                       "embedder": gateway.embedder.fingerprint()})
    query_vec = embed_op(gateway.embedder, query_image, description)
    embeddings = {rec.id: embed_op(gateway.embedder, load_image(args.pool, rec), rec.description)
                  for rec in pool}
    result = top_k("<query>", query_vec, embeddings, args.k)
    for rank, entry in enumerate(result.entries, start=1):
        rec = pool.by_id(entry.record_id)
        print(f"RANK {rank} id={entry.record_id} similarity={entry.similarity:.6f} "
              f"f_star_n={rec.f_star_n!r} name={rec.name!r}")
    return 0


def _cmd_describe(args) -> int:
    cfg = _load_cfg(args)
    pool = load_pool(args.pool) if args.pool else None
    gateway = cfgmod.build_gateway(cfg, pool, args.pool)
    templates = cfgmod.build_templates(cfg)
    ctx = cfgmod.build_context(cfg, templates)
    query_image = Path(args.query_image).read_bytes()
    _fingerprint_line({"command": "describe",
                       "descriptor": gateway.descriptor.fingerprint()})
    print(describe_object(ctx, query_image, gateway.descriptor,
                          instruction=templates.desc_instruction))
    return 0


def _cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    pool = load_pool(args.pool)
    gateway = cfgmod.build_gateway(cfg, pool, args.pool)
    templates = cfgmod.build_templates(cfg)
    ctx = cfgmod.build_context(cfg, templates)
    backend = BackendKind(args.backend)
    query_id = args.query_id or "<query>"
    req = PredictionRequest(query_id=query_id, query_image_ref=args.query_image,
                            k=args.k, backend=backend, seed=cfg.seed)
    embeddings = {}
    if backend in (BackendKind.EXP_FORCE, BackendKind.KNN_AVERAGE) and args.k > 0:
        embeddings = {rec.id: embed_op(gateway.embedder, load_image(args.pool, rec),
                                       rec.description)
                      for rec in pool}
        if backend is BackendKind.KNN_AVERAGE and query_id not in embeddings:
            raise InvalidArgument("knn-average needs --query-id naming a pool record")
    _fingerprint_line({"command": "predict", "pool": pool_digest(args.pool),
                       "backend": backend.value, "k": args.k, "seed": cfg.seed,
                       "gateway": gateway.fingerprint()})
    pred = run_prediction(req, pool=pool, embeddings=embeddings, ctx=ctx,
                          gateway=gateway, pool_root=args.pool, templates=templates)
    retrieved = ",".join(pred.retrieved.record_ids())
    print(f"PREDICT query_id={pred.query_id} backend={pred.backend.value} k={args.k} "
          f"f_hat_n={pred.f_hat_n!r} clamped={pred.clamped} retrieved=[{retrieved}]")
    return 0


def _make_setup(cfg: cfgmod.RunConfig, pool, pool_root, backend: BackendKind) -> EvalSetup:
    gateway = cfgmod.build_gateway(cfg, pool, pool_root)
    templates = cfgmod.build_templates(cfg)
    ctx = cfgmod.build_context(cfg, templates)
    return EvalSetup(backend=backend, gateway=gateway, pool_root=pool_root,
                     context=ctx, templates=templates, concurrency=cfg.concurrency_limit)


def _cmd_eval_cv(args) -> int:
    cfg = _load_cfg(args)
    pool = load_pool(args.pool)
    setup = _make_setup(cfg, pool, args.pool, BackendKind(args.backend))
    report = run_cross_validation(pool, setup, args.k, n_folds=args.folds, seed=cfg.seed)
    print(f"config-fingerprint: {report.config_fingerprint}")
    _query_rows(report)
    for path in emit_report(report, args.out):
        print(f"wrote {path}")
    if report.overall:
        print(f"OVERALL backend={report.backend.value} k={report.k} "
              f"mae_n={report.overall.mae_n!r} rmse_n={report.overall.rmse_n!r} "
              f"failures={report.failures}")
    else:
        print(f"OVERALL backend={report.backend.value} k={report.k} no scored queries "
              f"failures={report.failures}")
    if args.strict and report.failures > 0:
        print(f"strict mode: {report.failures} failures", file=sys.stderr)
        return 1
    return 0


def _cmd_eval_sweep(args) -> int:
    cfg = _load_cfg(args)
    try:
        k_values = [int(part) for part in args.k_values.split(",") if part.strip()]
    except ValueError:
        raise InvalidArgument(f"--k-values must be comma-separated integers, got {args.k_values!r}")
    pool = load_pool(args.pool)
    setup = _make_setup(cfg, pool, args.pool, BackendKind(args.backend))
    sweep = run_k_sweep(pool, setup, k_values, n_folds=args.folds, seed=cfg.seed)
    print(f"config-fingerprint: {sweep.config_fingerprint}")
    for point in sweep.points:
        mae = repr(point.overall.mae_n) if point.overall else "nan"
        print(f"SWEEP k={point.k} mae_n={mae} fold_mae_std={point.fold_mae_std!r}")
    for path in emit_report(sweep, args.out):
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    body = json.loads(Path(args.results).read_text(encoding="utf-8"))
    result = report_from_dict(body)
    print(f"config-fingerprint: {result.config_fingerprint}")
    for path in emit_report(result, args.out):
        print(f"wrote {path}")
    return 0


# --- parser ------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="INI config path (default: $EXPFORCE_CONFIG if set)")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expforce",
        description="Grasp force prediction from retrieved prior experiences")
    sub = parser.add_subparsers(dest="command", required=True)

    p_pool = sub.add_parser("pool", help="pool maintenance")
    pool_sub = p_pool.add_subparsers(dest="pool_command", required=True)
    p_validate = pool_sub.add_parser("validate", help="validate a pool directory")
    p_validate.add_argument("pool_dir")
    _add_common(p_validate)
    p_validate.set_defaults(handler=_cmd_pool_validate)

    p_synth = sub.add_parser("synth-pool", help="generate a synthetic pool")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out", required=True)
    _add_common(p_synth)
    p_synth.set_defaults(handler=_cmd_synth_pool)

    p_embed = sub.add_parser("embed", help="embed every pool record into the cache")
    p_embed.add_argument("--pool", required=True)
    p_embed.add_argument("--cache-dir", default=None)
    _add_common(p_embed)
    p_embed.set_defaults(handler=_cmd_embed)

    p_retrieve = sub.add_parser("retrieve", help="rank pool records against a query image")
    p_retrieve.add_argument("--pool", required=True)
    p_retrieve.add_argument("--query-image", required=True)
    p_retrieve.add_argument("--description", default=None,
                            help="skip the descriptor endpoint and embed this text")
    p_retrieve.add_argument("--k", type=int, required=True)
    p_retrieve.add_argument("--cache-dir", default=None)
    _add_common(p_retrieve)
    p_retrieve.set_defaults(handler=_cmd_retrieve)

    p_describe = sub.add_parser("describe", help="describe a query image")
    p_describe.add_argument("--query-image", required=True)
    p_describe.add_argument("--pool", default=None,
                            help="lets the stub descriptor answer stored descriptions")
    _add_common(p_describe)
    p_describe.set_defaults(handler=_cmd_describe)

    p_predict = sub.add_parser("predict", help="predict a grasp force for one query")
    p_predict.add_argument("--backend", choices=_BACKEND_CHOICES, required=True)
    p_predict.add_argument("--k", type=int, required=True)
    p_predict.add_argument("--pool", required=True)
    p_predict.add_argument("--query-image", required=True)
    p_predict.add_argument("--query-id", default=None)
    p_predict.add_argument("--seed", type=int, default=None)
    p_predict.add_argument("--cache-dir", default=None)
    _add_common(p_predict)
    p_predict.set_defaults(handler=_cmd_predict)

    p_eval = sub.add_parser("eval", help="evaluation protocols")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True)

    p_cv = eval_sub.add_parser("cv", help="cross-validated evaluation at one k")
    p_cv.add_argument("--backend", choices=_BACKEND_CHOICES, required=True)
    p_cv.add_argument("--k", type=int, required=True)
    p_cv.add_argument("--pool", required=True)
    p_cv.add_argument("--folds", type=int, default=5)
    p_cv.add_argument("--seed", type=int, default=None)
    p_cv.add_argument("--out", default="results")
    p_cv.add_argument("--concurrency", type=int, default=None)
    p_cv.add_argument("--cache-dir", default=None)
    p_cv.add_argument("--strict", action="store_true",
                      help="nonzero exit when any query fails")
    _add_common(p_cv)
    p_cv.set_defaults(handler=_cmd_eval_cv)

    p_sweep = eval_sub.add_parser("sweep-k", help="MAE as a function of k")
    p_sweep.add_argument("--backend", choices=_BACKEND_CHOICES, required=True)
    p_sweep.add_argument("--k-values", required=True, help="comma-separated, e.g. 1,3,5,7,10")
    p_sweep.add_argument("--pool", required=True)
    p_sweep.add_argument("--folds", type=int, default=5)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default="results")
    p_sweep.add_argument("--concurrency", type=int, default=None)
    p_sweep.add_argument("--cache-dir", default=None)
    _add_common(p_sweep)
    p_sweep.set_defaults(handler=_cmd_eval_sweep)

    p_report = sub.add_parser("report", help="re-render report files from report.json")
    p_report.add_argument("--results", required=True, help="path to report.json or sweep.json")
    p_report.add_argument("--out", required=True)
    _add_common(p_report)
    p_report.set_defaults(handler=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ExpForceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
