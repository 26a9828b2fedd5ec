"""Prediction backends: the full retrieval-conditioned pipeline and baselines.

ExpForce:   describe the query image, embed it, retrieve the top-k most
            similar prior grasps, and ask the predictor model with those
            experiences in the prompt. k = 0 skips retrieval entirely and
            degenerates to the zero-shot prompt.
ZeroShot:   the same predictor prompt with no experiences, whatever k says.
KnnAverage: mean of the retrieved records' measured forces. No model calls,
            no grid rounding; the honest geometric baseline.
RandomExp:  like ExpForce, but the "retrieved" experiences are a seeded
            uniform draw. Separates "any examples help" from "similar
            examples help".
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from statistics import fmean
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyRetrieval, InvalidArgument
from .gateway import EmbeddingVector, Gateway, embed
from .pool import ExperienceRecord, Pool, load_image
from .prompting import (
    PromptTemplates,
    SharedContext,
    build_predictor_prompt,
    default_templates,
    describe_object,
    parse_force,
)
from .retrieval import RetrievedSet, ScoredExperience, top_k


class BackendKind(str, Enum):
    EXP_FORCE = "exp-force"
    ZERO_SHOT = "zero-shot"
    KNN_AVERAGE = "knn-average"
    RANDOM_EXP = "random-exp"


_MODEL_BACKENDS = (BackendKind.EXP_FORCE, BackendKind.ZERO_SHOT)


@dataclass(frozen=True)
class PredictionRequest:
    """One query: which image, how many experiences, which backend."""

    query_id: str
    query_image_ref: str | Path
    k: int
    backend: BackendKind
    seed: int = 0

    def __post_init__(self):
        if not self.query_id:
            raise InvalidArgument("query_id must be non-empty")
        if self.k < 0:
            raise InvalidArgument("k must be non-negative")
        if self.k == 0 and self.backend not in _MODEL_BACKENDS:
            raise InvalidArgument(f"k=0 is only meaningful for {[b.value for b in _MODEL_BACKENDS]}")


@dataclass(frozen=True)
class ForcePrediction:
    """A backend's answer for one query."""

    query_id: str
    f_hat_n: float
    backend: BackendKind
    retrieved: RetrievedSet
    raw_response: str | None = None
    clamped: bool = False

    def __post_init__(self):
        if not (0.25 - 1e-9 <= self.f_hat_n <= 20.0 + 1e-9):
            raise InvalidArgument(f"f_hat_n {self.f_hat_n} outside [0.25, 20.0]")


def _candidate_ids(embeddings: Mapping[str, EmbeddingVector],
                   pool_ids: Sequence[str] | None, query_id: str) -> list[str]:
    ids = list(pool_ids) if pool_ids is not None else list(embeddings.keys())
    return [rid for rid in ids if rid != query_id]


def _require_roles(gateway: Gateway, backend: BackendKind, *roles: str) -> None:
    for role in roles:
        if getattr(gateway, role) is None:
            raise InvalidArgument(f"backend {backend.value} needs a {role} endpoint")


def _load_experiences(pool: Pool, pool_root, retrieved: RetrievedSet):
    return [(pool.by_id(e.record_id), load_image(pool_root, pool.by_id(e.record_id)))
            for e in retrieved.entries]


def predict_expforce(req: PredictionRequest, pool: Pool,
                     embeddings: Mapping[str, EmbeddingVector],
                     ctx: SharedContext, gateway: Gateway, *,
                     pool_root: str | Path,
                     pool_ids: Sequence[str] | None = None,
                     templates: PromptTemplates | None = None) -> ForcePrediction:
    """Full pipeline. Retrieval candidates are pool_ids (or all of
    embeddings' keys) minus the query itself; the query is never allowed to
    retrieve its own record.

    With k = 0 the describe/embed/retrieve stages are skipped outright so
    the resulting prompt is byte-identical to the zero-shot one.
    """
    _require_roles(gateway, BackendKind.EXP_FORCE,
                   *(("predictor",) if req.k == 0 else ("descriptor", "predictor", "embedder")))
    templates = templates or default_templates()
    query_image = Path(req.query_image_ref).read_bytes()
    if req.k == 0:
        retrieved = RetrievedSet(req.query_id, (), k_requested=0)
        experiences = []
    else:
        description = describe_object(ctx, query_image, gateway.descriptor,
                                      instruction=templates.desc_instruction)
        query_vec = embed(gateway.embedder, query_image, description)
        candidates = {rid: embeddings[rid]
                      for rid in _candidate_ids(embeddings, pool_ids, req.query_id)}
        if not candidates:
            raise EmptyRetrieval(f"no candidate experiences for query {req.query_id!r}")
        retrieved = top_k(req.query_id, query_vec, candidates, req.k)
        experiences = _load_experiences(pool, pool_root, retrieved)
    bundle = build_predictor_prompt(ctx, experiences, query_image,
                                    instruction=templates.pred_instruction)
    raw = gateway.predictor.complete(bundle.messages)
    parsed = parse_force(raw)
    return ForcePrediction(req.query_id, parsed.value_n, BackendKind.EXP_FORCE,
                           retrieved, raw_response=raw, clamped=parsed.clamped)


def predict_zero_shot(req: PredictionRequest, ctx: SharedContext, gateway: Gateway, *,
                      templates: PromptTemplates | None = None) -> ForcePrediction:
    """Predictor prompt with no experiences; req.k is ignored by design."""
    _require_roles(gateway, BackendKind.ZERO_SHOT, "predictor")
    templates = templates or default_templates()
    query_image = Path(req.query_image_ref).read_bytes()
    bundle = build_predictor_prompt(ctx, [], query_image,
                                    instruction=templates.pred_instruction)
    raw = gateway.predictor.complete(bundle.messages)
    parsed = parse_force(raw)
    retrieved = RetrievedSet(req.query_id, (), k_requested=0)
    return ForcePrediction(req.query_id, parsed.value_n, BackendKind.ZERO_SHOT,
                           retrieved, raw_response=raw, clamped=parsed.clamped)


def predict_knn_average(req: PredictionRequest, pool: Pool,
                        embeddings: Mapping[str, EmbeddingVector],
                        pool_ids: Sequence[str] | None = None) -> ForcePrediction:
    """Mean measured force over the top-k retrieved records.

    The reduction is fmean over forces in rank order, exactly the arithmetic
    a mean-echoing predictor stub performs on the assembled prompt, so the
    two routes can be compared prediction-for-prediction.
    """
    if req.k < 1:
        raise InvalidArgument("knn-average needs k >= 1")
    if req.query_id not in embeddings:
        raise InvalidArgument(f"no precomputed embedding for query {req.query_id!r}")
    candidate_ids = _candidate_ids(embeddings, pool_ids, req.query_id)
    if not candidate_ids:
        raise EmptyRetrieval(f"no candidate experiences for query {req.query_id!r}")
    candidates = {rid: embeddings[rid] for rid in candidate_ids}
    retrieved = top_k(req.query_id, embeddings[req.query_id], candidates, req.k)
    forces = [pool.by_id(e.record_id).f_star_n for e in retrieved.entries]
    return ForcePrediction(req.query_id, fmean(forces), BackendKind.KNN_AVERAGE, retrieved)


def _random_rng(seed: int, query_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{query_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def predict_random_exp(req: PredictionRequest, pool: Pool,
                       ctx: SharedContext, gateway: Gateway, *,
                       pool_root: str | Path,
                       pool_ids: Sequence[str] | None = None,
                       templates: PromptTemplates | None = None) -> ForcePrediction:
    """ExpForce with retrieval replaced by a seeded uniform draw.

    The draw is redrawn per query with a seed derived from (run seed,
    query id), so results do not depend on query execution order. Entries
    carry similarity 0.0 and sort by id, which satisfies the retrieved-set
    ordering contract without pretending a score exists.
    """
    if req.k < 1:
        raise InvalidArgument("random-exp needs k >= 1")
    _require_roles(gateway, BackendKind.RANDOM_EXP, "predictor")
    ids = sorted(rid for rid in (pool_ids if pool_ids is not None else pool.ids())
                 if rid != req.query_id)
    if not ids:
        raise EmptyRetrieval(f"no candidate experiences for query {req.query_id!r}")
    rng = _random_rng(req.seed, req.query_id)
    take = min(req.k, len(ids))
    chosen = sorted(ids[i] for i in rng.choice(len(ids), size=take, replace=False))
    retrieved = RetrievedSet(req.query_id,
                             tuple(ScoredExperience(rid, 0.0) for rid in chosen),
                             k_requested=req.k)
    query_image = Path(req.query_image_ref).read_bytes()
    experiences = _load_experiences(pool, pool_root, retrieved)
    templates = templates or default_templates()
    bundle = build_predictor_prompt(ctx, experiences, query_image,
                                    instruction=templates.pred_instruction)
    raw = gateway.predictor.complete(bundle.messages)
    parsed = parse_force(raw)
    return ForcePrediction(req.query_id, parsed.value_n, BackendKind.RANDOM_EXP,
                           retrieved, raw_response=raw, clamped=parsed.clamped)


def run_prediction(req: PredictionRequest, *, pool: Pool,
                   embeddings: Mapping[str, EmbeddingVector],
                   ctx: SharedContext, gateway: Gateway,
                   pool_root: str | Path,
                   pool_ids: Sequence[str] | None = None,
                   templates: PromptTemplates | None = None) -> ForcePrediction:
    """Dispatch on req.backend with one uniform argument surface."""
    if req.backend == BackendKind.EXP_FORCE:
        return predict_expforce(req, pool, embeddings, ctx, gateway,
                                pool_root=pool_root, pool_ids=pool_ids, templates=templates)
    if req.backend == BackendKind.ZERO_SHOT:
        return predict_zero_shot(req, ctx, gateway, templates=templates)
    if req.backend == BackendKind.KNN_AVERAGE:
        return predict_knn_average(req, pool, embeddings, pool_ids=pool_ids)
    if req.backend == BackendKind.RANDOM_EXP:
        return predict_random_exp(req, pool, ctx, gateway, pool_root=pool_root,
                                  pool_ids=pool_ids, templates=templates)
    raise InvalidArgument(f"unknown backend {req.backend!r}")
