"""Grasp force prediction from retrieved prior grasping experiences.

The pipeline: describe a query image, embed (image, description), retrieve
the most similar prior grasps by cosine similarity, and condition a
multimodal predictor on those experiences to estimate the minimum feasible
grasp force. Deterministic baselines, a Coulomb-model oracle for synthetic
ground truth, and a cross-validation harness round out the toolkit.
"""

from .errors import ExpForceError
from .evaluation import (
    EvalReport,
    EvalSetup,
    MetricBlock,
    Outcome,
    SweepResult,
    classify_outcome,
    compute_metrics,
    emit_report,
    run_cross_validation,
    run_k_sweep,
)
from .gateway import (
    EmbeddingCache,
    EmbeddingVector,
    Gateway,
    ModelEndpointConfig,
    MultimodalMessage,
    Segment,
)
from .oracle import (
    OracleConfig,
    SyntheticObject,
    adaptive_force_search,
    closed_form_fstar,
    generate_synthetic_pool,
)
from .pool import Category, ExperienceRecord, Pool, load_pool, partition_folds, save_pool
from .predictors import (
    BackendKind,
    ForcePrediction,
    PredictionRequest,
    predict_expforce,
    predict_knn_average,
    predict_random_exp,
    predict_zero_shot,
    run_prediction,
)
from .prompting import (
    PromptBundle,
    PromptTemplates,
    SharedContext,
    build_descriptor_prompt,
    build_predictor_prompt,
    describe_object,
    parse_force,
)
from .retrieval import RetrievedSet, ScoredExperience, cosine_similarity, top_k

__version__ = "0.1.0"
