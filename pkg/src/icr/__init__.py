"""Demonstration selection for in-context classification.

Rank candidate examples by misconfidence (how confidently the model
misjudges them), refine prompts with the rerank-and-replace loop, compare
against uniform / best-of-N / retrieval baselines, and score everything
with a reproducible evaluation harness.
"""

from .backends import (
    Backend,
    CachedBackend,
    HttpBackend,
    LabelDistribution,
    SyntheticBackend,
    SyntheticModelParams,
    distribution_from_top_logprobs,
    synthetic_score,
)
from .baselines import (
    RetrievalPlan,
    ambig_retrieve,
    best_of_n_select,
    kate_retrieve,
    uniform_select,
)
from .embeddings import (
    EmbeddingVector,
    FileEmbeddingProvider,
    HashingEmbeddingProvider,
    HttpEmbeddingProvider,
    cosine_distance,
)
from .errors import IcrError
from .evaluation import evaluate, predict, transfer_evaluate
from .metrics import EvalReport, compute_report
from .selection import (
    ICRConfig,
    MisconfidenceScore,
    RankedCandidate,
    SelectionResult,
    icr_init,
    icr_refine,
    icr_select,
    misconfidence,
    score_pool,
)
from .tasks import (
    Dataset,
    DemonstrationSet,
    Example,
    LabelSet,
    TaskSpec,
    load_dataset,
    load_task,
    render_prompt,
    stratified_subsample,
)

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "CachedBackend",
    "Dataset",
    "DemonstrationSet",
    "EmbeddingVector",
    "EvalReport",
    "Example",
    "FileEmbeddingProvider",
    "HashingEmbeddingProvider",
    "HttpBackend",
    "HttpEmbeddingProvider",
    "ICRConfig",
    "IcrError",
    "LabelDistribution",
    "LabelSet",
    "MisconfidenceScore",
    "RankedCandidate",
    "RetrievalPlan",
    "SelectionResult",
    "SyntheticBackend",
    "SyntheticModelParams",
    "TaskSpec",
    "ambig_retrieve",
    "best_of_n_select",
    "compute_report",
    "cosine_distance",
    "distribution_from_top_logprobs",
    "evaluate",
    "icr_init",
    "icr_refine",
    "icr_select",
    "kate_retrieve",
    "load_dataset",
    "load_task",
    "misconfidence",
    "predict",
    "render_prompt",
    "score_pool",
    "stratified_subsample",
    "synthetic_score",
    "transfer_evaluate",
    "uniform_select",
]
