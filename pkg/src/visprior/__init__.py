"""Vision-prior toolkit.

Rank how well a frozen dual-tower encoder already knows each catalog
entity, build entity-filtered VQA datasets around those ranks, grade
model answers with an LLM or rule judge, and remediate weak entities by
training lightweight contrastive adapters over the frozen embeddings.
"""

__version__ = "0.1.0"

from .errors import DataError, RemoteServiceError, VispriorError
from .evaluation import (
    AccuracyReport,
    ChatCompletionClient,
    JudgeVerdict,
    Prediction,
    acc_entity,
    acc_macro,
    accuracy_report,
    binned_accuracy,
    detect_threshold,
    judge_llm,
    judge_rules,
    render_judge_prompt,
)
from .pipeline import (
    SamplingStrategy,
    VqaDataset,
    VqaItem,
    dedup_entity_answer,
    filter_format_dependent,
    filter_llm_known,
    filter_min_questions,
    ingest_vqa,
    make_perception_data,
    sample_entities,
    split_dataset,
)
from .ranking import (
    RankBinning,
    RankResult,
    RankTable,
    SimilarityRow,
    bin_ranks,
    rank_all,
    rank_entity,
    rank_of_target,
    similarity_row,
)
from .remediation import (
    AdapterParams,
    ContrastivePair,
    TrainConfig,
    TrainReport,
    apply_adapter,
    build_pairs,
    contrastive_loss_and_grads,
    evaluate_remediation,
    export_stage2_bundle,
    train_adapter,
)
from .store import (
    EmbeddingMatrix,
    EmbeddingStore,
    Entity,
    EntityCatalog,
    load_store,
    make_store,
    normalize_rows,
    save_store,
    slugify,
    validate_store,
)

__all__ = [
    "__version__",
    "VispriorError",
    "DataError",
    "RemoteServiceError",
    "Entity",
    "EntityCatalog",
    "EmbeddingMatrix",
    "EmbeddingStore",
    "load_store",
    "save_store",
    "make_store",
    "normalize_rows",
    "validate_store",
    "slugify",
    "SimilarityRow",
    "RankResult",
    "RankTable",
    "RankBinning",
    "similarity_row",
    "rank_of_target",
    "rank_entity",
    "rank_all",
    "bin_ranks",
    "VqaItem",
    "VqaDataset",
    "SamplingStrategy",
    "ingest_vqa",
    "filter_llm_known",
    "filter_format_dependent",
    "dedup_entity_answer",
    "filter_min_questions",
    "sample_entities",
    "split_dataset",
    "make_perception_data",
    "Prediction",
    "JudgeVerdict",
    "AccuracyReport",
    "ChatCompletionClient",
    "render_judge_prompt",
    "judge_llm",
    "judge_rules",
    "acc_entity",
    "acc_macro",
    "accuracy_report",
    "binned_accuracy",
    "detect_threshold",
    "ContrastivePair",
    "AdapterParams",
    "TrainConfig",
    "TrainReport",
    "build_pairs",
    "contrastive_loss_and_grads",
    "train_adapter",
    "apply_adapter",
    "evaluate_remediation",
    "export_stage2_bundle",
]
