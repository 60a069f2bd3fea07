"""Unified conversational retrieval: one dual encoder selecting persona,
knowledge, and response candidates, with a context-adaptive dialogue encoder
over multi-session history and contrastive training on historical picks."""

from .corpus import (Candidate, Corpus, Dialogue, RetrievalExample, Role,
                     Session, TaskKind, Utterance, derive_rng, load_corpus,
                     sample_pool, split_corpus, split_sessions, write_corpus)
from .encoder import (EncoderParams, encode_candidate, encode_text,
                      encode_utterance, init_encoder_params, tokenize)
from .errors import (CapacityError, CheckpointError, ConfigError, ContractError,
                     ConvretError, DimensionError, EvaluationError,
                     IntegrityError, ParseError, TrainingError)
from .evaluation import (EmbeddedPool, MetricsReport, ablation_run, embed_pool,
                         evaluate, k_sweep, pool_size_sweep, retrieve)
from .fusion import (ContextMode, FusionParams, ModeKind, encode_context,
                     init_fusion_params)
from .generator import GeneratorConfig, generate_synthetic
from .losses import (BatchSimilarities, LossConfig, batch_similarities,
                     combined_loss, historical_contrastive_loss,
                     pairwise_similarity_loss)
from .training import (Checkpoint, Schedule, TrainConfig, initial_checkpoint,
                       load_checkpoint, save_checkpoint, train)

__all__ = [
    "Candidate", "Corpus", "Dialogue", "RetrievalExample", "Role", "Session",
    "TaskKind", "Utterance", "derive_rng", "load_corpus", "sample_pool",
    "split_corpus", "split_sessions", "write_corpus",
    "EncoderParams", "encode_candidate", "encode_text", "encode_utterance",
    "init_encoder_params", "tokenize",
    "CapacityError", "CheckpointError", "ConfigError", "ContractError",
    "ConvretError", "DimensionError", "EvaluationError", "IntegrityError",
    "ParseError", "TrainingError",
    "EmbeddedPool", "MetricsReport", "ablation_run", "embed_pool", "evaluate",
    "k_sweep", "pool_size_sweep", "retrieve",
    "ContextMode", "FusionParams", "ModeKind", "encode_context",
    "init_fusion_params",
    "GeneratorConfig", "generate_synthetic",
    "BatchSimilarities", "LossConfig", "batch_similarities", "combined_loss",
    "historical_contrastive_loss", "pairwise_similarity_loss",
    "Checkpoint", "Schedule", "TrainConfig", "initial_checkpoint",
    "load_checkpoint", "save_checkpoint", "train",
]
