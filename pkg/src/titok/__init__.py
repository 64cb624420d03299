"""Token-level adapter knowledge transplantation toolkit.

Scores tokens by the contrastive excess between an expert and an amateur
scorer, filters synthetic samples and tokens by those scores, aligns token
masks across mismatched tokenizers, and emits masked training datasets. A
built-in deterministic toy laboratory runs the whole pipeline at desk scale.
"""

from .alignment import AlignmentError, align_dataset, align_spans, propagate_mask, reselect_topk
from .datamodel import (
    DatasetMeta,
    ExcessReport,
    MaskedDataset,
    MaskedRecord,
    PipelineConfig,
    ScoredTrace,
    SpanAlignment,
    SpanPair,
    TokenMask,
    TokenRecord,
    Violation,
    WireError,
    make_mask,
    read_dataset,
    read_masks,
    read_reports,
    read_traces,
    validate_trace,
    write_dataset,
    write_masks,
    write_reports,
    write_traces,
)
from .excess import excess_scores, mean_excess
from .filtering import MaskStats, RankPolicy, apply_mask_stats, filter_samples, kept_count, select_tokens
from .pipeline import RunConfig, RunManifest, export_masked_dataset, load_config, run_pipeline
from .synthgen import PromptTemplate, admit_query, build_pool, rouge_l
from .tokenizers import Normalizer, TokenizerHandle, get_tokenizer, load_tokenizer_file, register_tokenizer

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "DatasetMeta",
    "ExcessReport",
    "MaskStats",
    "MaskedDataset",
    "MaskedRecord",
    "Normalizer",
    "PipelineConfig",
    "PromptTemplate",
    "RankPolicy",
    "RunConfig",
    "RunManifest",
    "ScoredTrace",
    "SpanAlignment",
    "SpanPair",
    "TokenMask",
    "TokenRecord",
    "TokenizerHandle",
    "Violation",
    "WireError",
    "admit_query",
    "align_dataset",
    "align_spans",
    "apply_mask_stats",
    "build_pool",
    "excess_scores",
    "export_masked_dataset",
    "filter_samples",
    "get_tokenizer",
    "kept_count",
    "load_config",
    "load_tokenizer_file",
    "make_mask",
    "mean_excess",
    "propagate_mask",
    "read_dataset",
    "read_masks",
    "read_reports",
    "read_traces",
    "register_tokenizer",
    "reselect_topk",
    "rouge_l",
    "run_pipeline",
    "select_tokens",
    "validate_trace",
    "write_dataset",
    "write_masks",
    "write_reports",
    "write_traces",
]
