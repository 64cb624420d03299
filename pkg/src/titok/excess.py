"""Contrastive excess scoring: expert minus amateur log-probability per token.

The score of a token is the gap between the adapter-equipped scorer and the
bare backbone on that token. Larger is more informative: a large positive
score marks a position where the adapter supplies knowledge the backbone
lacks. Scores are raw differences in nats; nothing here clips, normalizes,
or re-ranks them, because downstream selection depends on raw cross-sample
comparability.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence

from .datamodel import (
    ExcessReport,
    InvalidTraceError,
    ScoredTrace,
    validate_trace,
)


def mean_excess(scores: Sequence[float]) -> float:
    """Arithmetic mean with deterministic left-to-right summation."""
    if not scores:
        raise ValueError("empty response has no mean")
    total = 0.0
    for s in scores:
        total += s
    return total / len(scores)


def excess_scores(trace: ScoredTrace) -> ExcessReport:
    """Score one trace: per-token expert-minus-amateur gaps and their mean.

    The trace must pass validation; an invalid trace is rejected with the
    full verdict rather than scored partially.
    """
    violations = validate_trace(trace)
    if violations:
        raise InvalidTraceError(trace.sample_id, violations)
    scores = tuple(tok.logp_expert - tok.logp_amateur for tok in trace.tokens)
    return ExcessReport(sample_id=trace.sample_id, scores=scores, mean_score=mean_excess(scores))


def score_stream(traces: Iterable[ScoredTrace]) -> Iterator[ExcessReport]:
    """Score traces one by one, preserving input order."""
    for trace in traces:
        yield excess_scores(trace)
