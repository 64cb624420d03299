"""Cross-tokenizer mask propagation via dual-pointer span matching.

Two tokenizations of the same text are partitioned into matched spans: the
source pointer advances one token at a time, accumulating a decoded
segment, while the target pointer extends its own segment until the
normalized texts agree. Each matched pair is tagged by its span widths, and
binary mask values flow across pairs by four rules: copy (1-1), replicate
(1-many), average (many-1), average-and-replicate (many-many). All four
reduce to assigning the source span's mean to every target token, which is
what propagate_mask does. A final per-response top-k% pass restores a
binary mask on the target side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .datamodel import (
    DatasetMeta,
    MaskedDataset,
    MaskedRecord,
    SpanAlignment,
    SpanPair,
    TokenMask,
    make_mask,
)
from .filtering import top_k_positions
from .tokenizers import DEFAULT_NORMALIZER, Normalizer, TokenizerHandle

logger = logging.getLogger(__name__)


class AlignmentError(ValueError):
    """Token sequences cannot be aligned; carries the first divergent byte
    offset of the normalized texts when the full texts disagree."""

    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message = f"{message} (first divergence at byte {byte_offset})"
        super().__init__(message)


def _first_divergence(a: str, b: str) -> int:
    ab = a.encode("utf-8")
    bb = b.encode("utf-8")
    for i, (x, y) in enumerate(zip(ab, bb)):
        if x != y:
            return i
    return min(len(ab), len(bb))


def _rule_for(source_width: int, target_width: int) -> str:
    if source_width == 1 and target_width == 1:
        return "one_to_one"
    if source_width == 1:
        return "one_to_many"
    if target_width == 1:
        return "many_to_one"
    return "many_to_many"


def align_spans(
    source_tokens: Sequence[int],
    target_tokens: Sequence[int],
    src: TokenizerHandle,
    tgt: TokenizerHandle,
    norm: Normalizer = DEFAULT_NORMALIZER,
    strict: bool = False,
) -> SpanAlignment:
    """Partition both token sequences into spans of matching normalized text.

    Matching is greedy and earliest-possible: a pair is emitted at the first
    target extension whose normalized text equals the accumulated source
    segment. If the sequences exhaust without a match, the leftover suffixes
    become one final many_to_many pair (or an error when strict=True).
    """
    if not source_tokens or not target_tokens:
        raise AlignmentError("cannot align empty token sequences")
    src_full = norm.apply(src.detokenize(source_tokens))
    tgt_full = norm.apply(tgt.detokenize(target_tokens))
    if src_full != tgt_full:
        raise AlignmentError("texts differ, cannot align", _first_divergence(src_full, tgt_full))

    n_src = len(source_tokens)
    n_tgt = len(target_tokens)
    pairs: list[SpanPair] = []
    si = ti = 0
    while si < n_src and ti < n_tgt:
        s_end = si + 1
        t_end = ti + 1
        match: tuple[int, int] | None = None
        while True:
            src_seg = norm.apply(src.detokenize(source_tokens[si:s_end]))
            tgt_seg = norm.apply(tgt.detokenize(target_tokens[ti:t_end]))
            if src_seg == tgt_seg and src_seg:
                match = (s_end, t_end)
                break
            if len(tgt_seg) < len(src_seg) and t_end < n_tgt:
                t_end += 1
            elif s_end < n_src:
                s_end += 1
            elif t_end < n_tgt:
                t_end += 1
            else:
                break
        if match is None:
            if strict:
                raise AlignmentError(
                    f"no matching span from source token {si} / target token {ti}"
                )
            pairs.append(SpanPair((si, n_src), (ti, n_tgt), "many_to_many"))
            si, ti = n_src, n_tgt
            break
        s_end, t_end = match
        pairs.append(SpanPair((si, s_end), (ti, t_end), _rule_for(s_end - si, t_end - ti)))
        si, ti = s_end, t_end

    # One side may hold trailing tokens whose normalized text is empty (the
    # full texts already compared equal); fold them into the last pair so the
    # partition covers both sequences completely.
    if si < n_src or ti < n_tgt:
        last = pairs[-1]
        s0 = last.source_span[0]
        t0 = last.target_span[0]
        pairs[-1] = SpanPair((s0, n_src), (t0, n_tgt), _rule_for(n_src - s0, n_tgt - t0))
    return SpanAlignment(pairs=tuple(pairs))


def propagate_mask(alignment: SpanAlignment, source_mask: TokenMask) -> TokenMask:
    """Carry a binary source mask across an alignment as fractional scores.

    Every target token of a pair receives the arithmetic mean of the pair's
    source values, which realizes copy, replicate, average, and
    average-with-replicate in one formula.
    """
    if not source_mask.binary:
        raise ValueError("propagate_mask requires a binary source mask")
    if len(source_mask.keep) != alignment.source_len:
        raise ValueError(
            f"mask length {len(source_mask.keep)} != alignment source length {alignment.source_len}"
        )
    out = [0.0] * alignment.target_len
    for pair in alignment.pairs:
        s0, s1 = pair.source_span
        values = source_mask.keep[s0:s1]
        mean = sum(values) / len(values)
        for t in range(*pair.target_span):
            out[t] = mean
    return make_mask(source_mask.sample_id, out)


def reselect_topk(fractional: TokenMask, k_percent: float, floor_min_one: bool = True) -> TokenMask:
    """Re-binarize a fractional mask by keeping the top-k% scores.

    Same ranking semantics as token selection: descending value, ties to the
    earlier position, kept count max(1, floor(k/100 * L)) unless the
    minimum-one rule is disabled.
    """
    if any(not (0.0 <= v <= 1.0) for v in fractional.keep):
        raise ValueError("fractional mask values must lie in [0, 1]")
    kept = set(top_k_positions(fractional.keep, k_percent, floor_min_one))
    keep = tuple(1.0 if i in kept else 0.0 for i in range(len(fractional.keep)))
    return TokenMask(sample_id=fractional.sample_id, keep=keep, binary=True)


@dataclass(frozen=True)
class AlignmentSkip:
    """A record dropped during dataset alignment, with the reason."""

    sample_id: str
    reason: str


def align_record(
    record: MaskedRecord,
    src: TokenizerHandle,
    tgt: TokenizerHandle,
    k_percent: float,
    norm: Normalizer = DEFAULT_NORMALIZER,
    floor_min_one: bool = True,
) -> MaskedRecord:
    """Re-tokenize one record with the target tokenizer and carry its mask over."""
    target_tokens = tgt.tokenize(record.response_text)
    alignment = align_spans(record.token_ids, target_tokens, src, tgt, norm)
    fractional = propagate_mask(alignment, record.mask)
    final = reselect_topk(fractional, k_percent, floor_min_one)
    if not any(final.keep):
        raise AlignmentError("re-selection kept no tokens")
    return MaskedRecord(
        sample_id=record.sample_id,
        query_text=record.query_text,
        response_text=record.response_text,
        token_ids=target_tokens,
        mask=final,
    )


def align_dataset(
    dataset: MaskedDataset,
    src: TokenizerHandle,
    tgt: TokenizerHandle,
    k_percent: float,
    norm: Normalizer = DEFAULT_NORMALIZER,
    on_error: str = "skip",
    floor_min_one: bool = True,
) -> tuple[MaskedDataset, list[AlignmentSkip]]:
    """Align every record of a masked dataset into the target token space.

    on_error="skip" logs failing records and keeps going; "abort" re-raises
    the first failure annotated with its sample_id.
    """
    if on_error not in ("skip", "abort"):
        raise ValueError(f"on_error must be 'skip' or 'abort', got {on_error!r}")
    aligned: list[MaskedRecord] = []
    skipped: list[AlignmentSkip] = []
    for record in dataset.records:
        try:
            aligned.append(align_record(record, src, tgt, k_percent, norm, floor_min_one))
        except (AlignmentError, ValueError) as exc:
            if on_error == "abort":
                raise AlignmentError(f"sample {record.sample_id!r}: {exc}") from exc
            logger.warning("skipping sample %r: %s", record.sample_id, exc)
            skipped.append(AlignmentSkip(record.sample_id, str(exc)))
    meta = DatasetMeta(
        k_percent=dataset.meta.k_percent,
        m_kept=len(aligned),
        source_model_tag=dataset.meta.source_model_tag,
        target_tokenizer_tag=tgt.tag,
    )
    return MaskedDataset(records=tuple(aligned), meta=meta), skipped
