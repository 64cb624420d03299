"""Shared record types, invariant checks, and the JSONL wire formats.

Every other module reads and writes these types. Four record schemas travel
between pipeline stages as newline-delimited JSON (UTF-8, LF line endings,
one object per line): traces, excess reports, token masks, and masked
datasets. Field order on the wire is alphabetical, which makes writes
byte-deterministic and lets golden tests compare files directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, TextIO

FORMAT_VERSION = 1

ALIGNMENT_RULES = ("one_to_one", "one_to_many", "many_to_one", "many_to_many")


class WireError(ValueError):
    """A malformed wire record. Carries the 1-based line number and the
    offending line fragment when raised from a reader."""

    def __init__(self, message: str, line_no: int | None = None, fragment: str | None = None):
        self.line_no = line_no
        self.fragment = fragment
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Violation:
    """One failed invariant, optionally pinned to a token index."""

    message: str
    token_index: int | None = None

    def __str__(self) -> str:
        if self.token_index is None:
            return self.message
        return f"{self.message} (token {self.token_index})"


@dataclass(frozen=True)
class TokenRecord:
    """One response token with both scorer roles' log-probabilities (nats)."""

    token_id: int
    token_text: str
    logp_amateur: float
    logp_expert: float


@dataclass(frozen=True)
class ScoredTrace:
    """A (query, response) pair whose response tokens carry both roles' log-probs.

    Tokens cover exactly the response, never the query: query text is
    conditioning context only.
    """

    sample_id: str
    query_text: str
    response_text: str
    tokens: tuple[TokenRecord, ...]


@dataclass(frozen=True)
class ExcessReport:
    """Per-token excess scores for one trace plus their arithmetic mean."""

    sample_id: str
    scores: tuple[float, ...]
    mean_score: float


@dataclass(frozen=True)
class TokenMask:
    """Per-token keep decision: binary {0,1} or fractional [0,1] after alignment."""

    sample_id: str
    keep: tuple[float, ...]
    binary: bool


def make_mask(sample_id: str, keep: Iterable[float]) -> TokenMask:
    """Build a TokenMask, deriving the binary flag from the values."""
    values = tuple(float(v) for v in keep)
    return TokenMask(sample_id, values, binary=all(v in (0.0, 1.0) for v in values))


@dataclass(frozen=True)
class SpanPair:
    """One matched (source span, target span) with its propagation rule.

    Spans are half-open [start, end) token-index intervals.
    """

    source_span: tuple[int, int]
    target_span: tuple[int, int]
    rule: str


@dataclass(frozen=True)
class SpanAlignment:
    """Partition of two token sequences of the same text into matched spans."""

    pairs: tuple[SpanPair, ...]

    @property
    def source_len(self) -> int:
        return self.pairs[-1].source_span[1] if self.pairs else 0

    @property
    def target_len(self) -> int:
        return self.pairs[-1].target_span[1] if self.pairs else 0


@dataclass(frozen=True)
class MaskedRecord:
    """One final training sample: token ids plus a binary keep mask."""

    sample_id: str
    query_text: str
    response_text: str
    token_ids: tuple[int, ...]
    mask: TokenMask


@dataclass(frozen=True)
class DatasetMeta:
    k_percent: float
    m_kept: int
    source_model_tag: str
    target_tokenizer_tag: str


@dataclass(frozen=True)
class MaskedDataset:
    """The filtered dataset consumed by masked-loss training."""

    records: tuple[MaskedRecord, ...]
    meta: DatasetMeta


@dataclass(frozen=True)
class PipelineConfig:
    """Run parameters shared by every stage.

    rouge_threshold is None when the diversity gate is disabled for the task.
    """

    pool_size: int
    keep_m: int
    k_percent: float
    rouge_threshold: float | None
    dedup: bool
    seed: int
    tokenizer_source: str
    tokenizer_target: str
    generator_endpoint: str
    scorer_endpoint: str

    def check(self) -> None:
        if self.pool_size <= 0:
            raise ValueError("pool_size must be positive")
        if self.keep_m <= 0:
            raise ValueError("keep_m must be positive")
        if self.keep_m > self.pool_size:
            raise ValueError(f"keep_m ({self.keep_m}) exceeds pool_size ({self.pool_size})")
        if not (0 < self.k_percent <= 100):
            raise ValueError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if self.rouge_threshold is not None and not (0 < self.rouge_threshold <= 1):
            raise ValueError(f"rouge_threshold must be in (0, 1] or disabled, got {self.rouge_threshold}")


# ---------------------------------------------------------------------------
# Validation


def validate_trace(trace: ScoredTrace, normalize: Callable[[str], str] | None = None) -> list[Violation]:
    """Check all ScoredTrace invariants. Returns an empty list when the trace
    is well formed, otherwise one Violation per failed check.

    `normalize` is applied to both the token concatenation and the response
    text before comparison, so tokenizers with surface markers can still
    satisfy the coverage invariant.
    """
    violations: list[Violation] = []
    if not trace.tokens:
        violations.append(Violation("empty response"))
        return violations
    for i, tok in enumerate(trace.tokens):
        if tok.token_id < 0:
            violations.append(Violation("negative token_id", i))
        for value in (tok.logp_amateur, tok.logp_expert):
            if not math.isfinite(value):
                violations.append(Violation("non-finite logp", i))
                break
        else:
            if tok.logp_amateur > 0 or tok.logp_expert > 0:
                violations.append(Violation("positive logp", i))
    concat = "".join(tok.token_text for tok in trace.tokens)
    response = trace.response_text
    if normalize is not None:
        concat = normalize(concat)
        response = normalize(response)
    if concat != response:
        violations.append(Violation("response text mismatch"))
    return violations


class InvalidTraceError(ValueError):
    """Raised when an operation is handed a trace that fails validation."""

    def __init__(self, sample_id: str, violations: list[Violation]):
        self.sample_id = sample_id
        self.violations = violations
        detail = "; ".join(str(v) for v in violations)
        super().__init__(f"invalid trace {sample_id!r}: {detail}")


def check_mean_consistency(report: ExcessReport, rel_tol: float = 1e-12) -> bool:
    """True when the stored mean matches a left-to-right recomputation."""
    if not report.scores:
        return False
    total = 0.0
    for s in report.scores:
        total += s
    return math.isclose(report.mean_score, total / len(report.scores), rel_tol=rel_tol, abs_tol=1e-300)


def check_alignment_partition(alignment: SpanAlignment, source_len: int, target_len: int) -> bool:
    """True when both sides' spans are contiguous, non-overlapping, and cover
    exactly [0, len)."""
    expect_s = 0
    expect_t = 0
    for pair in alignment.pairs:
        s0, s1 = pair.source_span
        t0, t1 = pair.target_span
        if s0 != expect_s or t0 != expect_t or s1 < s0 or t1 < t0:
            return False
        if pair.rule not in ALIGNMENT_RULES:
            return False
        expect_s, expect_t = s1, t1
    return expect_s == source_len and expect_t == target_len


def ensure_unique_ids(ids: Iterable[str]) -> None:
    """Raise ValueError on the first duplicated sample_id. Joins across
    pipeline stages rely on ids being unambiguous."""
    seen: set[str] = set()
    for sample_id in ids:
        if sample_id in seen:
            raise ValueError(f"duplicate sample_id {sample_id!r}")
        seen.add(sample_id)


# ---------------------------------------------------------------------------
# Wire codecs

def canonical_dumps(obj: Any) -> str:
    """Canonical single-line JSON: alphabetical keys, compact separators,
    raw UTF-8, non-finite floats rejected."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _mask_values_for_wire(mask: TokenMask) -> list[float] | list[int]:
    if mask.binary:
        return [int(v) for v in mask.keep]
    return list(mask.keep)


def encode_trace(trace: ScoredTrace) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "query_text": trace.query_text,
        "response_text": trace.response_text,
        "sample_id": trace.sample_id,
        "tokens": [
            {
                "logp_amateur": tok.logp_amateur,
                "logp_expert": tok.logp_expert,
                "token_id": tok.token_id,
                "token_text": tok.token_text,
            }
            for tok in trace.tokens
        ],
    }


def encode_report(report: ExcessReport) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "mean_score": report.mean_score,
        "sample_id": report.sample_id,
        "scores": list(report.scores),
    }


def encode_mask(mask: TokenMask) -> dict[str, Any]:
    return {
        "binary": mask.binary,
        "format_version": FORMAT_VERSION,
        "keep": _mask_values_for_wire(mask),
        "sample_id": mask.sample_id,
    }


def _expect(obj: dict[str, Any], key: str, kinds: tuple[type, ...]) -> Any:
    if key not in obj:
        raise WireError(f"missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kinds) or isinstance(value, bool) and bool not in kinds:
        raise WireError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def decode_trace(obj: dict[str, Any]) -> ScoredTrace:
    tokens = []
    raw_tokens = _expect(obj, "tokens", (list,))
    for tok in raw_tokens:
        if not isinstance(tok, dict):
            raise WireError("token entry is not an object")
        tokens.append(
            TokenRecord(
                token_id=int(_expect(tok, "token_id", (int,))),
                token_text=_expect(tok, "token_text", (str,)),
                logp_amateur=float(_expect(tok, "logp_amateur", (int, float))),
                logp_expert=float(_expect(tok, "logp_expert", (int, float))),
            )
        )
    return ScoredTrace(
        sample_id=_expect(obj, "sample_id", (str,)),
        query_text=_expect(obj, "query_text", (str,)),
        response_text=_expect(obj, "response_text", (str,)),
        tokens=tuple(tokens),
    )


def decode_report(obj: dict[str, Any]) -> ExcessReport:
    scores = _expect(obj, "scores", (list,))
    return ExcessReport(
        sample_id=_expect(obj, "sample_id", (str,)),
        scores=tuple(float(s) for s in scores),
        mean_score=float(_expect(obj, "mean_score", (int, float))),
    )


def decode_mask(obj: dict[str, Any]) -> TokenMask:
    keep = tuple(float(v) for v in _expect(obj, "keep", (list,)))
    binary = _expect(obj, "binary", (bool,))
    if any(not (0.0 <= v <= 1.0) for v in keep):
        raise WireError("keep value outside [0, 1]")
    if binary != all(v in (0.0, 1.0) for v in keep):
        raise WireError("binary flag inconsistent with keep values")
    return TokenMask(sample_id=_expect(obj, "sample_id", (str,)), keep=keep, binary=binary)


def encode_dataset_meta(meta: DatasetMeta) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "k_percent": meta.k_percent,
        "kind": "meta",
        "m_kept": meta.m_kept,
        "source_model_tag": meta.source_model_tag,
        "target_tokenizer_tag": meta.target_tokenizer_tag,
    }


def encode_dataset_record(record: MaskedRecord) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "keep": _mask_values_for_wire(record.mask),
        "kind": "record",
        "query_text": record.query_text,
        "response_text": record.response_text,
        "sample_id": record.sample_id,
        "token_ids": list(record.token_ids),
    }


def decode_dataset_record(obj: dict[str, Any]) -> MaskedRecord:
    sample_id = _expect(obj, "sample_id", (str,))
    keep = tuple(float(v) for v in _expect(obj, "keep", (list,)))
    token_ids = tuple(int(t) for t in _expect(obj, "token_ids", (list,)))
    if len(keep) != len(token_ids):
        raise WireError(f"mask length {len(keep)} != token_ids length {len(token_ids)}")
    if any(v not in (0.0, 1.0) for v in keep):
        raise WireError("dataset record mask is not binary")
    return MaskedRecord(
        sample_id=sample_id,
        query_text=_expect(obj, "query_text", (str,)),
        response_text=_expect(obj, "response_text", (str,)),
        token_ids=token_ids,
        mask=TokenMask(sample_id, keep, binary=True),
    )


# ---------------------------------------------------------------------------
# JSONL streaming


def _open_for_read(source: str | Path | TextIO):
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def _open_for_write(sink: str | Path | TextIO):
    if isinstance(sink, (str, Path)):
        return open(sink, "w", encoding="utf-8", newline="\n"), True
    return sink, False


def read_jsonl(source: str | Path | TextIO, decoder: Callable[[dict[str, Any]], Any]) -> Iterator[Any]:
    """Stream typed records from newline-delimited JSON.

    Records are yielded in input order; a malformed line raises WireError
    carrying the line number and fragment, after all prior records have
    already been yielded.
    """
    stream, owned = _open_for_read(source)
    try:
        for line_no, line in enumerate(stream, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise WireError(f"invalid JSON: {exc.msg}", line_no, stripped[:80]) from exc
            if not isinstance(obj, dict):
                raise WireError("record is not a JSON object", line_no, stripped[:80])
            try:
                yield decoder(obj)
            except WireError as exc:
                raise WireError(str(exc), line_no, stripped[:80]) from exc
    finally:
        if owned:
            stream.close()


def write_jsonl(records: Iterable[Any], sink: str | Path | TextIO, encoder: Callable[[Any], dict[str, Any]]) -> int:
    """Write records as canonical JSONL. Returns the number of records written."""
    stream, owned = _open_for_write(sink)
    count = 0
    try:
        for record in records:
            stream.write(canonical_dumps(encoder(record)))
            stream.write("\n")
            count += 1
    finally:
        if owned:
            stream.close()
    return count


def read_traces(source: str | Path | TextIO) -> Iterator[ScoredTrace]:
    return read_jsonl(source, decode_trace)


def write_traces(traces: Iterable[ScoredTrace], sink: str | Path | TextIO) -> int:
    return write_jsonl(traces, sink, encode_trace)


def read_reports(source: str | Path | TextIO) -> Iterator[ExcessReport]:
    return read_jsonl(source, decode_report)


def write_reports(reports: Iterable[ExcessReport], sink: str | Path | TextIO) -> int:
    return write_jsonl(reports, sink, encode_report)


def read_masks(source: str | Path | TextIO) -> Iterator[TokenMask]:
    return read_jsonl(source, decode_mask)


def write_masks(masks: Iterable[TokenMask], sink: str | Path | TextIO) -> int:
    return write_jsonl(masks, sink, encode_mask)


def read_dataset(source: str | Path | TextIO) -> MaskedDataset:
    """Read a masked-dataset file: one meta line followed by record lines."""
    meta: DatasetMeta | None = None
    records: list[MaskedRecord] = []

    def decoder(obj: dict[str, Any]) -> Any:
        kind = _expect(obj, "kind", (str,))
        if kind == "meta":
            return DatasetMeta(
                k_percent=float(_expect(obj, "k_percent", (int, float))),
                m_kept=int(_expect(obj, "m_kept", (int,))),
                source_model_tag=_expect(obj, "source_model_tag", (str,)),
                target_tokenizer_tag=_expect(obj, "target_tokenizer_tag", (str,)),
            )
        if kind == "record":
            return decode_dataset_record(obj)
        raise WireError(f"unknown record kind {kind!r}")

    for item in read_jsonl(source, decoder):
        if isinstance(item, DatasetMeta):
            if meta is not None:
                raise WireError("duplicate meta line in dataset file")
            meta = item
        else:
            records.append(item)
    if meta is None:
        raise WireError("dataset file has no meta line")
    dataset = MaskedDataset(records=tuple(records), meta=meta)
    check_dataset(dataset)
    return dataset


def write_dataset(dataset: MaskedDataset, sink: str | Path | TextIO) -> int:
    stream, owned = _open_for_write(sink)
    try:
        stream.write(canonical_dumps(encode_dataset_meta(dataset.meta)))
        stream.write("\n")
        count = 0
        for record in dataset.records:
            stream.write(canonical_dumps(encode_dataset_record(record)))
            stream.write("\n")
            count += 1
        return count
    finally:
        if owned:
            stream.close()


def check_dataset(dataset: MaskedDataset) -> None:
    """Enforce MaskedDataset invariants; raises WireError on the first breach."""
    if dataset.meta.m_kept != len(dataset.records):
        raise WireError(f"meta.m_kept {dataset.meta.m_kept} != record count {len(dataset.records)}")
    ensure_unique_ids(r.sample_id for r in dataset.records)
    for record in dataset.records:
        if len(record.mask.keep) != len(record.token_ids):
            raise WireError(f"record {record.sample_id!r}: mask/token length mismatch")
        if not any(v > 0 for v in record.mask.keep):
            raise WireError(f"record {record.sample_id!r}: no kept token")
