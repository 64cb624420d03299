"""Synthetic pool construction: prompt-driven generation behind a pluggable
endpoint, with ROUGE-L diversity filtering and deduplication.

Queries are generated first, then the label is generated conditioned on the
accepted query. Admission is a serialized gate in request order: a
candidate's verdict depends only on the queries pooled before it, so
replaying the persisted log reproduces the pool exactly.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Any, Sequence

from .datamodel import PipelineConfig, _expect
from .protocol import Endpoint, EndpointError, GenRequest

DEFAULT_ROUGE_THRESHOLD = 0.7
GENERATOR_RETRIES = 3
ATTEMPT_BUDGET_FACTOR = 20

_WORD_CLEAN = re.compile(r"[^0-9a-z\s]+")


def word_tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _WORD_CLEAN.sub(" ", text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence, two-row dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F-measure over word tokens, in [0, 1].

    Defined as 0 when either side has no words, so empty strings never
    divide by zero; empty candidates are rejected elsewhere as malformed.
    """
    cand = word_tokenize(candidate)
    ref = word_tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Admission:
    accepted: bool
    reason: str | None = None  # "duplicate" | "rouge" | "empty"
    rouge_max: float | None = None


def admit_query(
    candidate: str,
    accepted_so_far: Sequence[str],
    threshold: float | None,
    dedup: bool,
    reject_at_threshold: bool = False,
) -> Admission:
    """Gate one candidate query against the queries pooled so far.

    Deduplication compares normalized word sequences exactly; the ROUGE gate
    rejects when the maximum ROUGE-L against any pooled query exceeds the
    threshold (strictly, unless reject_at_threshold flips the comparison).
    A disabled threshold (None) leaves only deduplication.
    """
    if not candidate.strip():
        return Admission(False, "empty")
    norm = " ".join(word_tokenize(candidate))
    if dedup:
        for prior in accepted_so_far:
            if " ".join(word_tokenize(prior)) == norm:
                return Admission(False, "duplicate")
    if threshold is None:
        return Admission(True)
    rouge_max = 0.0
    for prior in accepted_so_far:
        rouge_max = max(rouge_max, rouge_l(candidate, prior))
    over = rouge_max >= threshold if reject_at_threshold else rouge_max > threshold
    if over:
        return Admission(False, "rouge", rouge_max)
    return Admission(True, None, rouge_max)


# ---------------------------------------------------------------------------
# Prompt templates


class TemplateError(ValueError):
    pass


_PLACEHOLDER = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt skeleton with {example_1}..{example_n} and {seed_count} slots."""

    system_text: str
    user_text: str
    stop_markers: tuple[str, ...] = ()

    def render(self, examples: Sequence[str], seed_count: int | None = None) -> str:
        bindings: dict[str, str] = {
            f"example_{i}": text for i, text in enumerate(examples, start=1)
        }
        bindings["seed_count"] = str(seed_count if seed_count is not None else len(examples))

        def substitute(match: re.Match[str]) -> str:
            name = match.group(1)
            if name not in bindings:
                raise TemplateError(f"unbound placeholder {{{name}}}")
            return bindings[name]

        user = _PLACEHOLDER.sub(substitute, self.user_text)
        if self.system_text:
            return f"{self.system_text}\n{user}"
        return user


def load_template(path: str) -> PromptTemplate:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return PromptTemplate(
        system_text=str(obj.get("system_text", "")),
        user_text=str(obj["user_text"]),
        stop_markers=tuple(str(m) for m in obj.get("stop_markers", [])),
    )


# Minimal template for the toy laboratory: the prompt is the seed examples
# themselves, joined by spaces, which keeps it inside the toy alphabet.
TOY_TEMPLATE = PromptTemplate(system_text="", user_text="{example_1}")


# ---------------------------------------------------------------------------
# Pool records


@dataclass(frozen=True)
class PoolSample:
    sample_id: str
    query_text: str
    response_text: str
    query_seed: int
    label_seed: int
    request_index: int


@dataclass(frozen=True)
class RejectEntry:
    request_index: int
    query_text: str
    reason: str
    rouge_max: float | None
    seed: int


def encode_pool_sample(sample: PoolSample) -> dict[str, Any]:
    return {
        "format_version": 1,
        "label_seed": sample.label_seed,
        "query_seed": sample.query_seed,
        "query_text": sample.query_text,
        "request_index": sample.request_index,
        "response_text": sample.response_text,
        "sample_id": sample.sample_id,
    }


def decode_pool_sample(obj: dict[str, Any]) -> PoolSample:
    return PoolSample(
        sample_id=_expect(obj, "sample_id", (str,)),
        query_text=_expect(obj, "query_text", (str,)),
        response_text=_expect(obj, "response_text", (str,)),
        query_seed=int(_expect(obj, "query_seed", (int,))),
        label_seed=int(_expect(obj, "label_seed", (int,))),
        request_index=int(_expect(obj, "request_index", (int,))),
    )


def encode_reject(entry: RejectEntry) -> dict[str, Any]:
    return {
        "format_version": 1,
        "query_text": entry.query_text,
        "reason": entry.reason,
        "request_index": entry.request_index,
        "rouge_max": entry.rouge_max,
        "seed": entry.seed,
    }


# ---------------------------------------------------------------------------
# Pool construction


class PoolError(RuntimeError):
    """Pool construction aborted; partial results are attached for checkpointing."""

    def __init__(self, message: str, pool: list[PoolSample], rejects: list[RejectEntry]):
        super().__init__(message)
        self.pool = pool
        self.rejects = rejects


def derive_seed(root_seed: int, stream: str, index: int) -> int:
    """Deterministic 63-bit per-request seed from the run seed."""
    digest = hashlib.sha256(f"{root_seed}:{stream}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 64
    greedy: bool = False


def build_pool(
    config: PipelineConfig,
    few_shot: Sequence[str],
    generator: Endpoint,
    template: PromptTemplate = TOY_TEMPLATE,
    query_generator: Endpoint | None = None,
    sampling: SamplingParams = SamplingParams(),
    attempt_budget_factor: int = ATTEMPT_BUDGET_FACTOR,
) -> tuple[list[PoolSample], list[RejectEntry]]:
    """Generate and admit query-label pairs until the pool holds pool_size.

    Each attempt renders the template over the few-shot exemplars, asks the
    query generator for a query, gates it (dedup, then ROUGE against all
    pooled queries), and on acceptance asks the label generator to continue
    from the query. Generator failures retry a bounded number of times and
    then abort carrying the partial pool; too many rejections within the
    attempt budget raise a starvation error with a reason breakdown.
    """
    if not few_shot:
        raise ValueError("few_shot exemplars must be non-empty")
    config.check()
    query_endpoint = query_generator if query_generator is not None else generator
    n_target = config.pool_size
    budget = attempt_budget_factor * n_target
    prompt = template.render(few_shot)

    pool: list[PoolSample] = []
    rejects: list[RejectEntry] = []
    accepted_queries: list[str] = []

    def call(endpoint: Endpoint, request: GenRequest) -> str:
        last_error: Exception | None = None
        for _ in range(GENERATOR_RETRIES):
            try:
                return endpoint.generate(request).text
            except EndpointError as exc:
                last_error = exc
        raise PoolError(f"generator failed after {GENERATOR_RETRIES} retries: {last_error}", pool, rejects)

    for attempt in range(budget):
        if len(pool) >= n_target:
            break
        query_seed = derive_seed(config.seed, "query", attempt)
        query = call(
            query_endpoint,
            GenRequest(
                prompt=prompt,
                temperature=sampling.temperature,
                top_p=sampling.top_p,
                max_tokens=sampling.max_tokens,
                seed=query_seed,
                greedy=sampling.greedy,
                stop_markers=template.stop_markers,
            ),
        ).strip()
        verdict = admit_query(query, accepted_queries, config.rouge_threshold, config.dedup)
        if not verdict.accepted:
            rejects.append(RejectEntry(attempt, query, verdict.reason or "rejected", verdict.rouge_max, query_seed))
            continue
        label_seed = derive_seed(config.seed, "label", attempt)
        label = call(
            generator,
            GenRequest(
                prompt=query,
                temperature=sampling.temperature,
                top_p=sampling.top_p,
                max_tokens=sampling.max_tokens,
                seed=label_seed,
                greedy=sampling.greedy,
                stop_markers=template.stop_markers,
            ),
        ).strip()
        if not label:
            rejects.append(RejectEntry(attempt, query, "empty_label", None, label_seed))
            continue
        accepted_queries.append(query)
        pool.append(
            PoolSample(
                sample_id=f"sample-{len(pool):05d}",
                query_text=query,
                response_text=label,
                query_seed=query_seed,
                label_seed=label_seed,
                request_index=attempt,
            )
        )

    if len(pool) < n_target:
        reasons: dict[str, int] = {}
        for entry in rejects:
            reasons[entry.reason] = reasons.get(entry.reason, 0) + 1
        raise PoolError(
            f"admission starvation: {len(pool)}/{n_target} admitted after {budget} attempts "
            f"(rejections: {reasons})",
            pool,
            rejects,
        )
    return pool, rejects
