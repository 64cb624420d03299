"""Deterministic toy laboratory: smoothed char-bigram models standing in for
every scorer and generator role.

The amateur is a bigram model fit on a base corpus; the expert is the same
model plus a sparse additive delta fit on a task corpus, so the positions
where the delta fires are known exactly and excess scores become
analytically predictable. The target model is an independent bigram fit on
masked counts, which is the exact minimizer of the masked
negative-log-likelihood objective for a count-based model. A char-level and
a merge-level tokenizer over the same alphabet exercise mask alignment.

Everything is seeded: same inputs, same bytes out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import MaskedDataset, ScoredTrace, TokenRecord
from .protocol import GenRequest, GenResponse, ScoreRequest
from .tokenizers import TOY_TEXT_ALPHABET, TokenizerHandle, get_tokenizer

BOUNDARY = "#"
TOY_VOCAB: tuple[str, ...] = tuple(TOY_TEXT_ALPHABET) + (BOUNDARY,)

MODEL_FILE_HEADER = "#titok-toylm v1"
ADAPTER_FILE_HEADER = "#titok-toyadapter v1"


@dataclass(frozen=True, eq=False)
class ToyLM:
    """Char-bigram model; logits[i, j] = log P(vocab[j] | vocab[i])."""

    vocab: tuple[str, ...]
    logits: np.ndarray
    smoothing_alpha: float

    @cached_property
    def index(self) -> dict[str, int]:
        return {sym: i for i, sym in enumerate(self.vocab)}

    def sym_index(self, symbol: str) -> int:
        try:
            return self.index[symbol]
        except KeyError:
            raise ValueError(f"symbol {symbol!r} outside vocabulary") from None

    def row_softmax_error(self) -> float:
        """Max absolute deviation of any row's probability mass from 1."""
        return float(np.abs(np.exp(self.logits).sum(axis=1) - 1.0).max())


@dataclass(frozen=True)
class ToyAdapter:
    """Sparse additive delta over bigram logits, plus the boosted pairs.

    Application never mutates the base model, so discarding the adapter
    restores the original logits bit-exactly.
    """

    delta: Mapping[tuple[str, str], float]
    planted: tuple[tuple[str, str], ...]


def fit_bigram(corpus: Sequence[str], alpha: float, vocab: Sequence[str] = TOY_VOCAB) -> ToyLM:
    """Additive-smoothed bigram fit: log((count + alpha) / (row_total + alpha*V)).

    Each string contributes boundary transitions at both ends. Deterministic
    given corpus order.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if alpha <= 0:
        raise ValueError("smoothing alpha must be positive")
    vocab = tuple(vocab)
    if BOUNDARY not in vocab:
        raise ValueError(f"vocabulary must contain the boundary symbol {BOUNDARY!r}")
    index = {sym: i for i, sym in enumerate(vocab)}
    v = len(vocab)
    counts = np.zeros((v, v), dtype=np.float64)
    for text in corpus:
        prev = index[BOUNDARY]
        for ch in text:
            if ch not in index:
                raise ValueError(f"symbol {ch!r} outside vocabulary")
            cur = index[ch]
            counts[prev, cur] += 1.0
            prev = cur
        counts[prev, index[BOUNDARY]] += 1.0
    row_totals = counts.sum(axis=1, keepdims=True)
    probs = (counts + alpha) / (row_totals + alpha * v)
    return ToyLM(vocab=vocab, logits=np.log(probs), smoothing_alpha=alpha)


def fit_adapter(base: ToyLM, task_corpus: Sequence[str]) -> ToyAdapter:
    """Delta boosting exactly the bigrams more frequent in the task corpus.

    Magnitude is the log-ratio of smoothed frequencies, so a single-entry
    delta's effect on any excess score can be predicted in closed form. The
    boosted pair set is recorded for oracle checks.
    """
    task = fit_bigram(task_corpus, base.smoothing_alpha, base.vocab)
    delta: dict[tuple[str, str], float] = {}
    for i, ctx in enumerate(base.vocab):
        for j, nxt in enumerate(base.vocab):
            gap = float(task.logits[i, j] - base.logits[i, j])
            if gap > 0:
                delta[(ctx, nxt)] = gap
    return ToyAdapter(delta=delta, planted=tuple(sorted(delta)))


def effective_logits(model: ToyLM, adapter: ToyAdapter | None) -> np.ndarray:
    """Base logits with the adapter delta added; base is never mutated.

    Returns the base array itself (read-only by convention) when there is no
    adapter.
    """
    if adapter is None or not adapter.delta:
        return model.logits
    out = model.logits.copy()
    for (ctx, nxt), gap in adapter.delta.items():
        out[model.sym_index(ctx), model.sym_index(nxt)] += gap
    return out


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    peak = logits.max(axis=1, keepdims=True)
    shifted = logits - peak
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def toy_score(
    model: ToyLM,
    adapter: ToyAdapter | None,
    text: str,
    tokenizer: TokenizerHandle,
    query: str = "",
    sample_id: str = "toy",
) -> ScoredTrace:
    """Score a response under both roles in one pass.

    The amateur role uses the base logits, the expert role the base plus
    delta; both are log-softmaxed so each per-char term is a proper
    log-probability. A multi-char token's log-prob is the sum over its
    chars. The context chain runs boundary -> query -> response, but only
    response tokens are emitted.
    """
    token_ids = tokenizer.tokenize(text)
    amateur = _log_softmax_rows(model.logits)
    expert = _log_softmax_rows(effective_logits(model, adapter))
    prev = model.sym_index(BOUNDARY)
    for ch in query:
        prev = model.sym_index(ch)
    records = []
    for token_id in token_ids:
        piece = tokenizer.piece_text(token_id)
        logp_a = 0.0
        logp_e = 0.0
        for ch in piece:
            cur = model.sym_index(ch)
            logp_a += amateur[prev, cur]
            logp_e += expert[prev, cur]
            prev = cur
        records.append(
            TokenRecord(token_id=token_id, token_text=piece, logp_amateur=float(logp_a), logp_expert=float(logp_e))
        )
    return ScoredTrace(sample_id=sample_id, query_text=query, response_text=text, tokens=tuple(records))


# ---------------------------------------------------------------------------
# Generation


def nucleus_indices(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Indices of the smallest prefix of the descending-sorted distribution
    whose cumulative mass reaches top_p; ties break toward lower index."""
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(cumulative, top_p, side="left"))
    return np.sort(order[: cutoff + 1])


def toy_generate(
    model: ToyLM,
    adapter: ToyAdapter | None,
    prompt: str,
    request: GenRequest,
) -> GenResponse:
    """Sample a string char by char; fully determined by the request seed.

    Generation walks the bigram chain from boundary through the prompt, then
    samples with temperature and nucleus truncation until the boundary
    symbol, the token budget, or a stop marker ends it.
    """
    if not request.greedy and request.temperature <= 0:
        raise ValueError("temperature must be positive unless greedy")
    if not (0 < request.top_p <= 1):
        raise ValueError("top_p must be in (0, 1]")
    rng = np.random.default_rng(request.seed)
    logits = effective_logits(model, adapter)
    prev = model.sym_index(BOUNDARY)
    for ch in prompt:
        prev = model.sym_index(ch)
    boundary = model.sym_index(BOUNDARY)
    out: list[str] = []
    finish = "length"
    for _ in range(request.max_tokens):
        row = logits[prev]
        if request.greedy:
            nxt = int(np.argmax(row))
        else:
            scaled = row / request.temperature
            scaled = scaled - scaled.max()
            probs = np.exp(scaled)
            probs /= probs.sum()
            if request.top_p < 1.0:
                kept = nucleus_indices(probs, request.top_p)
                mask = np.zeros_like(probs)
                mask[kept] = probs[kept]
                probs = mask / mask.sum()
            cumulative = np.cumsum(probs)
            draw = rng.random()
            nxt = int(np.searchsorted(cumulative, draw, side="right"))
            nxt = min(nxt, len(probs) - 1)
        if nxt == boundary:
            finish = "stop"
            break
        out.append(model.vocab[nxt])
        prev = nxt
    text = "".join(out)
    if request.stop_markers:
        cut = min((pos for m in request.stop_markers if (pos := text.find(m)) >= 0), default=-1)
        if cut >= 0:
            text = text[:cut]
            finish = "marker"
    return GenResponse(text=text, finish_reason=finish, seed=request.seed)


# ---------------------------------------------------------------------------
# Masked training and evaluation


def train_masked_target(
    dataset: MaskedDataset,
    alpha: float,
    tokenizer: TokenizerHandle,
    vocab: Sequence[str] = TOY_VOCAB,
) -> ToyLM:
    """Fit the target bigram on exactly the kept positions.

    A (context, next) char transition counts iff it lies inside a token
    whose mask value is 1; the end-of-string boundary transition counts iff
    the final token is kept. With all-ones masks this reproduces fit_bigram
    on the same texts count for count, and in general it is the exact
    minimizer of the masked NLL objective for a count-based model.
    """
    if alpha <= 0:
        raise ValueError("smoothing alpha must be positive")
    vocab = tuple(vocab)
    index = {sym: i for i, sym in enumerate(vocab)}
    v = len(vocab)
    counts = np.zeros((v, v), dtype=np.float64)
    total_kept = 0
    for record in dataset.records:
        if not record.mask.binary:
            raise ValueError(f"record {record.sample_id!r} mask is not binary")
        prev = index[BOUNDARY]
        for ch in record.query_text:
            prev = index[ch]
        for token_id, keep in zip(record.token_ids, record.mask.keep):
            kept = keep == 1.0
            for ch in tokenizer.piece_text(token_id):
                cur = index[ch]
                if kept:
                    counts[prev, cur] += 1.0
                prev = cur
            if kept:
                total_kept += 1
        if record.mask.keep and record.mask.keep[-1] == 1.0:
            counts[prev, index[BOUNDARY]] += 1.0
    if total_kept == 0:
        raise ValueError("no kept tokens anywhere in the dataset")
    row_totals = counts.sum(axis=1, keepdims=True)
    probs = (counts + alpha) / (row_totals + alpha * v)
    return ToyLM(vocab=vocab, logits=np.log(probs), smoothing_alpha=alpha)


def sequence_nll(model: ToyLM, text: str, query: str = "") -> tuple[float, int]:
    """Exact total negative log-likelihood of a string and its transition count.

    Walks boundary -> query -> text -> boundary; only text transitions and
    the closing boundary contribute.
    """
    logp = _log_softmax_rows(model.logits)
    prev = model.sym_index(BOUNDARY)
    for ch in query:
        prev = model.sym_index(ch)
    total = 0.0
    steps = 0
    for ch in text:
        cur = model.sym_index(ch)
        total -= logp[prev, cur]
        steps += 1
        prev = cur
    total -= logp[prev, model.sym_index(BOUNDARY)]
    steps += 1
    return total, steps


def corpus_nll(model: ToyLM, corpus: Iterable[str]) -> float:
    """Mean per-transition NLL across a corpus, by exact enumeration."""
    total = 0.0
    steps = 0
    for text in corpus:
        t, s = sequence_nll(model, text)
        total += t
        steps += s
    if steps == 0:
        raise ValueError("empty corpus")
    return total / steps


# ---------------------------------------------------------------------------
# Model files (plain text, header line + JSON meta + one row per line)


def save_model(model: ToyLM, path: str | Path) -> None:
    lines = [MODEL_FILE_HEADER]
    lines.append(json.dumps({"smoothing_alpha": model.smoothing_alpha, "vocab": list(model.vocab)}, sort_keys=True))
    for row in model.logits:
        lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> ToyLM:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MODEL_FILE_HEADER:
        raise ValueError(f"{path}: missing model header {MODEL_FILE_HEADER!r}")
    meta = json.loads(lines[1])
    vocab = tuple(str(s) for s in meta["vocab"])
    rows = [[float(x) for x in line.split()] for line in lines[2:] if line.strip()]
    logits = np.array(rows, dtype=np.float64)
    if logits.shape != (len(vocab), len(vocab)):
        raise ValueError(f"{path}: matrix shape {logits.shape} does not match vocab size {len(vocab)}")
    return ToyLM(vocab=vocab, logits=logits, smoothing_alpha=float(meta["smoothing_alpha"]))


def save_adapter(adapter: ToyAdapter, path: str | Path) -> None:
    lines = [ADAPTER_FILE_HEADER]
    for (ctx, nxt) in sorted(adapter.delta):
        lines.append(json.dumps({"context": ctx, "delta": adapter.delta[(ctx, nxt)], "next": nxt}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_adapter(path: str | Path) -> ToyAdapter:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ADAPTER_FILE_HEADER:
        raise ValueError(f"{path}: missing adapter header {ADAPTER_FILE_HEADER!r}")
    delta: dict[tuple[str, str], float] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        delta[(str(obj["context"]), str(obj["next"]))] = float(obj["delta"])
    return ToyAdapter(delta=delta, planted=tuple(sorted(delta)))


# ---------------------------------------------------------------------------
# Endpoint adapter


class ToyEndpoint:
    """Serves both generator and scorer roles from one model/adapter pair."""

    def __init__(self, model: ToyLM, adapter: ToyAdapter | None, tokenizer: TokenizerHandle):
        self.model = model
        self.adapter = adapter
        self.tokenizer = tokenizer

    def generate(self, request: GenRequest) -> GenResponse:
        return toy_generate(self.model, self.adapter, request.prompt, request)

    def score(self, request: ScoreRequest) -> ScoredTrace:
        return toy_score(
            self.model,
            self.adapter,
            request.response_text,
            self.tokenizer,
            query=request.query_text,
            sample_id=request.sample_id,
        )

    def close(self) -> None:
        pass


def toy_tokenizer_pair() -> tuple[TokenizerHandle, TokenizerHandle]:
    """The built-in char-level and merge-level tokenizers over the toy alphabet."""
    return get_tokenizer("toy-char"), get_tokenizer("toy-merge")
