"""Shared fixtures: trace builders for fuzzing and the planted-knowledge
corpus recipe used by the end-to-end transfer checks."""

from __future__ import annotations

import numpy as np

from titok.datamodel import ScoredTrace, TokenRecord

BASE_WORDS = [
    "bead", "cage", "dime", "fable", "gleam", "hedge", "idle",
    "jade", "kelim", "lagea", "mield", "badge", "climb", "field",
]
TASK_WORDS = ["nopqr", "qrstu", "tuvwx", "wxyz", "norst", "pquvz"]

FEW_SHOT = [
    "nopqr qrstu bead cage",
    "tuvwx wxyz dime fable",
    "norst pquvz gleam",
    "qrstu nopqr hedge",
    "wxyz tuvwx idle",
]


def planted_bigrams() -> set[tuple[str, str]]:
    """Character bigrams the task corpus plants on top of the base language:
    the in-word transitions of the task words plus the transitions into them
    from a space or the string boundary."""
    pairs: set[tuple[str, str]] = set()
    for word in TASK_WORDS:
        pairs.update(zip(word, word[1:]))
        pairs.add((" ", word[0]))
        pairs.add(("#", word[0]))
    return pairs


def base_lines(n_lines: int, seed: int, lo: int = 8, hi: int = 12) -> list[str]:
    rng = np.random.default_rng(seed)
    return [
        " ".join(BASE_WORDS[int(i)] for i in rng.integers(0, len(BASE_WORDS), int(rng.integers(lo, hi + 1))))
        for _ in range(n_lines)
    ]


def task_lines(n_lines: int, seed: int, lo: int = 8, hi: int = 12, task_frac: float = 0.55) -> list[str]:
    """Task corpus: base-style words mixed with planted task words, so the
    adapter delta is large exactly on the planted bigrams."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_lines):
        words = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            vocab = TASK_WORDS if rng.random() < task_frac else BASE_WORDS
            words.append(vocab[int(rng.integers(0, len(vocab)))])
        out.append(" ".join(words))
    return out


def pure_task_lines(n_lines: int, seed: int, lo: int = 8, hi: int = 12) -> list[str]:
    """Held-out text drawn from the task words only, for NLL evaluation."""
    rng = np.random.default_rng(seed)
    return [
        " ".join(TASK_WORDS[int(i)] for i in rng.integers(0, len(TASK_WORDS), int(rng.integers(lo, hi + 1))))
        for _ in range(n_lines)
    ]


def random_trace(rng: np.random.Generator, sample_id: str, max_len: int = 64) -> ScoredTrace:
    """A trace whose token texts trivially concatenate to the response."""
    length = int(rng.integers(1, max_len + 1))
    chars = "abcdefghijklmnopqrstuvwxyz "
    tokens = []
    for _ in range(length):
        text = chars[int(rng.integers(0, len(chars)))]
        tokens.append(
            TokenRecord(
                token_id=int(rng.integers(0, 1000)),
                token_text=text,
                logp_amateur=float(-rng.uniform(0.0, 20.0)),
                logp_expert=float(-rng.uniform(0.0, 20.0)),
            )
        )
    response = "".join(t.token_text for t in tokens)
    return ScoredTrace(sample_id=sample_id, query_text="", response_text=response, tokens=tuple(tokens))
