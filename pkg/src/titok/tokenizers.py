"""Tokenizer handles, text normalization, and the tokenizer registry.

A TokenizerHandle wraps any tokenizer behind three callables (tokenize,
detokenize, piece_text) so alignment and the toy laboratory never care
where a vocabulary came from. Built-in toy tokenizers register under fixed
tags; external tokenizers load from a plain-text vocabulary file where each
line is one JSON-encoded piece string and tokenization is greedy longest
match (see docs/wire_formats.md).
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

# Word-boundary glyphs used by common subword vocabularies; the normalizer
# maps them to plain spaces so decoded spans compare byte-for-byte.
WORD_BOUNDARY_MARKERS = ("▁", "Ġ")

VOCAB_FILE_HEADER = "#titok-vocab v1"

NORMALIZER_RULES = ("unicode_nfc", "strip_leading_space_marker", "collapse_internal_marker")


def _rule_unicode_nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _rule_strip_leading_space_marker(text: str) -> str:
    return text.lstrip("".join(WORD_BOUNDARY_MARKERS))


def _rule_collapse_internal_marker(text: str) -> str:
    for marker in WORD_BOUNDARY_MARKERS:
        text = text.replace(marker, " ")
    return text


_RULES: dict[str, Callable[[str], str]] = {
    "unicode_nfc": _rule_unicode_nfc,
    "strip_leading_space_marker": _rule_strip_leading_space_marker,
    "collapse_internal_marker": _rule_collapse_internal_marker,
}


@dataclass(frozen=True)
class Normalizer:
    """Ordered, idempotent text normalization applied before span comparison."""

    rules: tuple[str, ...] = NORMALIZER_RULES

    def __post_init__(self) -> None:
        unknown = [r for r in self.rules if r not in _RULES]
        if unknown:
            raise ValueError(f"unknown normalizer rules: {unknown}")

    def apply(self, text: str) -> str:
        for rule in self.rules:
            text = _RULES[rule](text)
        return text

    def __call__(self, text: str) -> str:
        return self.apply(text)


IDENTITY_NORMALIZER = Normalizer(rules=())
DEFAULT_NORMALIZER = Normalizer()


@dataclass(frozen=True)
class TokenizerHandle:
    """A tokenizer as three functions plus a stable identity tag.

    Registered tokenizers must round-trip: detokenize(tokenize(s)) == s
    after normalization, for every s over the supported alphabet.
    """

    tag: str
    tokenize: Callable[[str], tuple[int, ...]]
    detokenize: Callable[[Sequence[int]], str]
    piece_text: Callable[[int], str]


class TokenizeError(ValueError):
    """Input text cannot be segmented with the given vocabulary."""


def char_tokenizer(tag: str, alphabet: str) -> TokenizerHandle:
    """One token per character; ids index into the alphabet string."""
    index = {ch: i for i, ch in enumerate(alphabet)}
    pieces = tuple(alphabet)

    def tokenize(text: str) -> tuple[int, ...]:
        try:
            return tuple(index[ch] for ch in text)
        except KeyError as exc:
            raise TokenizeError(f"character {exc.args[0]!r} not in alphabet of {tag!r}") from None

    def detokenize(ids: Sequence[int]) -> str:
        return "".join(pieces[i] for i in ids)

    def piece_text(token_id: int) -> str:
        return pieces[token_id]

    return TokenizerHandle(tag=tag, tokenize=tokenize, detokenize=detokenize, piece_text=piece_text)


def greedy_piece_tokenizer(tag: str, pieces: Sequence[str]) -> TokenizerHandle:
    """Greedy longest-match tokenizer over an ordered piece list.

    Ids are piece positions. Coverage requires the single characters of the
    supported alphabet to be present as pieces; an unmatchable character
    raises TokenizeError.
    """
    piece_list = tuple(pieces)
    if len(set(piece_list)) != len(piece_list):
        raise ValueError(f"duplicate pieces in vocabulary of {tag!r}")
    if any(p == "" for p in piece_list):
        raise ValueError("empty piece in vocabulary")
    by_text = {p: i for i, p in enumerate(piece_list)}
    max_len = max(len(p) for p in piece_list)

    def tokenize(text: str) -> tuple[int, ...]:
        out: list[int] = []
        pos = 0
        n = len(text)
        while pos < n:
            for width in range(min(max_len, n - pos), 0, -1):
                piece = text[pos : pos + width]
                token_id = by_text.get(piece)
                if token_id is not None:
                    out.append(token_id)
                    pos += width
                    break
            else:
                raise TokenizeError(f"character {text[pos]!r} not coverable by vocabulary of {tag!r}")
        return tuple(out)

    def detokenize(ids: Sequence[int]) -> str:
        return "".join(piece_list[i] for i in ids)

    def piece_text(token_id: int) -> str:
        return piece_list[token_id]

    return TokenizerHandle(tag=tag, tokenize=tokenize, detokenize=detokenize, piece_text=piece_text)


def load_vocab_file(path: str | Path) -> list[str]:
    """Parse the plain-text vocabulary format: a header line, then one
    JSON-encoded piece string per line. '#' lines after the header are
    comments."""
    import json

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != VOCAB_FILE_HEADER:
        raise ValueError(f"{path}: missing vocabulary header {VOCAB_FILE_HEADER!r}")
    pieces: list[str] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            piece = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{line_no}: invalid piece literal: {exc.msg}") from exc
        if not isinstance(piece, str):
            raise ValueError(f"{path}:{line_no}: piece must be a JSON string")
        pieces.append(piece)
    if not pieces:
        raise ValueError(f"{path}: vocabulary is empty")
    return pieces


def load_tokenizer_file(path: str | Path, tag: str | None = None) -> TokenizerHandle:
    """Build a greedy longest-match tokenizer from a vocabulary file."""
    path = Path(path)
    return greedy_piece_tokenizer(tag or path.stem, load_vocab_file(path))


# ---------------------------------------------------------------------------
# Registry

_REGISTRY: dict[str, Callable[[], TokenizerHandle]] = {}
_CACHE: dict[str, TokenizerHandle] = {}


def register_tokenizer(tag: str, factory: Callable[[], TokenizerHandle]) -> None:
    _REGISTRY[tag] = factory
    _CACHE.pop(tag, None)


def get_tokenizer(tag: str) -> TokenizerHandle:
    if tag not in _CACHE:
        if tag not in _REGISTRY:
            known = ", ".join(sorted(_REGISTRY)) or "(none)"
            raise KeyError(f"unknown tokenizer tag {tag!r}; registered: {known}")
        _CACHE[tag] = _REGISTRY[tag]()
    return _CACHE[tag]


def registered_tags() -> list[str]:
    return sorted(_REGISTRY)


# Built-in toy pair. The char tokenizer splits per character; the merge
# tokenizer applies the fixed merge table shipped with the package, so
# alignment tests are stable across releases.

TOY_TEXT_ALPHABET = "abcdefghijklmnopqrstuvwxyz "


def _toy_char_factory() -> TokenizerHandle:
    return char_tokenizer("toy-char", TOY_TEXT_ALPHABET)


def _toy_merge_factory() -> TokenizerHandle:
    with resources.as_file(resources.files("titok.data").joinpath("toy_merges.txt")) as path:
        return load_tokenizer_file(path, tag="toy-merge")


register_tokenizer("toy-char", _toy_char_factory)
register_tokenizer("toy-merge", _toy_merge_factory)
