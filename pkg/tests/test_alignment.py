"""Span alignment, mask propagation, and re-selection."""

from __future__ import annotations

import numpy as np
import pytest

from titok.alignment import (
    AlignmentError,
    align_dataset,
    align_record,
    align_spans,
    propagate_mask,
    reselect_topk,
)
from titok.datamodel import (
    DatasetMeta,
    MaskedDataset,
    MaskedRecord,
    TokenMask,
    check_alignment_partition,
    make_mask,
)
from titok.filtering import select_tokens, kept_count
from titok.excess import mean_excess
from titok.datamodel import ExcessReport
from titok.tokenizers import (
    DEFAULT_NORMALIZER,
    IDENTITY_NORMALIZER,
    Normalizer,
    TokenizerHandle,
    char_tokenizer,
    get_tokenizer,
)

CHAR = get_tokenizer("toy-char")
MERGE = get_tokenizer("toy-merge")


def pieces_handle(tag: str, pieces: list[str]) -> TokenizerHandle:
    """Hand-built handle allowing zero-width pieces (align only detokenizes)."""
    return TokenizerHandle(
        tag=tag,
        tokenize=lambda s: (_ for _ in ()).throw(NotImplementedError),
        detokenize=lambda ids: "".join(pieces[i] for i in ids),
        piece_text=lambda i: pieces[i],
    )


def random_text(rng: np.random.Generator, max_len: int = 60) -> str:
    chars = "abc "
    length = int(rng.integers(1, max_len + 1))
    return "".join(chars[int(i)] for i in rng.integers(0, len(chars), length))


class TestNormalizer:
    def test_idempotent(self):
        samples = ["abc", "▁foo", "a▁b", "▁▁x", "é"]
        for s in samples:
            once = DEFAULT_NORMALIZER.apply(s)
            assert DEFAULT_NORMALIZER.apply(once) == once

    def test_marker_handling(self):
        assert DEFAULT_NORMALIZER.apply("▁foo▁bar") == "foo bar"

    def test_nfc(self):
        assert DEFAULT_NORMALIZER.apply("é") == "é"

    def test_unknown_rule_rejected(self):
        with pytest.raises(ValueError, match="unknown normalizer rules"):
            Normalizer(rules=("bogus",))


class TestAlignSpans:
    def test_identity_char_tokenizers(self):
        src_ids = CHAR.tokenize("ab")
        alignment = align_spans(src_ids, src_ids, CHAR, CHAR)
        assert [p.rule for p in alignment.pairs] == ["one_to_one", "one_to_one"]
        assert check_alignment_partition(alignment, 2, 2)

    def test_single_piece_vs_split(self):
        src = pieces_handle("whole", ["foobar"])
        tgt = pieces_handle("split", ["foo", "bar"])
        alignment = align_spans((0,), (0, 1), src, tgt, IDENTITY_NORMALIZER)
        assert len(alignment.pairs) == 1
        pair = alignment.pairs[0]
        assert pair.source_span == (0, 1)
        assert pair.target_span == (0, 2)
        assert pair.rule == "one_to_many"

    def test_split_vs_single_piece(self):
        src = pieces_handle("split", ["foo", "bar"])
        tgt = pieces_handle("whole", ["foobar"])
        alignment = align_spans((0, 1), (0,), src, tgt, IDENTITY_NORMALIZER)
        assert alignment.pairs[0].rule == "many_to_one"

    def test_mismatched_texts_error_with_offset(self):
        with pytest.raises(AlignmentError, match="texts differ") as err:
            align_spans(CHAR.tokenize("abc"), CHAR.tokenize("abd"), CHAR, CHAR)
        assert err.value.byte_offset == 2

    def test_empty_sequence_error(self):
        with pytest.raises(AlignmentError, match="empty"):
            align_spans((), CHAR.tokenize("a"), CHAR, CHAR)

    def test_fuzz_char_vs_merge_redecode_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            text = random_text(rng)
            src_ids = CHAR.tokenize(text)
            tgt_ids = MERGE.tokenize(text)
            alignment = align_spans(src_ids, tgt_ids, CHAR, MERGE)
            assert check_alignment_partition(alignment, len(src_ids), len(tgt_ids))
            for pair in alignment.pairs:
                s0, s1 = pair.source_span
                t0, t1 = pair.target_span
                assert CHAR.detokenize(src_ids[s0:s1]) == MERGE.detokenize(tgt_ids[t0:t1])

    def test_greedy_minimality(self):
        rng = np.random.default_rng(77)
        for _ in range(50):
            text = random_text(rng)
            src_ids = CHAR.tokenize(text)
            tgt_ids = MERGE.tokenize(text)
            alignment = align_spans(src_ids, tgt_ids, CHAR, MERGE)
            for pair in alignment.pairs:
                s0, s1 = pair.source_span
                t0, t1 = pair.target_span
                span_text = CHAR.detokenize(src_ids[s0:s1])
                for t_mid in range(t0 + 1, t1):
                    assert MERGE.detokenize(tgt_ids[t0:t_mid]) != span_text

    def test_zero_width_suffix_on_both_sides_falls_back_to_many_to_many(self):
        handle = pieces_handle("zw", ["a", ""])
        alignment = align_spans((0, 1), (0, 1, 1), handle, handle, IDENTITY_NORMALIZER)
        assert check_alignment_partition(alignment, 2, 3)
        assert alignment.pairs[-1].rule == "many_to_many"
        assert alignment.pairs[-1].source_span == (1, 2)
        assert alignment.pairs[-1].target_span == (1, 3)

    def test_zero_width_suffix_strict_mode_errors(self):
        handle = pieces_handle("zw", ["a", ""])
        with pytest.raises(AlignmentError, match="no matching span"):
            align_spans((0, 1), (0, 1, 1), handle, handle, IDENTITY_NORMALIZER, strict=True)

    def test_one_sided_zero_width_suffix_folds_into_last_pair(self):
        handle = pieces_handle("zw", ["a", ""])
        alignment = align_spans((0, 1), (0,), handle, handle, IDENTITY_NORMALIZER)
        assert check_alignment_partition(alignment, 2, 1)
        assert alignment.pairs[-1].rule == "many_to_one"

    def test_determinism(self):
        text = "abc cab bca"
        a1 = align_spans(CHAR.tokenize(text), MERGE.tokenize(text), CHAR, MERGE)
        a2 = align_spans(CHAR.tokenize(text), MERGE.tokenize(text), CHAR, MERGE)
        assert a1 == a2


class TestPropagateMask:
    def test_one_to_one_copies(self):
        ids = CHAR.tokenize("ab")
        alignment = align_spans(ids, ids, CHAR, CHAR)
        out = propagate_mask(alignment, make_mask("s", [1.0, 0.0]))
        assert out.keep == (1.0, 0.0)
        assert out.binary

    def test_many_to_many_averages(self):
        src = pieces_handle("s", ["ab", "ba"])
        tgt = pieces_handle("t", ["abb", "a"])
        alignment = align_spans((0, 1), (0, 1), src, tgt, IDENTITY_NORMALIZER)
        assert alignment.pairs[0].rule == "many_to_many"
        out = propagate_mask(alignment, make_mask("s", [1.0, 0.0]))
        assert out.keep == (0.5, 0.5)
        assert not out.binary

    def test_replication_one_to_many(self):
        src = pieces_handle("s", ["abab"])
        tgt = pieces_handle("t", ["ab"])
        alignment = align_spans((0,), (0, 0), src, tgt, IDENTITY_NORMALIZER)
        out = propagate_mask(alignment, make_mask("s", [1.0]))
        assert out.keep == (1.0, 1.0)

    def test_length_mismatch_error(self):
        ids = CHAR.tokenize("ab")
        alignment = align_spans(ids, ids, CHAR, CHAR)
        with pytest.raises(ValueError, match="length"):
            propagate_mask(alignment, make_mask("s", [1.0]))

    def test_requires_binary_source(self):
        ids = CHAR.tokenize("ab")
        alignment = align_spans(ids, ids, CHAR, CHAR)
        with pytest.raises(ValueError, match="binary"):
            propagate_mask(alignment, make_mask("s", [0.5, 0.5]))

    def test_span_mean_conservation_fuzz(self):
        rng = np.random.default_rng(55)
        for _ in range(100):
            text = random_text(rng)
            src_ids = CHAR.tokenize(text)
            tgt_ids = MERGE.tokenize(text)
            alignment = align_spans(src_ids, tgt_ids, CHAR, MERGE)
            source_mask = make_mask("s", [float(rng.integers(0, 2)) for _ in src_ids])
            out = propagate_mask(alignment, source_mask)
            for pair in alignment.pairs:
                s0, s1 = pair.source_span
                t0, t1 = pair.target_span
                src_mean = sum(source_mask.keep[s0:s1]) / (s1 - s0)
                tgt_mean = sum(out.keep[t0:t1]) / (t1 - t0)
                assert abs(src_mean - tgt_mean) <= 1e-12


class TestReselectTopk:
    def test_documented_example(self):
        out = reselect_topk(make_mask("s", [1.0, 0.5, 0.5, 0.0]), 50.0)
        assert out.keep == (1.0, 1.0, 0.0, 0.0)

    def test_all_equal_pure_tie_break(self):
        out = reselect_topk(make_mask("s", [0.5] * 8), 25.0)
        assert out.keep == (1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(66)
        for _ in range(100):
            length = int(rng.integers(1, 40))
            values = [float(rng.choice([0.0, 0.25, 0.5, 1.0])) for _ in range(length)]
            k = float(rng.uniform(1.0, 100.0))
            out = reselect_topk(make_mask("s", values), k)
            n = kept_count(length, k)
            ranked = sorted(range(length), key=lambda i: (-values[i], i))[:n]
            expected = tuple(1.0 if i in set(ranked) else 0.0 for i in range(length))
            assert out.keep == expected

    def test_range_check(self):
        bad = TokenMask("s", (1.5,), False)
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            reselect_topk(bad, 50.0)


def toy_dataset(rng: np.random.Generator, n_records: int, k: float = 70.0, tokenizer=CHAR) -> MaskedDataset:
    records = []
    for i in range(n_records):
        text = random_text(rng, max_len=40)
        ids = tokenizer.tokenize(text)
        scores = tuple(float(x) for x in rng.normal(size=len(ids)))
        report = ExcessReport(f"s{i}", scores, mean_excess(scores))
        mask = select_tokens(report, k)
        records.append(MaskedRecord(f"s{i}", "", text, ids, mask))
    return MaskedDataset(tuple(records), DatasetMeta(k, n_records, "m", tokenizer.tag))


class TestAlignDataset:
    def test_identity_tokenizers_return_input_masks(self):
        rng = np.random.default_rng(88)
        dataset = toy_dataset(rng, 20)
        aligned, skipped = align_dataset(dataset, CHAR, CHAR, 70.0)
        assert not skipped
        for before, after in zip(dataset.records, aligned.records):
            assert after.mask.keep == before.mask.keep
            assert after.token_ids == before.token_ids

    def test_char_to_merge_satisfies_dataset_invariants(self):
        rng = np.random.default_rng(99)
        dataset = toy_dataset(rng, 50)
        aligned, skipped = align_dataset(dataset, CHAR, MERGE, 70.0)
        assert not skipped
        assert aligned.meta.target_tokenizer_tag == "toy-merge"
        assert aligned.meta.m_kept == len(aligned.records) == 50
        for record in aligned.records:
            assert len(record.mask.keep) == len(record.token_ids)
            assert record.mask.binary
            assert any(record.mask.keep)
            assert MERGE.detokenize(record.token_ids) == record.response_text
            expected_kept = kept_count(len(record.token_ids), 70.0)
            assert int(sum(record.mask.keep)) == expected_kept

    def test_skip_policy_logs_and_continues(self):
        rng = np.random.default_rng(101)
        dataset = toy_dataset(rng, 10)
        # target alphabet lacks 'b': any record containing it cannot re-tokenize
        narrow = char_tokenizer("narrow", "ac ")
        aligned, skipped = align_dataset(dataset, CHAR, narrow, 70.0, on_error="skip")
        assert len(aligned.records) + len(skipped) == 10
        assert skipped, "fuzz text over {a,b,c, space} must hit the narrow alphabet"
        assert aligned.meta.m_kept == len(aligned.records)

    def test_abort_policy_raises_with_sample_id(self):
        rng = np.random.default_rng(101)
        dataset = toy_dataset(rng, 10)
        narrow = char_tokenizer("narrow", "ac ")
        with pytest.raises(AlignmentError, match="sample"):
            align_dataset(dataset, CHAR, narrow, 70.0, on_error="abort")

    def test_identity_law_full_roundtrip(self):
        # aligning a tokenization with itself and re-selecting at the same k
        # returns the original binary mask whenever kept counts match
        rng = np.random.default_rng(111)
        for _ in range(30):
            text = random_text(rng, max_len=30)
            ids = MERGE.tokenize(text)
            scores = tuple(float(x) for x in rng.normal(size=len(ids)))
            mask = select_tokens(ExcessReport("s", scores, mean_excess(scores)), 70.0)
            record = MaskedRecord("s", "", text, ids, mask)
            out = align_record(record, MERGE, MERGE, 70.0)
            assert out.mask.keep == mask.keep
