"""Sample filtering and token selection against brute-force oracles."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from titok.datamodel import DatasetMeta, ExcessReport, MaskedDataset, MaskedRecord, TokenMask
from titok.excess import mean_excess
from titok.filtering import (
    RankPolicy,
    apply_mask_stats,
    filter_samples,
    kept_count,
    select_tokens,
    top_k_positions,
)


def report(sample_id: str, scores) -> ExcessReport:
    scores = tuple(float(s) for s in scores)
    return ExcessReport(sample_id, scores, mean_excess(scores))


def oracle_top_m(reports, m):
    """Full-sort oracle: stable sort by descending mean keeps input order on ties."""
    ranked = sorted(enumerate(reports), key=lambda pair: -pair[1].mean_score)
    return [r.sample_id for _, r in ranked[:m]]


def oracle_mask(scores, k_percent, floor_min_one=True):
    n = math.floor(Fraction(k_percent) * len(scores) / 100)
    if floor_min_one:
        n = max(1, n)
    ranked = sorted(enumerate(scores), key=lambda pair: (-pair[1], pair[0]))
    kept = {i for i, _ in ranked[:n]}
    return tuple(1.0 if i in kept else 0.0 for i in range(len(scores)))


class TestFilterSamples:
    def test_top_m_simple(self):
        reports = [report("a", [0.5]), report("b", [1.5]), report("c", [1.0])]
        assert filter_samples(reports, 2) == ["b", "c"]

    def test_ties_break_by_input_order(self):
        reports = [report(s, [1.0]) for s in "abc"]
        assert filter_samples(reports, 2) == ["a", "b"]

    def test_errors(self):
        reports = [report("a", [1.0])]
        with pytest.raises(ValueError, match="exceeds"):
            filter_samples(reports, 2)
        with pytest.raises(ValueError, match="duplicate"):
            filter_samples([report("a", [1.0]), report("a", [2.0])], 1)

    def test_pool_protocol_matches_full_sort_oracle(self):
        # keep-top-M over a pool generated at twice that size
        m = 250
        rng = np.random.default_rng(123)
        reports = [report(f"s{i:04d}", rng.uniform(-2, 2, size=int(rng.integers(1, 20)))) for i in range(2 * m)]
        assert filter_samples(reports, m) == oracle_top_m(reports, m)

    def test_fuzz_with_ties_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            m = int(rng.integers(1, n + 1))
            # draw means from a tiny grid so ties are common
            reports = [
                ExcessReport(f"s{i}", (float(rng.choice([0.0, 0.5, 1.0])),), float(rng.choice([0.0, 0.5, 1.0])))
                for i in range(n)
            ]
            assert filter_samples(reports, m) == oracle_top_m(reports, m)

    def test_kept_means_invariant_under_permutation(self):
        rng = np.random.default_rng(9)
        reports = [report(f"s{i}", rng.uniform(-1, 1, 5)) for i in range(30)]
        kept = filter_samples(reports, 10)
        by_id = {r.sample_id: r.mean_score for r in reports}
        expected = sorted((by_id[s] for s in kept), reverse=True)
        perm = [reports[i] for i in rng.permutation(len(reports))]
        kept_perm = filter_samples(perm, 10)
        assert sorted((by_id[s] for s in kept_perm), reverse=True) == expected


class TestKeptCount:
    def test_seventy_percent_of_ten(self):
        assert kept_count(10, 70.0) == 7

    def test_floor_yields_zero_then_min_one_applies(self):
        assert kept_count(3, 30.0) == 1
        assert kept_count(3, 30.0, floor_min_one=False) == 0

    def test_exact_rational_floor(self):
        # 29% of 100 is exactly 29; float arithmetic would say 28.999...
        assert kept_count(100, 29.0) == 29
        assert math.floor(0.29 * 100) == 28  # the trap the rational path avoids

    def test_k_range_errors(self):
        with pytest.raises(ValueError):
            kept_count(10, 0.0)
        with pytest.raises(ValueError):
            kept_count(10, 100.5)


class TestSelectTokens:
    def test_seventy_of_ten_keeps_seven(self):
        r = report("s", range(10))
        mask = select_tokens(r, 70.0)
        assert sum(mask.keep) == 7
        assert mask.binary

    def test_short_response_min_one(self):
        r = report("s", [0.3, 0.9, 0.1])
        mask = select_tokens(r, 30.0)
        assert mask.keep == (0.0, 1.0, 0.0)

    def test_strict_floor_keeps_zero(self):
        r = report("s", [0.3, 0.9, 0.1])
        mask = select_tokens(r, 30.0, RankPolicy(floor_min_one=False))
        assert mask.keep == (0.0, 0.0, 0.0)

    def test_documented_example_matches_sort_oracle(self):
        scores = (5.0, 1.0, 4.0, 2.0, 3.0)
        mask = select_tokens(report("s", scores), 60.0)
        assert mask.keep == oracle_mask(scores, 60.0)
        assert {i for i, v in enumerate(mask.keep) if v} == {0, 2, 4}

    def test_fuzz_matches_oracle_including_ties(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            length = int(rng.integers(1, 64))
            scores = tuple(float(rng.choice([-1.0, 0.0, 0.5, 1.0]) ) for _ in range(length))
            k = float(rng.uniform(0.5, 100.0))
            mask = select_tokens(report("s", scores), k)
            assert mask.keep == oracle_mask(scores, k)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, derandomize=True, deadline=None)
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        length = int(rng.integers(1, 32))
        scores = tuple(float(x) for x in rng.normal(size=length))
        k1, k2 = sorted(rng.uniform(1.0, 100.0, size=2))
        kept1 = set(top_k_positions(scores, float(k1)))
        kept2 = set(top_k_positions(scores, float(k2)))
        assert kept1 <= kept2

    def test_dominance(self):
        rng = np.random.default_rng(23)
        scores = tuple(float(x) for x in rng.normal(size=20))
        mask = select_tokens(report("s", scores), 40.0)
        kept = [s for s, v in zip(scores, mask.keep) if v]
        dropped = [s for s, v in zip(scores, mask.keep) if not v]
        assert min(kept) >= max(dropped)

    def test_positive_scaling_changes_nothing(self):
        rng = np.random.default_rng(29)
        reports = [report(f"s{i}", rng.normal(size=int(rng.integers(1, 12)))) for i in range(20)]
        scaled = [
            ExcessReport(r.sample_id, tuple(3.0 * s for s in r.scores), 3.0 * r.mean_score)
            for r in reports
        ]
        assert filter_samples(reports, 8) == filter_samples(scaled, 8)
        for r, rs in zip(reports, scaled):
            assert select_tokens(r, 45.0).keep == select_tokens(rs, 45.0).keep


class TestMaskStats:
    def make_dataset(self, masks):
        records = tuple(
            MaskedRecord(f"s{i}", "", "x" * len(keep), tuple(range(len(keep))), TokenMask(f"s{i}", keep, True))
            for i, keep in enumerate(masks)
        )
        return MaskedDataset(records, DatasetMeta(70.0, len(records), "m", "t"))

    def test_single_record(self):
        stats = apply_mask_stats(self.make_dataset([(1.0,) * 7 + (0.0,) * 3]))
        assert stats.tokens_total == 10
        assert stats.tokens_kept == 7
        assert stats.keep_fraction == 0.7
        assert stats.histogram[7] == 1 and sum(stats.histogram) == 1

    def test_empty_dataset(self):
        stats = apply_mask_stats(self.make_dataset([]))
        assert stats.tokens_total == 0 and stats.tokens_kept == 0
        assert sum(stats.histogram) == 0

    def test_recount_oracle_on_seeded_dataset(self):
        rng = np.random.default_rng(31)
        masks = []
        for _ in range(100):
            length = int(rng.integers(1, 30))
            keep = tuple(float(rng.integers(0, 2)) for _ in range(length))
            if not any(keep):
                keep = (1.0,) + keep[1:]
            masks.append(keep)
        stats = apply_mask_stats(self.make_dataset(masks))
        assert stats.tokens_total == sum(len(m) for m in masks)
        assert stats.tokens_kept == sum(int(sum(m)) for m in masks)
        # decile bucketing recount with exact rational edges
        buckets = [0] * 10
        for keep in masks:
            frac = Fraction(int(sum(keep)), len(keep))
            buckets[min(9, int(frac * 10))] += 1
        assert stats.histogram == tuple(buckets)
