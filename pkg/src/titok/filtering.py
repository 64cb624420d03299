"""Two-stage selection: top-M samples by mean excess, then top-k% tokens each.

Both stages rank descending by score with a total tie-break (earlier
position or input order wins), so results are deterministic and the kept
set at a smaller k is always a subset of the kept set at a larger k.
Kept-count arithmetic runs on exact rationals: floor(k/100 * L) never
drifts across platforms from float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .datamodel import ExcessReport, MaskedDataset, TokenMask, ensure_unique_ids


@dataclass(frozen=True)
class RankPolicy:
    """Ranking semantics shared by both selection stages.

    Order is fixed descending-by-score; ties break by ascending position
    (or input order), which makes the comparison total. floor_min_one keeps
    at least one token per sample even when floor(k/100 * L) is zero;
    switching it off gives strict floor arithmetic, where short responses
    can end up with an empty mask and are then dropped from the dataset.
    """

    floor_min_one: bool = True


def kept_count(length: int, k_percent: float, floor_min_one: bool = True) -> int:
    """Number of tokens kept for a response of `length` tokens at k percent."""
    if not (0 < k_percent <= 100):
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    if length <= 0:
        raise ValueError("length must be positive")
    n = math.floor(Fraction(k_percent) * length / 100)
    if floor_min_one:
        n = max(1, n)
    return n


def top_k_positions(scores: Sequence[float], k_percent: float, floor_min_one: bool = True) -> list[int]:
    """Positions of the top-k% scores, descending score then ascending position."""
    n = kept_count(len(scores), k_percent, floor_min_one)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:n]


def select_tokens(report: ExcessReport, k_percent: float, policy: RankPolicy = RankPolicy()) -> TokenMask:
    """Binary mask keeping the top-k% tokens of one sample by excess score."""
    if not report.scores:
        raise ValueError(f"sample {report.sample_id!r} has no scores")
    kept = set(top_k_positions(report.scores, k_percent, policy.floor_min_one))
    keep = tuple(1.0 if i in kept else 0.0 for i in range(len(report.scores)))
    return TokenMask(sample_id=report.sample_id, keep=keep, binary=True)


def filter_samples(reports: Sequence[ExcessReport], keep_m: int) -> list[str]:
    """Ids of the keep_m samples with the largest mean excess.

    Ties break by input order (earlier wins); output is sorted by
    descending mean score, then input order.
    """
    if keep_m <= 0:
        raise ValueError("keep_m must be positive")
    if keep_m > len(reports):
        raise ValueError(f"keep_m ({keep_m}) exceeds number of samples ({len(reports)})")
    ensure_unique_ids(r.sample_id for r in reports)
    order = sorted(range(len(reports)), key=lambda j: (-reports[j].mean_score, j))
    return [reports[j].sample_id for j in order[:keep_m]]


@dataclass(frozen=True)
class MaskStats:
    """Exact keep counts plus a decile histogram of per-sample keep fractions."""

    tokens_total: int
    tokens_kept: int
    histogram: tuple[int, ...]  # 10 buckets: [0,.1), [.1,.2), ..., [.9,1.0]

    @property
    def keep_fraction(self) -> float:
        return self.tokens_kept / self.tokens_total if self.tokens_total else 0.0


def apply_mask_stats(dataset: MaskedDataset) -> MaskStats:
    """Count kept/total tokens and bucket per-sample keep fractions by decile."""
    buckets = [0] * 10
    total = 0
    kept = 0
    for record in dataset.records:
        length = len(record.mask.keep)
        n_kept = sum(1 for v in record.mask.keep if v > 0)
        total += length
        kept += n_kept
        if length:
            buckets[min(9, (10 * n_kept) // length)] += 1
    return MaskStats(tokens_total=total, tokens_kept=kept, histogram=tuple(buckets))
