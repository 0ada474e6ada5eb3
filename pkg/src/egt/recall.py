"""Baseline-relative recall of a compressed decoding pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import CostModel, DecodeResult, decode
from .model import BOS, N_RESERVED, ModelConfig, ToyTransformer
from .trie import PrefixTrie


@dataclass
class RecallReport:
    overlaps: list[int]
    ks: list[int]
    recall: float

    def per_query(self) -> list[float]:
        return [o / k if k else 1.0 for o, k in zip(self.overlaps, self.ks)]


def make_queries(config: ModelConfig, n_queries: int, length: int, seed: int) -> list[list[int]]:
    """Seeded prompts: BOS followed by ``length - 1`` ordinary tokens."""
    rng = np.random.default_rng([seed, 0x51])
    body = rng.integers(N_RESERVED, config.vocab_size, size=(n_queries, max(length - 1, 0)))
    return [[BOS, *map(int, row)] for row in body]


def recall_report(baseline: Sequence[DecodeResult], candidate: Sequence[DecodeResult], k: int) -> RecallReport:
    """Mean fraction of the baseline's top-``k`` leaves that the candidate also returns.

    When the trie has fewer than ``k`` leaves the baseline list is shorter and
    ``k`` shrinks to its length.
    """
    if len(baseline) != len(candidate):
        raise ValueError("baseline and candidate cover different query sets")
    overlaps, ks = [], []
    for base, cand in zip(baseline, candidate):
        top_b = {h.leaf for h in base.hypotheses[:k]}
        top_c = {h.leaf for h in cand.hypotheses[:k]}
        overlaps.append(len(top_b & top_c))
        ks.append(len(top_b))
    per = [o / kk if kk else 1.0 for o, kk in zip(overlaps, ks)]
    return RecallReport(overlaps, ks, float(np.mean(per)) if per else 1.0)


def decode_queries(model: ToyTransformer, trie: PrefixTrie, queries, beam_size: int, mode: str,
                   cost_model: CostModel | None = None) -> list[DecodeResult]:
    return [decode(model, trie, q, beam_size, mode, cost_model) for q in queries]
