"""Sampling-free tree rewards.

For each branch, the expected accepted length under the target model is
the sum of chained prefix-match probabilities. A tree's reward
aggregates per-branch expectations with a smooth maximum
(log-sum-exp at a configurable sharpness) or, for ablations, a hard max
or a plain mean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import next_distribution

AGGREGATORS = ("lse", "max", "sum_avg")

__all__ = [
    "AGGREGATORS",
    "RewardConfig",
    "BranchScore",
    "branch_expected_acceptance",
    "tree_branch_scores",
    "tree_reward",
    "branch_weights",
]


@dataclass(frozen=True)
class RewardConfig:
    sharpness: float = 1.0
    aggregator: str = "lse"

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.aggregator == "lse" and not self.sharpness > 0:
            raise ValueError("sharpness must be > 0 for the lse aggregator")


@dataclass(frozen=True)
class BranchScore:
    index: int
    expected_len: float
    chain: tuple  # chain[j] = P(first j+1 branch tokens all accepted)


def branch_expected_acceptance(
    target, ctx: Sequence[int], branch: Sequence[int], temp: float = 1.0, index: int = 0
) -> BranchScore:
    """Expected accepted prefix length of one branch under the target.

    ``chain[j]`` is the probability that the target, decoding at
    ``temp``, matches the branch on its first ``j+1`` tokens; the
    expectation is the sum of the chain.
    """
    branch = tuple(int(t) for t in branch)
    if not branch:
        raise ValueError("branch must be nonempty")
    chain = []
    acc = 1.0
    cur = tuple(ctx)
    for pos, tok in enumerate(branch):
        if not 0 <= tok < target.vocab_size:
            raise ValueError(f"token id {tok} outside vocabulary of size {target.vocab_size}")
        acc *= float(next_distribution(target, cur, temp)[tok])
        if acc == 0.0:
            chain.extend([0.0] * (len(branch) - pos))
            break
        chain.append(acc)
        cur += (tok,)
    return BranchScore(index=index, expected_len=float(math.fsum(chain)), chain=tuple(chain))


def tree_branch_scores(target, tree, temp: float = 1.0) -> list:
    """Per-branch scores for a draft tree, aligned with ``tree.branches``."""
    return [
        branch_expected_acceptance(target, tree.context, b.tokens, temp, index=i)
        for i, b in enumerate(tree.branches)
    ]


def tree_reward(scores: Sequence[BranchScore], cfg: RewardConfig) -> float:
    """Aggregate per-branch expected lengths into a scalar tree reward."""
    if len(scores) == 0:
        raise ValueError("tree_reward needs at least one branch score")
    lens = np.array([s.expected_len for s in scores], dtype=np.float64)
    if cfg.aggregator == "lse":
        m = lens.max()
        return float(m + math.log(np.exp(cfg.sharpness * (lens - m)).sum()) / cfg.sharpness)
    if cfg.aggregator == "max":
        return float(lens.max())
    return float(lens.mean())  # sum_avg


def branch_weights(scores: Sequence[BranchScore], cfg: RewardConfig) -> np.ndarray:
    """Gradient of the lse reward with respect to each branch expectation.

    The weights form a softmax over ``sharpness * expected_len`` and sum
    to 1.
    """
    if cfg.aggregator != "lse":
        raise ValueError("branch_weights is defined for the lse aggregator only")
    if len(scores) == 0:
        raise ValueError("branch_weights needs at least one branch score")
    lens = np.array([s.expected_len for s in scores], dtype=np.float64)
    z = cfg.sharpness * lens
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()
