"""Acceptance-length verification and the speculative decode loop.

Acceptance is rollout matching: the target decodes a single rollout at
the chosen temperature and the accepted length is the longest common
prefix between that rollout and any tree branch. The expected accepted
length can be computed three ways: exhaustive rollout enumeration,
an event decomposition (sum over depths of the probability that at
least that many tokens are accepted), and Monte Carlo.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import next_distribution
from .tree import DraftTree, TreePolicyConfig, build_draft_tree, greedy_branch

ENUMERATION_LIMIT = 2**20

__all__ = [
    "ENUMERATION_LIMIT",
    "Rollout",
    "CostModel",
    "DecodeMetrics",
    "greedy_rollout",
    "sample_rollout",
    "acceptance_length",
    "expected_acceptance_exact",
    "expected_acceptance_by_events",
    "expected_acceptance_mc",
    "speculative_decode",
    "merge_decode_metrics",
]


@dataclass(frozen=True)
class Rollout:
    tokens: tuple
    log_prob: float


@dataclass(frozen=True)
class CostModel:
    """Relative cost of one target pass and one draft tree layer."""

    target_pass_cost: float = 1.0
    draft_pass_cost: float = 0.05

    def __post_init__(self):
        if not self.target_pass_cost > 0:
            raise ValueError("target_pass_cost must be > 0")
        if self.draft_pass_cost < 0:
            raise ValueError("draft_pass_cost must be >= 0")


@dataclass
class DecodeMetrics:
    tau: float
    cycles: int
    total_tokens: int
    speedup_proxy: float
    per_cycle_accepts: dict
    greedy_pruned_frac: float
    greedy_accept_match_frac: float
    lcp_tie_cycles: int = 0
    total_cost: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "tau": self.tau,
            "cycles": self.cycles,
            "total_tokens": self.total_tokens,
            "speedup_proxy": self.speedup_proxy,
            "greedy_pruned_frac": self.greedy_pruned_frac,
            "greedy_accept_match_frac": self.greedy_accept_match_frac,
            "per_cycle_histogram": {str(k): self.per_cycle_accepts[k] for k in sorted(self.per_cycle_accepts)},
        }


def greedy_rollout(target, ctx: Sequence[int], depth: int) -> tuple:
    """Deterministic argmax chain of the target (lowest token id on ties)."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    out = []
    cur = tuple(ctx)
    for _ in range(depth):
        tok = int(np.argmax(target.base_distribution(cur)))
        out.append(tok)
        cur += (tok,)
    return tuple(out)


def sample_rollout(target, ctx: Sequence[int], depth: int, temp: float, rng) -> Rollout:
    """Draw one target rollout and record its joint log-probability."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    out = []
    log_prob = 0.0
    cur = tuple(ctx)
    for _ in range(depth):
        dist = next_distribution(target, cur, temp)
        if temp == 0:
            tok = int(np.argmax(dist))
        else:
            tok = int(rng.choice(target.vocab_size, p=dist))
        log_prob += math.log(float(dist[tok]))
        out.append(tok)
        cur += (tok,)
    return Rollout(tuple(out), log_prob)


def _lcp(branch_tokens: tuple, rollout: Sequence[int]) -> int:
    n = 0
    for a, b in zip(branch_tokens, rollout):
        if a != int(b):
            break
        n += 1
    return n


def acceptance_length(tree: DraftTree, rollout: Sequence[int]) -> int:
    """Longest common prefix between the rollout and any branch."""
    horizon = max(b.length for b in tree.branches)
    if len(rollout) < horizon:
        raise ValueError(f"rollout length {len(rollout)} < max branch length {horizon}")
    return max(_lcp(b.tokens, rollout) for b in tree.branches)


def _dist_cache(target, ctx: tuple, temp: float):
    cache: dict = {}

    def dist(prefix: tuple) -> np.ndarray:
        key = target.window_index(ctx + prefix)
        d = cache.get(key)
        if d is None:
            d = next_distribution(target, ctx + prefix, temp)
            cache[key] = d
        return d

    return dist


def expected_acceptance_exact(target, ctx: Sequence[int], tree: DraftTree, temp: float = 1.0) -> float:
    """Expected accepted length by exhaustive rollout enumeration.

    At temperature 0 the single greedy rollout decides the value.
    Raises when the rollout space exceeds ``ENUMERATION_LIMIT``.
    """
    ctx = tuple(ctx)
    horizon = max(b.length for b in tree.branches)
    if temp == 0:
        return float(acceptance_length(tree, greedy_rollout(target, ctx, horizon)))
    vocab = target.vocab_size
    if vocab**horizon > ENUMERATION_LIMIT:
        raise ValueError(
            f"enumeration of {vocab}**{horizon} rollouts exceeds limit {ENUMERATION_LIMIT}"
        )
    dist = _dist_cache(target, ctx, temp)
    total = 0.0
    for seq in itertools.product(range(vocab), repeat=horizon):
        p = 1.0
        prefix = ()
        for tok in seq:
            p *= float(dist(prefix)[tok])
            if p == 0.0:
                break
            prefix += (tok,)
        if p > 0.0:
            total += p * acceptance_length(tree, seq)
    return total


def expected_acceptance_by_events(target, ctx: Sequence[int], tree: DraftTree, temp: float = 1.0) -> float:
    """Expected accepted length via the acceptance-event decomposition.

    The expectation equals the sum over depths ``j`` of the probability
    that at least ``j`` tokens are accepted, i.e. that the rollout
    matches the first ``j`` tokens of some branch. Distinct length-``j``
    prefixes are mutually exclusive events, so each depth contributes
    the sum of its distinct prefix probabilities. Linear in total branch
    length, unlike exhaustive enumeration.
    """
    ctx = tuple(ctx)
    horizon = max(b.length for b in tree.branches)
    dist = _dist_cache(target, ctx, temp)
    prefix_prob: dict = {(): 1.0}
    total = 0.0
    for j in range(1, horizon + 1):
        level = {b.tokens[:j] for b in tree.branches if b.length >= j}
        for pre in sorted(level):
            parent = pre[:-1]
            q = prefix_prob.get(parent)
            if q is None:
                q = 1.0
                for i, tok in enumerate(parent):
                    q *= float(dist(parent[:i])[tok])
            q *= float(dist(parent)[pre[-1]])
            prefix_prob[pre] = q
            total += q
    return total


def expected_acceptance_mc(
    target, ctx: Sequence[int], tree: DraftTree, temp: float, n_samples: int, rng
) -> tuple:
    """Monte-Carlo mean accepted length and its standard error."""
    if temp <= 0:
        raise ValueError("Monte-Carlo estimation needs temp > 0")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    horizon = max(b.length for b in tree.branches)
    vals = np.empty(n_samples, dtype=np.float64)
    for i in range(n_samples):
        roll = sample_rollout(target, ctx, horizon, temp, rng)
        vals[i] = acceptance_length(tree, roll.tokens)
    se = 0.0 if n_samples == 1 else float(vals.std(ddof=1) / math.sqrt(n_samples))
    return float(vals.mean()), se


def speculative_decode(
    target,
    draft,
    prompt: Sequence[int],
    max_tokens: int,
    policy_cfg: TreePolicyConfig,
    temp: float = 0.0,
    cost: CostModel = CostModel(),
    rng=None,
) -> tuple:
    """Generate ``max_tokens`` tokens with draft trees verified by the target.

    Each cycle builds a draft tree, draws one target rollout one step
    past the tree depth, accepts the longest branch prefix matching the
    rollout, and appends one bonus token from the same rollout. At
    temperature 0 the output is token-identical to greedy target
    decoding; at higher temperatures every emitted token comes from a
    single target rollout, so the output distribution is the target's.

    Returns ``(tokens, DecodeMetrics)``.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if temp > 0 and rng is None:
        raise ValueError("sampling temperatures require an rng")
    prompt = tuple(int(t) for t in prompt)
    generated: list = []
    hist: Counter = Counter()
    pruned = 0
    matched = 0
    ties = 0
    cycles = 0
    total_cost = 0.0
    horizon = policy_cfg.depth + 1
    while len(generated) < max_tokens:
        ctx = prompt + tuple(generated)
        tre = build_draft_tree(draft, ctx, policy_cfg)
        if temp == 0:
            roll = greedy_rollout(target, ctx, horizon)
        else:
            roll = sample_rollout(target, ctx, horizon, temp, rng).tokens
        best = 0
        tying = 0
        for b in tre.branches:
            l = _lcp(b.tokens, roll)
            if l > best:
                best, tying = l, 1
            elif l == best and l > 0:
                tying += 1
        if best > 0 and tying > 1:
            ties += 1
        emit = min(best + 1, max_tokens - len(generated))
        generated.extend(roll[:emit])
        cycles += 1
        hist[emit] += 1
        gb = greedy_branch(tre)
        if gb is None:
            pruned += 1
        elif tre.branches[gb].tokens == roll[:best]:
            matched += 1
        total_cost += cost.target_pass_cost + policy_cfg.depth * cost.draft_pass_cost
    total = len(generated)
    metrics = DecodeMetrics(
        tau=total / cycles,
        cycles=cycles,
        total_tokens=total,
        speedup_proxy=total * cost.target_pass_cost / total_cost,
        per_cycle_accepts=dict(hist),
        greedy_pruned_frac=pruned / cycles,
        greedy_accept_match_frac=matched / cycles,
        lcp_tie_cycles=ties,
        total_cost=total_cost,
    )
    return generated, metrics


def merge_decode_metrics(parts: Sequence[DecodeMetrics]) -> DecodeMetrics:
    """Pool metrics from several runs that share one cost structure."""
    if len(parts) == 0:
        raise ValueError("nothing to merge")
    cycles = sum(p.cycles for p in parts)
    total = sum(p.total_tokens for p in parts)
    cost = sum(p.total_cost for p in parts)
    hist: Counter = Counter()
    for p in parts:
        hist.update(p.per_cycle_accepts)
    # Recover the target pass cost from any part: speedup = tokens * c_T / cost.
    c_t = parts[0].speedup_proxy * parts[0].total_cost / parts[0].total_tokens
    return DecodeMetrics(
        tau=total / cycles,
        cycles=cycles,
        total_tokens=total,
        speedup_proxy=total * c_t / cost,
        per_cycle_accepts=dict(hist),
        greedy_pruned_frac=sum(p.greedy_pruned_frac * p.cycles for p in parts) / cycles,
        greedy_accept_match_frac=sum(p.greedy_accept_match_frac * p.cycles for p in parts) / cycles,
        lcp_tie_cycles=sum(p.lcp_tie_cycles for p in parts),
        total_cost=cost,
    )
