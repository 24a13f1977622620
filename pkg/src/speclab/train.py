"""Two-phase drafter training.

Phase one distills the target's next-token distributions into the
drafter with plain full-batch gradient descent on the cross-entropy
token loss. The phase-one result is snapshotted as a frozen reference.

Phase two samples non-overlapping groups of prefix positions from each
training sequence. For every position the current drafter and the
frozen reference each build a tree; the per-position tree rewards are
debiased against the reference, standardized within the group into
advantages, and fed to a ratio-clipped surrogate whose likelihood ratio
is length-normalized over the most acceptable branch. The tree topology,
the chosen branch, and the advantages are all treated as constants; only
the drafter's log-likelihood of the chosen branch carries gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import LinearSoftmaxDraftModel, grad_token_loss, token_loss
from .reward import RewardConfig, tree_branch_scores, tree_reward
from .tree import DraftTree, TreePolicyConfig, build_draft_tree
from .verify import greedy_rollout

LOG_FLOOR = -30.0  # per-token log-probability clamp in likelihood ratios

__all__ = [
    "LOG_FLOOR",
    "Group",
    "GroupSample",
    "TrainConfig",
    "warmup_phase1",
    "sample_groups",
    "debiased_reward",
    "standardize_group",
    "longest_accepted_sequence",
    "likelihood_ratio",
    "group_surrogate",
    "grad_group_surrogate",
    "collect_group_sample",
    "train_step",
]


@dataclass(frozen=True)
class Group:
    """A contiguous block of 1-based prefix positions within a sequence."""

    start: int
    size: int

    @property
    def indices(self) -> tuple:
        return tuple(range(self.start, self.start + self.size))


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    max_groups: int = 16
    clip_eps: float = 0.2
    std_floor: float = 1e-6
    tree_loss_weight: float = 0.5
    learning_rate: float = 0.05
    epochs: int = 3
    seed: int = 0
    reward_temp: float = 1.0
    debias: bool = True
    accepted_mode: str = "expected"  # or "greedy_lcp"
    tree: TreePolicyConfig = field(default_factory=TreePolicyConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.max_groups < 1:
            raise ValueError("max_groups must be >= 1")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")
        if self.tree_loss_weight < 0:
            raise ValueError("tree_loss_weight must be >= 0")
        if self.accepted_mode not in ("expected", "greedy_lcp"):
            raise ValueError(f"unknown accepted_mode {self.accepted_mode!r}")


@dataclass
class GroupSample:
    """Everything phase two computes for one group of prefix positions."""

    group: Group
    contexts: list
    advantages: np.ndarray
    accepted: list
    accepted_len: list
    ratios: np.ndarray
    rewards: list | None = None
    ref_rewards: list | None = None
    debiased: list | None = None
    trees: list | None = None
    ref_trees: list | None = None


def warmup_phase1(draft: LinearSoftmaxDraftModel, target, corpus, epochs: int, lr: float):
    """Distill the target into the drafter by full-batch gradient descent.

    The loss is the mean cross-entropy over every prefix context of every
    corpus sequence. Returns ``(trained_model, per_epoch_losses)`` where
    the model is a fresh object safe to keep as a frozen reference; zero
    epochs returns an untouched copy.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    model = draft.copy()
    ctxs = [tuple(seq[:i]) for seq in corpus for i in range(len(seq))]
    if not ctxs:
        raise ValueError("corpus has no contexts")
    # The target rows and the window indices never change; precompute them.
    idx = np.fromiter((model.window_index(c) for c in ctxs), dtype=np.int64, count=len(ctxs))
    t_idx = [target.window_index(c) for c in ctxs]
    p_t = target.table[t_idx] if hasattr(target, "table") else np.stack(
        [target.base_distribution(c) for c in ctxs]
    )
    losses = []
    n = len(ctxs)
    for _ in range(epochs):
        rows = model.logits[idx]
        rows = rows - rows.max(axis=1, keepdims=True)
        np.exp(rows, out=rows)
        rows /= rows.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            logq = np.log(rows)
        terms = np.where(p_t > 0.0, p_t * logq, 0.0)
        losses.append(float(-terms.sum(axis=1).mean()))
        grad = np.zeros_like(model.logits)
        np.add.at(grad, idx, (rows - p_t) / n)
        model.logits -= lr * grad
    return model, losses


def sample_groups(seq_len: int, size: int, max_groups: int, rng) -> list:
    """Uniformly place up to ``max_groups`` non-overlapping groups.

    Starts are 1-based; a group starting at ``t`` covers positions
    ``t .. t+size-1`` and consecutive starts differ by at least ``size``.
    Sequences shorter than one group yield no groups.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if max_groups < 1:
        raise ValueError("max_groups must be >= 1")
    count = min(max_groups, seq_len // size)
    if count < 1:
        return []
    # Bijection between sorted distinct picks and valid non-overlapping
    # placements: shift the k-th pick right by k*(size-1).
    span = seq_len - count * (size - 1)
    picks = np.sort(rng.choice(span, size=count, replace=False)) + 1
    return [Group(start=int(p) + k * (size - 1), size=size) for k, p in enumerate(picks)]


def debiased_reward(reward: float, ref_reward: float) -> float:
    """Reward relative to the frozen reference on the same prefix."""
    return reward - ref_reward


def standardize_group(rewards: Sequence[float], floor: float) -> np.ndarray:
    """Center and scale rewards within one group.

    Uses the population standard deviation plus ``floor``; a group of
    identical rewards maps to exact zeros.
    """
    if len(rewards) == 0:
        raise ValueError("empty group")
    if floor <= 0:
        raise ValueError("floor must be > 0")
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / (r.std() + floor)


def longest_accepted_sequence(tree: DraftTree, target, temp: float = 1.0, mode: str = "expected"):
    """The branch prefix the target is most likely to accept.

    ``expected`` mode returns the full token sequence of the branch with
    the highest expected accepted length (ties: higher confidence, then
    lexicographic). ``greedy_lcp`` mode instead matches branches against
    the greedy target rollout and returns the longest matched prefix.
    Returns ``((), 0)`` when nothing is acceptable at all.
    """
    if mode == "expected":
        scores = tree_branch_scores(target, tree, temp)
        best = min(
            zip(scores, tree.branches),
            key=lambda sb: (-sb[0].expected_len, -sb[1].confidence, sb[1].tokens),
        )
        if best[0].expected_len == 0.0:
            return (), 0
        return best[1].tokens, best[1].length
    if mode == "greedy_lcp":
        horizon = max(b.length for b in tree.branches)
        roll = greedy_rollout(target, tree.context, horizon)
        def lcp(b):
            n = 0
            for a, c in zip(b.tokens, roll):
                if a != c:
                    break
                n += 1
            return n
        best_b = min(tree.branches, key=lambda b: (-lcp(b), -b.confidence, b.tokens))
        n = lcp(best_b)
        return best_b.tokens[:n], n
    raise ValueError(f"unknown mode {mode!r}")


def _clamped_log_prob(model, ctx: tuple, seq) -> float:
    total = 0.0
    cur = tuple(ctx)
    for tok in seq:
        tok = int(tok)
        p = float(model.base_distribution(cur)[tok])
        lp = math.log(p) if p > 0.0 else float("-inf")
        total += max(lp, LOG_FLOOR)
        cur += (tok,)
    return total


def likelihood_ratio(draft, ref, ctx, seq, length: int) -> float:
    """Length-normalized likelihood ratio of the drafter to the reference.

    Per-token log-probabilities are clamped at ``LOG_FLOOR`` so zero
    reference probability cannot blow the ratio up. The empty sequence
    has ratio exactly 1.
    """
    num = _clamped_log_prob(draft, ctx, seq)
    den = _clamped_log_prob(ref, ctx, seq)
    return math.exp((num - den) / max(length, 1))


def group_surrogate(sample: GroupSample, clip_eps: float) -> float:
    """Ratio-clipped surrogate loss for one group (lower is better)."""
    s = np.asarray(sample.ratios, dtype=np.float64)
    a = np.asarray(sample.advantages, dtype=np.float64)
    clipped = np.clip(s, 1.0 - clip_eps, 1.0 + clip_eps)
    return float(-np.minimum(s * a, clipped * a).mean())


def grad_group_surrogate(draft, sample: GroupSample, clip_eps: float) -> np.ndarray:
    """Gradient of :func:`group_surrogate` with respect to the draft logits.

    Only the drafter's log-likelihood of each accepted sequence carries
    gradient; advantages, trees, and the sequences themselves are
    constants. Positions where the clipped term is selected with the
    ratio outside the clip band contribute exactly zero.
    """
    grad = np.zeros_like(draft.logits)
    m = len(sample.advantages)
    for adv, seq, length, ratio, ctx in zip(
        sample.advantages, sample.accepted, sample.accepted_len, sample.ratios, sample.contexts
    ):
        adv = float(adv)
        ratio = float(ratio)
        if adv == 0.0 or len(seq) == 0:
            continue
        saturated = (adv > 0 and ratio > 1.0 + clip_eps) or (adv < 0 and ratio < 1.0 - clip_eps)
        if saturated:
            continue
        coeff = -adv * ratio / (m * max(length, 1))
        cur = tuple(ctx)
        for tok in seq:
            tok = int(tok)
            row = draft.window_index(cur)
            p = draft.base_distribution(cur)
            grad[row] -= coeff * p
            grad[row, tok] += coeff
            cur += (tok,)
    return grad


def collect_group_sample(
    draft, ref, target, sequence, group: Group, cfg: TrainConfig, ref_reward_cache: dict | None = None
) -> GroupSample:
    """Build trees, rewards, advantages, and ratios for one group."""
    contexts = [tuple(sequence[:i]) for i in group.indices]
    trees = [build_draft_tree(draft, c, cfg.tree) for c in contexts]
    rewards = [
        tree_reward(tree_branch_scores(target, t, cfg.reward_temp), cfg.reward) for t in trees
    ]
    ref_trees = None
    if cfg.debias:
        ref_rewards = []
        for c in contexts:
            cached = None if ref_reward_cache is None else ref_reward_cache.get(c)
            if cached is None:
                rt = build_draft_tree(ref, c, cfg.tree)
                cached = tree_reward(tree_branch_scores(target, rt, cfg.reward_temp), cfg.reward)
                if ref_reward_cache is not None:
                    ref_reward_cache[c] = cached
            ref_rewards.append(cached)
        debiased = [debiased_reward(r, rr) for r, rr in zip(rewards, ref_rewards)]
    else:
        ref_rewards = None
        debiased = list(rewards)
    advantages = standardize_group(debiased, cfg.std_floor)
    accepted = []
    accepted_len = []
    for t in trees:
        seq, n = longest_accepted_sequence(t, target, cfg.reward_temp, cfg.accepted_mode)
        accepted.append(seq)
        accepted_len.append(n)
    ratios = np.array(
        [
            likelihood_ratio(draft, ref, c, seq, n)
            for c, seq, n in zip(contexts, accepted, accepted_len)
        ],
        dtype=np.float64,
    )
    return GroupSample(
        group=group,
        contexts=contexts,
        advantages=advantages,
        accepted=accepted,
        accepted_len=accepted_len,
        ratios=ratios,
        rewards=rewards,
        ref_rewards=ref_rewards,
        debiased=debiased,
        trees=trees,
        ref_trees=ref_trees,
    )


def train_step(
    draft: LinearSoftmaxDraftModel,
    ref: LinearSoftmaxDraftModel,
    target,
    sequence,
    cfg: TrainConfig,
    rng,
    ref_reward_cache: dict | None = None,
) -> dict:
    """One combined gradient step on a single training sequence.

    The update is ``token_loss + tree_loss_weight * group loss``. With
    ``tree_loss_weight == 0`` the step is exactly a token-loss step: no
    groups are sampled and the rng is left untouched. Sequences shorter
    than one group contribute token loss only.
    """
    sequence = tuple(int(t) for t in sequence)
    ctxs = [sequence[:i] for i in range(len(sequence))]
    tl = token_loss(draft, target, ctxs)
    grad = grad_token_loss(draft, target, ctxs)

    group_loss = 0.0
    abs_adv = 0.0
    mean_ratio = 1.0
    clip_frac = 0.0
    n_groups = 0
    if cfg.tree_loss_weight > 0 and len(sequence) >= cfg.group_size:
        groups = sample_groups(len(sequence), cfg.group_size, cfg.max_groups, rng)
        n_groups = len(groups)
        if groups:
            g_sum = np.zeros_like(draft.logits)
            losses = []
            advs = []
            ratios = []
            clipped = 0
            terms = 0
            for group in groups:
                sample = collect_group_sample(
                    draft, ref, target, sequence, group, cfg, ref_reward_cache
                )
                losses.append(group_surrogate(sample, cfg.clip_eps))
                g_sum += grad_group_surrogate(draft, sample, cfg.clip_eps)
                advs.extend(abs(float(a)) for a in sample.advantages)
                ratios.extend(float(r) for r in sample.ratios)
                for a, r in zip(sample.advantages, sample.ratios):
                    terms += 1
                    if (a > 0 and r > 1.0 + cfg.clip_eps) or (a < 0 and r < 1.0 - cfg.clip_eps):
                        clipped += 1
            group_loss = float(np.mean(losses))
            grad = grad + cfg.tree_loss_weight * (g_sum / len(groups))
            abs_adv = float(np.mean(advs))
            mean_ratio = float(np.mean(ratios))
            clip_frac = clipped / terms if terms else 0.0
    draft.logits -= cfg.learning_rate * grad
    draft.step += 1
    return {
        "step": draft.step,
        "token_loss": tl,
        "group_loss": group_loss,
        "mean_abs_advantage": abs_adv,
        "mean_ratio": mean_ratio,
        "clip_frac": clip_frac,
        "groups": n_groups,
    }
