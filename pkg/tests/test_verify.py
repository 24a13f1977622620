import math

import numpy as np
import pytest

from speclab.models import TabularMarkovModel, sample_sequence
from speclab.reward import branch_expected_acceptance
from speclab.tree import DraftTree, TreePolicyConfig, build_draft_tree
from speclab.verify import (
    CostModel,
    acceptance_length,
    expected_acceptance_by_events,
    expected_acceptance_exact,
    expected_acceptance_mc,
    greedy_rollout,
    merge_decode_metrics,
    sample_rollout,
    speculative_decode,
)


def cycle_model(vocab: int) -> TabularMarkovModel:
    # deterministic t -> t+1 mod V
    table = np.zeros((vocab, vocab))
    for t in range(vocab):
        table[t, (t + 1) % vocab] = 1.0
    return TabularMarkovModel(vocab, 1, table)


def random_world(rng, vocab=3, order=1, alpha=0.7) -> TabularMarkovModel:
    return TabularMarkovModel(vocab, order, rng.dirichlet(np.full(vocab, alpha), size=vocab**order))


class TestRollouts:
    def test_greedy_follows_one_hot_chain(self):
        assert greedy_rollout(cycle_model(3), (0,), 5) == (1, 2, 0, 1, 2)

    def test_uniform_ties_give_all_zeros(self):
        target = TabularMarkovModel(2, 1, [[0.5, 0.5]] * 2)
        assert greedy_rollout(target, (1,), 4) == (0, 0, 0, 0)

    def test_greedy_matches_temp_zero_sampler(self):
        rng = np.random.default_rng(89)
        target = random_world(rng, vocab=4)
        for _ in range(10):
            ctx = tuple(rng.integers(0, 4, size=2))
            assert greedy_rollout(target, ctx, 6) == sample_sequence(target, ctx, 6, 0.0, rng)

    def test_sample_rollout_log_prob(self):
        target = TabularMarkovModel(2, 1, [[0.25, 0.75]] * 2)
        roll = sample_rollout(target, (0,), 3, 1.0, np.random.default_rng(97))
        want = sum(math.log(0.25 if t == 0 else 0.75) for t in roll.tokens)
        assert roll.log_prob == pytest.approx(want, abs=1e-12)
        assert len(roll.tokens) == 3

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            greedy_rollout(cycle_model(2), (), 0)


class TestAcceptanceLength:
    def test_full_match(self):
        tree = DraftTree.from_branches((), [(1, 2, 0)])
        assert acceptance_length(tree, (1, 2, 0)) == 3

    def test_immediate_mismatch(self):
        tree = DraftTree.from_branches((), [(1, 2), (1, 0)])
        assert acceptance_length(tree, (2, 1)) == 0

    def test_best_branch_wins(self):
        # branches AB, AC against rollout ACD: the AC branch matches twice
        tree = DraftTree.from_branches((), [(0, 1), (0, 2)])
        assert acceptance_length(tree, (0, 2, 3)) == 2

    def test_short_rollout_rejected(self):
        tree = DraftTree.from_branches((), [(0, 1, 2)])
        with pytest.raises(ValueError):
            acceptance_length(tree, (0, 1))


class TestExpectedAcceptanceExact:
    def test_total_coverage_returns_depth(self):
        rng = np.random.default_rng(101)
        target = random_world(rng, vocab=2)
        tree = DraftTree.from_branches((0,), [(a, b) for a in range(2) for b in range(2)])
        assert expected_acceptance_exact(target, (0,), tree, 1.0) == pytest.approx(2.0, abs=1e-12)

    def test_single_branch_reduces_to_branch_expectation(self):
        rng = np.random.default_rng(103)
        for _ in range(20):
            target = random_world(rng, vocab=3)
            branch = tuple(rng.integers(0, 3, size=int(rng.integers(1, 5))))
            tree = DraftTree.from_branches((1,), [branch])
            want = branch_expected_acceptance(target, (1,), branch, 1.0).expected_len
            got = expected_acceptance_exact(target, (1,), tree, 1.0)
            assert got == pytest.approx(want, abs=1e-12)

    def test_uniform_two_branch_half(self):
        # V=2 uniform, branches {(0,0),(0,1)}: first token matches w.p. 0.5,
        # and then the second always matches one of the two leaves -> E = 1.0
        target = TabularMarkovModel(2, 1, [[0.5, 0.5]] * 2)
        tree = DraftTree.from_branches((0,), [(0, 0), (0, 1)])
        assert expected_acceptance_exact(target, (0,), tree, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_temp_zero_uses_the_greedy_rollout(self):
        target = cycle_model(4)
        tree = DraftTree.from_branches((0,), [(1, 2, 3), (1, 0)])
        assert expected_acceptance_exact(target, (0,), tree, 0.0) == 3.0
        tree2 = DraftTree.from_branches((0,), [(2, 2)])
        assert expected_acceptance_exact(target, (0,), tree2, 0.0) == 0.0

    def test_capacity_guard(self):
        target = TabularMarkovModel(3, 1, np.full((3, 3), 1.0 / 3))
        tree = DraftTree.from_branches((0,), [tuple([0] * 13)])  # 3**13 > 2**20
        with pytest.raises(ValueError):
            expected_acceptance_exact(target, (0,), tree, 1.0)

    def test_event_decomposition_agrees(self):
        rng = np.random.default_rng(107)
        for _ in range(30):
            vocab = int(rng.integers(2, 5))
            order = int(rng.integers(1, 3))
            target = TabularMarkovModel(
                vocab, order, rng.dirichlet(np.full(vocab, 0.6), size=vocab**order)
            )
            draft = TabularMarkovModel(vocab, 1, rng.dirichlet(np.full(vocab, 0.6), size=vocab))
            cfg = TreePolicyConfig(
                depth=int(rng.integers(1, 4)),
                layer_topk=int(rng.integers(1, 4)),
                leaf_budget=int(rng.integers(1, 5)),
                token_budget=None,
            )
            ctx = tuple(rng.integers(0, vocab, size=2))
            tree = build_draft_tree(draft, ctx, cfg)
            temp = float(rng.choice([0.7, 1.0, 1.3]))
            a = expected_acceptance_exact(target, ctx, tree, temp)
            b = expected_acceptance_by_events(target, ctx, tree, temp)
            assert a == pytest.approx(b, abs=1e-10)

    def test_event_decomposition_at_temp_zero(self):
        rng = np.random.default_rng(109)
        for _ in range(10):
            target = random_world(rng, vocab=3)
            draft = random_world(rng, vocab=3)
            tree = build_draft_tree(draft, (0,), TreePolicyConfig(3, 2, 3, None))
            a = expected_acceptance_exact(target, (0,), tree, 0.0)
            b = expected_acceptance_by_events(target, (0,), tree, 0.0)
            assert a == pytest.approx(b, abs=1e-12)

    def test_union_dominates_every_branch(self):
        rng = np.random.default_rng(113)
        for _ in range(20):
            target = random_world(rng, vocab=3)
            draft = random_world(rng, vocab=3)
            tree = build_draft_tree(draft, (1,), TreePolicyConfig(3, 3, 4, None))
            e = expected_acceptance_exact(target, (1,), tree, 1.0)
            for b in tree.branches:
                li = branch_expected_acceptance(target, (1,), b.tokens, 1.0).expected_len
                assert e >= li - 1e-12


class TestExpectedAcceptanceMC:
    def test_matches_exact_within_three_se(self):
        rng = np.random.default_rng(127)
        hits = 0
        for _ in range(10):
            target = random_world(rng, vocab=3)
            draft = random_world(rng, vocab=3)
            tree = build_draft_tree(draft, (2,), TreePolicyConfig(3, 2, 3, None))
            exact = expected_acceptance_exact(target, (2,), tree, 1.0)
            mean, se = expected_acceptance_mc(target, (2,), tree, 1.0, 4000, rng)
            if abs(mean - exact) < 3 * max(se, 1e-9):
                hits += 1
        assert hits >= 9  # one 3-sigma miss tolerated

    def test_one_hot_world_gives_zero_error(self):
        target = cycle_model(3)
        tree = DraftTree.from_branches((0,), [(1, 2, 0)])
        mean, se = expected_acceptance_mc(target, (0,), tree, 1.0, 50, np.random.default_rng(131))
        assert mean == 3.0 and se == 0.0

    def test_single_sample_is_reproducible(self):
        rng = np.random.default_rng
        target = TabularMarkovModel(2, 1, [[0.5, 0.5]] * 2)
        tree = DraftTree.from_branches((0,), [(0, 0)])
        a = expected_acceptance_mc(target, (0,), tree, 1.0, 1, rng(137))
        b = expected_acceptance_mc(target, (0,), tree, 1.0, 1, rng(137))
        assert a == b and a[1] == 0.0

    def test_argument_validation(self):
        target = TabularMarkovModel(2, 1, [[0.5, 0.5]] * 2)
        tree = DraftTree.from_branches((0,), [(0,)])
        with pytest.raises(ValueError):
            expected_acceptance_mc(target, (0,), tree, 0.0, 10, np.random.default_rng(0))
        with pytest.raises(ValueError):
            expected_acceptance_mc(target, (0,), tree, 1.0, 0, np.random.default_rng(0))


class TestSpeculativeDecode:
    def test_perfect_drafter_hits_the_ceiling(self):
        world = cycle_model(4)
        cfg = TreePolicyConfig(3, 1, 1, None)
        tokens, m = speculative_decode(world, world, (0,), 12, cfg, 0.0)
        assert tokens == [1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0]
        assert m.tau == 4.0 and m.cycles == 3
        assert m.per_cycle_accepts == {4: 3}
        assert m.greedy_accept_match_frac == 1.0 and m.greedy_pruned_frac == 0.0

    def test_adversarial_drafter_bonus_only(self):
        target = cycle_model(3)  # argmax chain t -> t+1
        stuck = np.zeros((3, 3))
        for t in range(3):
            stuck[t, (t + 2) % 3] = 1.0  # draft proposes t+2, never the target's t+1
        draft = TabularMarkovModel(3, 1, stuck)
        cfg = TreePolicyConfig(3, 1, 1, None)
        tokens, m = speculative_decode(target, draft, (0,), 8, cfg, 0.0, CostModel(1.0, 0.05))
        assert m.tau == 1.0
        assert m.speedup_proxy == pytest.approx(1.0 / 1.15, abs=1e-12)
        assert m.speedup_proxy < 1.0
        assert tokens == [1, 2, 0, 1, 2, 0, 1, 2]  # still the target's chain

    def test_temp_zero_output_is_greedy_target_continuation(self):
        rng = np.random.default_rng(139)
        for _ in range(10):
            target = random_world(rng, vocab=4, order=2)
            draft = random_world(rng, vocab=4)
            cfg = TreePolicyConfig(3, 2, 3, None)
            prompt = tuple(rng.integers(0, 4, size=3))
            tokens, _ = speculative_decode(target, draft, prompt, 30, cfg, 0.0)
            want = sample_sequence(target, prompt, 30, 0.0, rng)
            assert tuple(tokens) == want

    def test_sampled_decode_is_reproducible(self):
        rng = np.random.default_rng(149)
        target = random_world(rng, vocab=3)
        draft = random_world(rng, vocab=3)
        cfg = TreePolicyConfig(2, 2, 2, None)
        a, ma = speculative_decode(target, draft, (0,), 40, cfg, 1.0, rng=np.random.default_rng(7))
        b, mb = speculative_decode(target, draft, (0,), 40, cfg, 1.0, rng=np.random.default_rng(7))
        assert a == b
        assert ma.to_json_dict() == mb.to_json_dict()

    def test_exact_token_count_and_histogram_balance(self):
        rng = np.random.default_rng(151)
        for _ in range(10):
            target = random_world(rng, vocab=3)
            draft = random_world(rng, vocab=3)
            cfg = TreePolicyConfig(2, 2, 2, None)
            n = int(rng.integers(5, 60))
            tokens, m = speculative_decode(target, draft, (1,), n, cfg, 1.0, rng=rng)
            assert len(tokens) == n and m.total_tokens == n
            assert sum(k * v for k, v in m.per_cycle_accepts.items()) == n
            assert sum(m.per_cycle_accepts.values()) == m.cycles
            assert 1.0 <= m.tau <= cfg.depth + 1
            assert 0.0 <= m.greedy_pruned_frac <= 1.0
            assert 0.0 <= m.greedy_accept_match_frac <= 1.0

    def test_mean_cycle_accepts_tracks_the_exact_oracle(self):
        # iid world: every context sees the same tree and the same accept law
        rows = np.tile([0.55, 0.3, 0.15], (3, 1))
        target = TabularMarkovModel(3, 1, rows)
        draft_rows = np.tile([0.5, 0.25, 0.25], (3, 1))
        draft = TabularMarkovModel(3, 1, draft_rows)
        cfg = TreePolicyConfig(2, 2, 2, None)
        tree = build_draft_tree(draft, (0,), cfg)
        exact = expected_acceptance_exact(target, (0,), tree, 1.0)
        tokens, m = speculative_decode(target, draft, (0,), 3000, cfg, 1.0, rng=np.random.default_rng(157))
        accepts = np.array([k for k, v in m.per_cycle_accepts.items() for _ in range(v)], dtype=float)
        se = accepts.std(ddof=1) / math.sqrt(len(accepts))
        slack = (cfg.depth + 1) / m.cycles  # final truncated cycle
        assert abs(m.tau - (exact + 1.0)) < 3 * se + slack

    def test_argument_validation(self):
        world = cycle_model(2)
        cfg = TreePolicyConfig(2, 1, 1, None)
        with pytest.raises(ValueError):
            speculative_decode(world, world, (0,), 0, cfg, 0.0)
        with pytest.raises(ValueError):
            speculative_decode(world, world, (0,), 5, cfg, 1.0, rng=None)

    def test_metrics_json_schema(self):
        world = cycle_model(3)
        _, m = speculative_decode(world, world, (0,), 8, TreePolicyConfig(3, 1, 1, None), 0.0)
        d = m.to_json_dict()
        assert sorted(d) == [
            "cycles",
            "greedy_accept_match_frac",
            "greedy_pruned_frac",
            "per_cycle_histogram",
            "speedup_proxy",
            "tau",
            "total_tokens",
        ]
        assert all(isinstance(k, str) for k in d["per_cycle_histogram"])


class TestMergeMetrics:
    def test_single_part_identity(self):
        world = cycle_model(3)
        _, m = speculative_decode(world, world, (0,), 8, TreePolicyConfig(3, 1, 1, None), 0.0)
        merged = merge_decode_metrics([m])
        assert merged.to_json_dict() == m.to_json_dict()

    def test_pooling_two_runs(self):
        world = cycle_model(4)
        cfg = TreePolicyConfig(3, 1, 1, None)
        _, a = speculative_decode(world, world, (0,), 12, cfg, 0.0)
        _, b = speculative_decode(world, world, (1,), 8, cfg, 0.0)
        merged = merge_decode_metrics([a, b])
        assert merged.total_tokens == 20
        assert merged.cycles == a.cycles + b.cycles
        assert merged.tau == pytest.approx(20 / merged.cycles, abs=1e-12)
        want_speedup = 20 * 1.0 / (a.total_cost + b.total_cost)
        assert merged.speedup_proxy == pytest.approx(want_speedup, abs=1e-12)
        hist = merged.per_cycle_accepts
        assert sum(k * v for k, v in hist.items()) == 20

    def test_empty_merge_rejected(self):
        with pytest.raises(ValueError):
            merge_decode_metrics([])


class TestCostModel:
    def test_validation(self):
        with pytest.raises(ValueError):
            CostModel(0.0, 0.05)
        with pytest.raises(ValueError):
            CostModel(1.0, -0.1)
        CostModel(1.0, 0.0)  # free drafts allowed
