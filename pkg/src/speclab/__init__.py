"""speclab: a desk-scale speculative decoding laboratory.

Small exact-arithmetic language models, draft-tree drafting policies,
sampling-free acceptance rewards, grouped policy training, and seeded
end-to-end experiments with brute-force verification oracles.
"""

from .models import (
    LinearSoftmaxDraftModel,
    TabularMarkovModel,
    grad_token_loss,
    load_model,
    next_distribution,
    sample_sequence,
    save_model,
    sequence_log_prob,
    token_loss,
)
from .tree import (
    Branch,
    DraftNode,
    DraftTree,
    TreePolicyConfig,
    build_draft_tree,
    enumerate_branches,
    format_tree,
    greedy_branch,
    tree_adjacency,
)
from .reward import (
    BranchScore,
    RewardConfig,
    branch_expected_acceptance,
    branch_weights,
    tree_branch_scores,
    tree_reward,
)
from .verify import (
    CostModel,
    DecodeMetrics,
    Rollout,
    acceptance_length,
    expected_acceptance_by_events,
    expected_acceptance_exact,
    expected_acceptance_mc,
    greedy_rollout,
    merge_decode_metrics,
    sample_rollout,
    speculative_decode,
)
from .train import (
    Group,
    GroupSample,
    TrainConfig,
    collect_group_sample,
    debiased_reward,
    grad_group_surrogate,
    group_surrogate,
    likelihood_ratio,
    longest_accepted_sequence,
    sample_groups,
    standardize_group,
    train_step,
    warmup_phase1,
)
from .lab import (
    ExperimentConfig,
    RunReport,
    config_from_dict,
    config_to_dict,
    emit_diagnostics,
    generate_corpus,
    make_world,
    mean_tau,
    run_ablation,
    run_experiment,
)

__version__ = "0.1.0"
