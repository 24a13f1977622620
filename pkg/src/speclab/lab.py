"""Seeded end-to-end experiments.

A world is a random tabular Markov target. One experiment samples a
corpus from it, distills a drafter (phase one), snapshots the frozen
reference, runs grouped tree-reward training (phase two), and evaluates
both models with speculative decoding on held-out prompts at each
configured temperature. Identical configs produce byte-identical report
JSON.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .models import LinearSoftmaxDraftModel, TabularMarkovModel, sample_sequence
from .reward import RewardConfig
from .train import TrainConfig, train_step, warmup_phase1
from .tree import TreePolicyConfig
from .verify import CostModel, merge_decode_metrics, speculative_decode

ABLATION_AXES = {
    "aggregator": ("lse", "max", "sum_avg"),
    "group_size": (1, 4, 8, 16, 32),
    "debias": (True, False),
}

__all__ = [
    "ABLATION_AXES",
    "ExperimentConfig",
    "RunReport",
    "make_world",
    "generate_corpus",
    "run_experiment",
    "mean_tau",
    "run_ablation",
    "ablation_csv",
    "emit_diagnostics",
    "config_to_dict",
    "config_from_dict",
]


@dataclass(frozen=True)
class ExperimentConfig:
    world_seed: int = 0
    vocab_size: int = 16
    target_order: int = 2
    draft_order: int = 1
    concentration: float = 0.25
    corpus_size: int = 32
    seq_len: int = 64
    phase1_epochs: int = 300
    phase1_lr: float = 8.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30,
        learning_rate=0.06,
        tree=TreePolicyConfig(depth=4, layer_topk=3, leaf_budget=8, token_budget=12),
    ))
    eval_temps: tuple = (0.0, 1.0)
    eval_prompts: int = 8
    prompt_len: int = 8
    eval_max_tokens: int = 192
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if self.target_order < 1:
            raise ValueError("target_order must be >= 1")
        if self.draft_order < 0:
            raise ValueError("draft_order must be >= 0")
        if self.corpus_size < 1 or self.seq_len < 1:
            raise ValueError("corpus_size and seq_len must be >= 1")
        if self.eval_prompts < 1 or self.prompt_len < 1 or self.eval_max_tokens < 1:
            raise ValueError("evaluation sizes must be >= 1")
        if any(t < 0 for t in self.eval_temps) or len(self.eval_temps) == 0:
            raise ValueError("eval_temps must be nonempty and nonnegative")


@dataclass
class RunReport:
    config: dict
    phase1_losses: list
    phase2_log: list
    metrics: dict  # model name -> temp key -> decode metrics dict
    prompts_disjoint: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def make_world(seed: int, vocab_size: int = 16, order: int = 2, concentration: float = 0.3) -> TabularMarkovModel:
    """Random tabular target: each table row is a symmetric Dirichlet draw.

    Lower concentration gives sharper rows; the rows approach uniform as
    the concentration grows. Deterministic in the seed.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be > 0")
    rng = np.random.default_rng(seed)
    table = rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size**order)
    return TabularMarkovModel(vocab_size, order, table)


def generate_corpus(world, size: int, length: int, rng) -> list:
    return [sample_sequence(world, (), length, 1.0, rng) for _ in range(size)]


def _temp_key(temp: float) -> str:
    return repr(float(temp))


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """World -> corpus -> phase one -> snapshot -> phase two -> evaluation."""
    world = make_world(cfg.world_seed, cfg.vocab_size, cfg.target_order, cfg.concentration)
    corpus = generate_corpus(
        world, cfg.corpus_size, cfg.seq_len, np.random.default_rng([cfg.world_seed, 1])
    )

    draft0 = LinearSoftmaxDraftModel(cfg.vocab_size, cfg.draft_order)
    ref, phase1_losses = warmup_phase1(draft0, world, corpus, cfg.phase1_epochs, cfg.phase1_lr)
    model = ref.copy()

    train_rng = np.random.default_rng([cfg.world_seed, 2, cfg.train.seed])
    ref_cache: dict = {}
    phase2_log = []
    for _ in range(cfg.train.epochs):
        for seq in corpus:
            phase2_log.append(train_step(model, ref, world, seq, cfg.train, train_rng, ref_cache))

    # Held-out prompts, disjoint (by hash) from every corpus prefix.
    corpus_prefixes = {seq[: cfg.prompt_len] for seq in corpus}
    prompt_rng = np.random.default_rng([cfg.world_seed, 3])
    prompts = []
    seen = set()
    while len(prompts) < cfg.eval_prompts:
        cand = sample_sequence(world, (), cfg.prompt_len, 1.0, prompt_rng)
        if cand in corpus_prefixes or cand in seen:
            continue
        seen.add(cand)
        prompts.append(cand)

    metrics: dict = {}
    for name, mdl in (("control", ref), ("tree_tuned", model)):
        per_temp = {}
        for ti, temp in enumerate(cfg.eval_temps):
            runs = []
            for pi, prompt in enumerate(prompts):
                # rng keyed by temp and prompt only, so both models face
                # identical randomness (paired comparison).
                rng = np.random.default_rng([cfg.world_seed, 4, ti, pi])
                _, m = speculative_decode(
                    world, mdl, prompt, cfg.eval_max_tokens, cfg.train.tree, temp, cfg.cost, rng
                )
                runs.append(m)
            per_temp[_temp_key(temp)] = merge_decode_metrics(runs).to_json_dict()
        metrics[name] = per_temp

    return RunReport(
        config=config_to_dict(cfg),
        phase1_losses=[float(x) for x in phase1_losses],
        phase2_log=phase2_log,
        metrics=metrics,
        prompts_disjoint=all(p not in corpus_prefixes for p in prompts),
    )


def mean_tau(report: RunReport, model_name: str) -> float:
    """Mean accepted tokens per cycle, averaged over the eval temperatures."""
    per_temp = report.metrics[model_name]
    return float(np.mean([per_temp[k]["tau"] for k in sorted(per_temp)]))


def _apply_axis(cfg: ExperimentConfig, axis: str, setting) -> ExperimentConfig:
    if axis == "aggregator":
        train = replace(cfg.train, reward=replace(cfg.train.reward, aggregator=setting))
    elif axis == "group_size":
        train = replace(cfg.train, group_size=setting)
    elif axis == "debias":
        train = replace(cfg.train, debias=setting)
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return replace(cfg, train=train)


def run_ablation(cfg: ExperimentConfig, axis: str, seeds=None) -> list:
    """Sweep one axis, holding every other config field fixed.

    Returns one row per (setting, temperature) with seed-averaged tau
    and speedup for the tuned model plus the control for reference.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r} (choose from {sorted(ABLATION_AXES)})")
    seeds = [cfg.world_seed] if seeds is None else [int(s) for s in seeds]
    rows = []
    for setting in ABLATION_AXES[axis]:
        base = _apply_axis(cfg, axis, setting)
        reports = [run_experiment(replace(base, world_seed=s)) for s in seeds]
        for temp in cfg.eval_temps:
            k = _temp_key(temp)
            taus = [r.metrics["tree_tuned"][k]["tau"] for r in reports]
            speedups = [r.metrics["tree_tuned"][k]["speedup_proxy"] for r in reports]
            control = [r.metrics["control"][k]["tau"] for r in reports]
            rows.append(
                {
                    "axis": axis,
                    "setting": setting,
                    "temp": float(temp),
                    "tau": float(np.mean(taus)),
                    "speedup_proxy": float(np.mean(speedups)),
                    "control_tau": float(np.mean(control)),
                    "taus": [float(t) for t in taus],
                    "seeds": seeds,
                }
            )
    return rows


def ablation_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["axis", "setting", "temp", "tau", "speedup_proxy", "control_tau"])
    for r in rows:
        writer.writerow(
            [r["axis"], r["setting"], r["temp"], f"{r['tau']:.6f}",
             f"{r['speedup_proxy']:.6f}", f"{r['control_tau']:.6f}"]
        )
    return out.getvalue()


def emit_diagnostics(report: RunReport, outdir) -> list:
    """Write the report JSON plus CSV summaries; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []

    p = outdir / "report.json"
    p.write_text(report.to_json())
    paths.append(p)

    p = outdir / "accept_histograms.csv"
    with p.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "temp", "accepted_per_cycle", "cycles"])
        for name, per_temp in sorted(report.metrics.items()):
            for temp_key, m in sorted(per_temp.items()):
                for accepted, cycles in sorted(m["per_cycle_histogram"].items(), key=lambda kv: int(kv[0])):
                    writer.writerow([name, temp_key, accepted, cycles])
    paths.append(p)

    p = outdir / "decode_summary.csv"
    with p.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "temp", "tau", "speedup_proxy", "greedy_pruned_frac", "greedy_accept_match_frac"]
        )
        for name, per_temp in sorted(report.metrics.items()):
            for temp_key, m in sorted(per_temp.items()):
                writer.writerow(
                    [name, temp_key, f"{m['tau']:.6f}", f"{m['speedup_proxy']:.6f}",
                     f"{m['greedy_pruned_frac']:.6f}", f"{m['greedy_accept_match_frac']:.6f}"]
                )
    paths.append(p)
    return paths


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["eval_temps"] = [float(t) for t in cfg.eval_temps]
    return d


def _build(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)} in {where}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from nested plain dicts (strict keys)."""
    data = dict(data)
    if "train" in data:
        train = dict(data.pop("train"))
        tree = train.pop("tree", None)
        rewardd = train.pop("reward", None)
        if tree is not None:
            train["tree"] = _build(TreePolicyConfig, dict(tree), "train.tree")
        if rewardd is not None:
            train["reward"] = _build(RewardConfig, dict(rewardd), "train.reward")
        if "tree" not in train:
            train["tree"] = TreePolicyConfig(depth=4, layer_topk=3, leaf_budget=8, token_budget=12)
        data["train"] = _build(TrainConfig, train, "train")
    cost = data.pop("cost", None)
    if cost is not None:
        data["cost"] = _build(CostModel, dict(cost), "cost")
    if "eval_temps" in data:
        data["eval_temps"] = tuple(float(t) for t in data["eval_temps"])
    return _build(ExperimentConfig, data, "top level")
