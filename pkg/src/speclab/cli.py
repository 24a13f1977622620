"""Command-line interface.

Verbs: world, train, decode, ablate, report. Exit codes: 0 success,
1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .lab import (
    ABLATION_AXES,
    ablation_csv,
    config_from_dict,
    config_to_dict,
    emit_diagnostics,
    make_world,
    run_ablation,
    run_experiment,
)
from .models import load_model, sample_sequence, save_model
from .tree import TreePolicyConfig
from .verify import CostModel, speculative_decode


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad flags are a configuration problem
        raise ConfigError(message)


def _load_config(args) -> "ExperimentConfig":
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    try:
        return config_from_dict(data)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))


def _cmd_world(args) -> int:
    try:
        world = make_world(args.seed, args.vocab, args.order, args.concentration)
    except ValueError as e:
        raise ConfigError(str(e))
    save_model(world, args.out)
    print(f"wrote world model to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg)
    outdir = Path(args.out)
    paths = emit_diagnostics(report, outdir)
    log_path = outdir / "train_log.jsonl"
    with log_path.open("w") as fh:
        for rec in report.phase2_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    paths.append(log_path)
    for name in sorted(report.metrics):
        for temp_key in sorted(report.metrics[name]):
            m = report.metrics[name][temp_key]
            print(f"{name} T={temp_key}: tau={m['tau']:.4f} speedup={m['speedup_proxy']:.4f}")
    print(f"wrote {len(paths)} files under {outdir}")
    return 0


def _cmd_decode(args) -> int:
    target = load_model(args.world)
    draft = load_model(args.draft)
    try:
        policy = TreePolicyConfig(args.depth, args.topk, args.leaves, args.token_budget)
        cost = CostModel(args.target_cost, args.draft_cost)
    except ValueError as e:
        raise ConfigError(str(e))
    rng = np.random.default_rng(args.seed)
    prompt = sample_sequence(target, (), args.prompt_len, 1.0, rng)
    _, metrics = speculative_decode(
        target, draft, prompt, args.max_tokens, policy, args.temp, cost, rng
    )
    print(json.dumps(metrics.to_json_dict(), sort_keys=True, indent=2))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}")
    rows = run_ablation(cfg, args.axis, seeds)
    csv_text = ablation_csv(rows)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / f"ablation_{args.axis}.csv").write_text(csv_text)
        (outdir / f"ablation_{args.axis}.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
        print(f"wrote ablation files under {outdir}")
    print(csv_text, end="")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"report file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"report file is not valid JSON: {e}")
    if isinstance(data, list):  # ablation rows
        print(ablation_csv(data), end="")
        return 0
    if not isinstance(data, dict) or "metrics" not in data:
        raise ConfigError("unrecognized report structure")
    print(f"{'model':<12} {'temp':<6} {'tau':>8} {'speedup':>9} {'pruned':>8} {'match':>8}")
    for name in sorted(data["metrics"]):
        for temp_key in sorted(data["metrics"][name]):
            m = data["metrics"][name][temp_key]
            print(
                f"{name:<12} {temp_key:<6} {m['tau']:>8.4f} {m['speedup_proxy']:>9.4f} "
                f"{m['greedy_pruned_frac']:>8.4f} {m['greedy_accept_match_frac']:>8.4f}"
            )
    if "phase1_losses" in data and data["phase1_losses"]:
        print(f"phase1 token loss: {data['phase1_losses'][0]:.4f} -> {data['phase1_losses'][-1]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speclab", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("world", help="sample and save a random target model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--concentration", type=float, default=0.3)
    p.add_argument("--out", default="world.json")
    p.set_defaults(func=_cmd_world)

    p = sub.add_parser("train", help="run the full two-phase experiment")
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--out", default="runout")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("decode", help="speculative decoding with saved models")
    p.add_argument("--world", required=True)
    p.add_argument("--draft", required=True)
    p.add_argument("--temp", type=float, default=0.0)
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--max-tokens", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--leaves", type=int, default=8)
    p.add_argument("--token-budget", type=int, default=12)
    p.add_argument("--target-cost", type=float, default=1.0)
    p.add_argument("--draft-cost", type=float, default=0.05)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("ablate", help="sweep one config axis")
    p.add_argument("axis", choices=sorted(ABLATION_AXES))
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.add_argument("--seeds", help="comma-separated world seeds")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="re-render tables from a report JSON")
    p.add_argument("path")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
