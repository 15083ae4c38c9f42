"""Command-line entry points: train, eval, gradcheck, export-curves,
oracle-attention.

Exit codes: 0 success, 1 usage/config error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import agent, metrics, network
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, config_snapshot, load_experiment
from .errors import CheckpointError, ConfigError, CoopDriveError
from .gradcheck import run_gradcheck
from .oracles import brute_force_multi_head_attention


def _apply_ablations(cfg: ExperimentConfig, ablations: list[str]) -> ExperimentConfig:
    """Apply key=value switches: ppe, ego_only_tokens, learned_pos (on/off)
    and target_sync (integer)."""
    net, enc, train = cfg.net, cfg.encoder, cfg.train
    for item in ablations:
        if "=" not in item:
            raise ConfigError(f"--ablation expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip().lower()
        on = value in ("on", "true", "1")
        off = value in ("off", "false", "0")
        if key == "ppe" and (on or off):
            net = dataclasses.replace(net, use_ppe=on)
        elif key == "ego_only_tokens" and (on or off):
            enc = dataclasses.replace(enc, ego_only_tokens=on)
        elif key == "learned_pos" and (on or off):
            net = dataclasses.replace(net, learned_pos=on)
        elif key == "target_sync":
            try:
                train = dataclasses.replace(train, target_sync=int(value))
            except ValueError as err:
                raise ConfigError("--ablation target_sync needs an int") from err
        else:
            raise ConfigError(f"unknown ablation {item!r}")
    return dataclasses.replace(cfg, net=net, encoder=enc, train=train)


def cmd_train(args) -> int:
    cfg = load_experiment(args.config)
    if args.episodes is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, episodes=args.episodes))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.run_id is not None:
        cfg = dataclasses.replace(cfg, run_id=args.run_id)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    elif args.seeds is not None:
        cfg = dataclasses.replace(
            cfg, seeds=tuple(int(s) for s in args.seeds.split(",") if s.strip()))
    cfg = _apply_ablations(cfg, args.ablation or [])

    run_dir = Path(cfg.out_dir) / cfg.run_id
    snapshot = config_snapshot(cfg)
    summary_lines = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        seed_dir = run_dir / f"seed_{seed}"
        result = agent.train(cfg.scenario, cfg.encoder, cfg.reward, cfg.net,
                             cfg.train, seed=seed, out_dir=seed_dir,
                             resume=args.resume, config_snapshot=snapshot)
        last = result.rows[-1] if result.rows else {}
        tail = result.rows[-100:]
        tail_ats = (sum(r["ats"] for r in tail) / len(tail)) if tail else float("nan")
        line = (f"seed {seed}: {len(result.rows)} episodes, "
                f"final eps {last.get('epsilon', float('nan')):.4f}, "
                f"last-100 mean ATS {tail_ats:.4f}")
        summary_lines.append(line)
        print(line)
        print(f"  wall time {time.perf_counter() - t0:.1f}s, "
              f"log: {result.log_path}")
    (run_dir / "summary.txt").write_text("\n".join(summary_lines) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = load_experiment(args.config)
    cfg = _apply_ablations(cfg, args.ablation or [])
    if args.policy == "net":
        if not args.checkpoint:
            raise ConfigError("--policy net needs --checkpoint")
        arrays, _meta = load_checkpoint(args.checkpoint)
        params = network.from_arrays(
            cfg.net, {k: v for k, v in arrays.items() if not k.startswith("adam.")})
        policy = agent.NetPolicy(params, cfg.net)
    elif args.policy == "rule":
        policy = agent.RuleBasedPolicy()
    elif args.policy == "random":
        policy = agent.RandomPolicy()
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown policy {args.policy}")
    seeds = None
    if args.seeds is not None:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    elif args.seed_base is not None:
        seeds = list(range(args.seed_base, args.seed_base + args.episodes))
    report = metrics.evaluate(policy, cfg.scenario, cfg.encoder, cfg.reward,
                              args.episodes, seeds=seeds,
                              trace_path=args.trace,
                              episodes_csv=args.episodes_csv)
    print(report.to_text())
    if args.out is not None:
        metrics.write_report(args.out, report)
    return 0


def cmd_gradcheck(args) -> int:
    config = None
    if args.config:
        config = load_experiment(args.config).net
    report = run_gradcheck(config=config, samples=args.samples, seed=args.seed,
                           batch=args.batch)
    print(report.to_text())
    return 0 if report.passed else 2


def cmd_export_curves(args) -> int:
    run_dir = Path(args.run_dir)
    logs = sorted(run_dir.glob("seed_*/train_log.csv"))
    if not logs:
        raise ConfigError(f"no seed_*/train_log.csv under {run_dir}")
    per_seed = []
    for log in logs:
        with open(log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        per_seed.append([(float(r["ats"]), float(r["n_collisions"]))
                         for r in rows])
    n = min(len(rows) for rows in per_seed)
    out_path = Path(args.out) if args.out else run_dir / "curves.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("episode", "ats_mean", "ats_min", "ats_max",
                         "coll_mean", "coll_min", "coll_max"))
        for ep in range(n):
            ats_vals = [s[ep][0] for s in per_seed]
            coll_vals = [s[ep][1] for s in per_seed]
            writer.writerow([
                ep,
                repr(sum(ats_vals) / len(ats_vals)),
                repr(min(ats_vals)), repr(max(ats_vals)),
                repr(sum(coll_vals) / len(coll_vals)),
                repr(min(coll_vals)), repr(max(coll_vals)),
            ])
    print(f"wrote {out_path} ({n} episodes, {len(per_seed)} seeds)")
    return 0


def cmd_oracle_attention(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = network.NetConfig()
    worst = 0.0
    for _ in range(args.trials):
        n = int(rng.integers(1, 8))
        z = rng.normal(0.0, 1.0, (n, cfg.d_model))
        u_heads = [rng.normal(0.0, cfg.d_model ** -0.5,
                              (cfg.d_model, 3 * cfg.d_head))
                   for _ in range(cfg.n_heads)]
        w_o = rng.normal(0.0, (cfg.n_heads * cfg.d_head) ** -0.5,
                         (cfg.n_heads * cfg.d_head, cfg.d_model))
        fast = network.multi_head_attention(z, u_heads, w_o)
        slow = brute_force_multi_head_attention(z, u_heads, w_o)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    ok = worst < 1e-12
    print(f"oracle-attention {'PASS' if ok else 'FAIL'}: "
          f"max |impl - brute force| = {worst:.3e} over {args.trials} trials")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopdrive",
        description="Cooperative ramp-exit driving: training, evaluation and "
                    "self-checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the policy network")
    p.add_argument("--config", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="train a single seed instead of the config's list")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--out", default=None)
    p.add_argument("--run-id", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--ablation", action="append", default=None,
                   help="e.g. ppe=off, ego_only_tokens=on, learned_pos=on, "
                        "target_sync=500")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy over seeded episodes")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", choices=("net", "rule", "random"), required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seeds", default=None)
    p.add_argument("--seed-base", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--trace", default=None, help="write an episode trace CSV")
    p.add_argument("--episodes-csv", default=None)
    p.add_argument("--ablation", action="append", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare analytic and finite-difference gradients")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-curves",
                       help="aggregate per-seed training logs into plot CSVs")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_curves)

    p = sub.add_parser("oracle-attention",
                       help="brute-force check of the attention implementation")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (CheckpointError, CoopDriveError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
