"""Command-line front end.

Subcommands cover the full loop: generate a world file, train on it, evaluate
a checkpoint on a validation split, run the ablation grid, print cost
profiles, and benchmark the scan kernel.  Commands that produce numbers emit
CSV (stdout or --csv) next to a human-readable summary on stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from dataclasses import asdict

import numpy as np

from .agent import (ModelConfig, load_checkpoint, model_config_for, new_model,
                    save_checkpoint)
from .env import World, WorldConfig, generate_world, make_episodes
from .profiler import (Scenario, SWEEP_COMPONENTS, format_profile_table,
                       paper_scale_config, profile, scaling_sweep, scan_flops)
from .training import (TrainConfig, VARIANT_OVERRIDES, ablate,
                       corpus_length_table, evaluate, format_ablation_table,
                       train)


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    """CSV to the given path, or to stdout when no path is set."""
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            out.close()


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# gen-world


def cmd_gen_world(args: argparse.Namespace) -> int:
    cfg = WorldConfig(seed=args.seed, n_train_graphs=args.train_graphs,
                      n_unseen_graphs=args.unseen_graphs, nodes=args.nodes,
                      noise_sigma=args.noise, min_hops=args.min_hops,
                      max_hops=args.max_hops, step_limit=args.step_limit)
    world = generate_world(cfg)
    world.save(args.out)
    print(f"wrote {args.out}: {cfg.n_train_graphs} train + "
          f"{cfg.n_unseen_graphs} unseen graphs of {cfg.nodes} nodes")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    doc = _load_json(args.config) if args.config else {}
    world = World.load(args.world_file)
    os.makedirs(args.out, exist_ok=True)

    cfg = model_config_for(world, **doc.get("model", {}))
    tcfg = TrainConfig(**doc.get("train", {}))
    model = new_model(cfg, seed=tcfg.seed)
    print(f"model: {model.store.total_params()} params, arch={cfg.arch}")

    ckpt = os.path.join(args.out, "checkpoint.bin")
    result = train(model, world, tcfg,
                   trace_path=os.path.join(args.out, "trace.jsonl"),
                   checkpoint_path=ckpt, quiet=args.quiet)
    if result.best is None:
        # No eval snapshots were taken, so no best was picked; keep the final.
        save_checkpoint(model, ckpt, extra={"final_episode": tcfg.episodes})

    doc = {"losses": result.losses, "evals": result.evals,
           "best": result.best, "wall_seconds": result.wall_seconds,
           "model_config": asdict(cfg), "train_config": asdict(tcfg)}
    with open(os.path.join(args.out, "result.json"), "w") as fh:
        json.dump(doc, fh, indent=2)

    lines = [f"episodes {tcfg.episodes}, wall {result.wall_seconds:.1f}s",
             f"final loss {np.mean(result.losses[-50:]):.4f} "
             f"(first 50: {np.mean(result.losses[:50]):.4f})"]
    if result.best:
        seen, unseen = result.best["val_seen"], result.best["val_unseen"]
        lines.append(f"best@{result.best['episode']}: "
                     f"seen sr={seen['sr']:.3f} spl={seen['spl']:.3f} | "
                     f"unseen sr={unseen['sr']:.3f} spl={unseen['spl']:.3f}")
    summary = "\n".join(lines)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary + "\n")
    print(summary)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    world = World.load(args.world_file)
    episodes = make_episodes(world, args.split, args.episodes,
                             seed=args.seed, style=args.style)
    metrics = evaluate(model, world, episodes)
    keys = ["ne", "sr", "osr", "spl"]
    _write_csv(args.csv, ["split", "episodes", *keys],
               [[args.split, len(episodes), *[round(metrics[k], 4) for k in keys]]])
    print(f"{args.split}: " + "  ".join(f"{k}={metrics[k]:.3f}" for k in keys))
    for bucket, m in metrics["by_len"].items():
        print(f"  tokens {bucket}: sr={m['sr']:.3f} (n={m['count']})")
    for hops, row in corpus_length_table(episodes).items():
        print(f"  path {hops} hops: mean tokens={row['mean_tokens']:.1f} "
              f"(n={row['count']})")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args: argparse.Namespace) -> int:
    world = World.load(args.world_file)
    variants = args.variants.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    tcfg = TrainConfig(episodes=args.episodes, eval_episodes=args.eval_episodes,
                       style=args.style)
    report = ablate(world, variants, seeds, tcfg,
                    model_kwargs=json.loads(args.model_json),
                    quiet=args.quiet)
    header = ["variant", "seed", "sr_seen", "spl_seen", "sr_unseen", "spl_unseen"]
    _write_csv(args.csv, header,
               [[r[k] for k in header] for r in report["rows"]])
    print(format_ablation_table(report))
    return 0


# ---------------------------------------------------------------------------
# profile


def _parse_input_cfg(text: str) -> Scenario:
    fields = dict(kv.split("=") for kv in text.split(","))
    unknown = set(fields) - {"batch", "instr", "neighbors", "visited", "views", "ghosts"}
    if unknown:
        raise ValueError(f"unknown input-cfg keys {sorted(unknown)}")
    if int(fields.get("batch", 1)) != 1:
        raise ValueError("decisions are profiled one rollout at a time; batch must be 1")
    visited = int(fields.get("visited", 8))
    if "ghosts" in fields:
        ghosts = int(fields["ghosts"])
    elif "neighbors" in fields:
        # Each visited node keeps mean-degree minus two frontier edges open,
        # plus the endpoints of the walk itself.
        ghosts = max(1, visited * (int(fields["neighbors"]) - 2) + 2)
    else:
        ghosts = None
    return Scenario(l_instr=int(fields.get("instr", 60)), n_visited=visited,
                    n_ghosts=ghosts, n_views=int(fields.get("views", 6)))


def cmd_profile(args: argparse.Namespace) -> int:
    if args.config:
        cfg = ModelConfig(**_load_json(args.config))
    else:
        cfg = paper_scale_config()
    sc = _parse_input_cfg(args.input_cfg)

    r = profile(cfg, sc)
    rows = [[group, name, count]
            for group in ("params", "flops")
            for name, count in r[group].items()]
    rows.append(["macs", "total", r["macs"]])
    rows.append(["flops", "text_pass", r["text_flops"]])
    _write_csv(args.csv, ["kind", "component", "count"], rows)

    print(f"scenario: {r['scenario']}")
    print(f"params {r['params']['total'] / 1e6:.2f}M | "
          f"decision {r['flops']['total'] / 1e6:.2f} MFLOPs = "
          f"{r['macs'] / 1e6:.2f} MMACs")
    print(format_profile_table(cfg, sc))
    if args.sweep:
        for comp in SWEEP_COMPONENTS:
            s = scaling_sweep(cfg, comp)
            print(f"scaling {comp}: slope {s['slope']:.3f} "
                  f"over lengths {s['lengths'][0]}..{s['lengths'][-1]}")
    return 0


# ---------------------------------------------------------------------------
# scan-bench


def cmd_scan_bench(args: argparse.Namespace) -> int:
    from .autodiff import no_grad, tensor
    from .ssm import DiscreteStep, scan

    lengths = [int(x) for x in args.len.split(",")]
    modes = ["seq", "par"] if args.mode == "both" else [args.mode]
    e, n = args.channels, args.state
    rng = np.random.default_rng(0)
    rows = []
    for length in lengths:
        # decay in (0.9, 0.999): representative of trained step sizes
        a_bar = tensor(rng.uniform(0.9, 0.999, (1, length, e, n)))
        b_bar = tensor(rng.normal(0, 0.05, (1, length, e, n)))
        c = tensor(rng.normal(0, 1, (1, length, n)))
        x = tensor(rng.normal(0, 1, (1, length, e)))
        d = tensor(rng.normal(0, 1, (e,)))
        steps = DiscreteStep(a_bar, b_bar)
        for mode in modes:
            with no_grad():
                for _ in range(3):
                    scan(steps, c, x, d, mode=mode)
                samples = []
                for _ in range(max(args.repeat, 1)):
                    t0 = time.perf_counter_ns()
                    scan(steps, c, x, d, mode=mode)
                    samples.append(time.perf_counter_ns() - t0)
            rows.append([length, mode, int(statistics.median(samples)),
                         scan_flops(length, e, n)])
    _write_csv(args.csv, ["len", "mode", "wall_ns", "flops_model"], rows)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-world", help="generate and save a synthetic world")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nodes", type=int, default=24)
    g.add_argument("--train-graphs", type=int, default=200)
    g.add_argument("--unseen-graphs", type=int, default=40)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--min-hops", type=int, default=4)
    g.add_argument("--max-hops", type=int, default=7)
    g.add_argument("--step-limit", type=int, default=15)
    g.set_defaults(func=cmd_gen_world)

    t = sub.add_parser("train", help="behavior-clone the expert on a world")
    t.add_argument("--config", help="JSON with 'model' and 'train' sections")
    t.add_argument("--world-file", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a validation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--world-file", required=True)
    e.add_argument("--split", choices=["val_seen", "val_unseen"], required=True)
    e.add_argument("--episodes", type=int, default=60)
    e.add_argument("--seed", type=int, default=9001)
    e.add_argument("--style", choices=["fine", "coarse"], default="fine")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare architecture variants")
    a.add_argument("--world-file", required=True)
    a.add_argument("--variants", default=",".join(VARIANT_OVERRIDES))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--episodes", type=int, default=400)
    a.add_argument("--eval-episodes", type=int, default=40)
    a.add_argument("--style", choices=["fine", "coarse"], default="fine")
    a.add_argument("--model-json", default="{}",
                   help="JSON dict of model-config overrides")
    a.add_argument("--quiet", action="store_true")
    a.add_argument("--csv")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("profile", help="parameter and FLOPs accounting")
    f.add_argument("--config", help="JSON of model-config fields")
    f.add_argument("--input-cfg", default="batch=1,instr=60,visited=8")
    f.add_argument("--sweep", action="store_true",
                   help="also fit sequence-length cost exponents")
    f.add_argument("--csv")
    f.set_defaults(func=cmd_profile)

    b = sub.add_parser("scan-bench", help="time the selective-scan kernel")
    b.add_argument("--len", default="4096", help="comma-separated lengths")
    b.add_argument("--state", type=int, default=16)
    b.add_argument("--channels", type=int, default=128)
    b.add_argument("--mode", choices=["seq", "par", "both"], default="both")
    b.add_argument("--repeat", type=int, default=11)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_scan_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
