"""Command-line entry point: list, gen, train, eval, similarity.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import CONFIG_FILE, AGENT_KINDS, VARIANTS, ConfigError, apply_overrides, load_run_config, preset
from .registry import TASK_NAMES, benchmark_split

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SECTIONS = ("policy", "env", "train")
FINETUNE_CHOICES = (0, 10_000, 30_000)


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"morphbench: error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- list

def split_stats(entries) -> tuple[float, float]:
    links = [e.morphology.n_links for e in entries]
    movable = [int(e.morphology.movable_mask.sum()) for e in entries]
    return float(np.mean(links)), float(np.mean(movable))


def cmd_list(args) -> int:
    header = f"{'task':<8} {'split':<5} {'n':>3} {'links':>6} {'movable':>7}  morphologies"
    print(header)
    print("-" * len(header))
    for name in TASK_NAMES:
        bench = benchmark_split(name, args.seed)
        for split in ("train", "test"):
            entries = bench.entries(split)
            links, movable = split_stats(entries)
            names = ", ".join(f"{e.name}[{e.task}]" for e in entries)
            print(f"{name:<8} {split:<5} {len(entries):>3} {links:>6.2f} {movable:>7.2f}  {names}")
    return EXIT_OK


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    from .morphology import save_morphology

    bench = benchmark_split(args.task, args.seed)
    out = Path(args.out) / args.task
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"task": args.task, "seed": args.seed, "train": [], "test": []}
    for split in ("train", "test"):
        for e in bench.entries(split):
            fname = f"{e.name}.json"
            (out / fname).write_text(save_morphology(e.morphology))
            manifest[split].append({"file": fname, "task": e.task})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(bench.train) + len(bench.test)} morphologies to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--section.field value`` or ``--section.field=value`` pairs."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


def split_section_flags(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.field [value]`` tokens out before argparse sees them.

    argparse would otherwise treat the value of an unknown option as a
    positional argument.
    """
    rest, flags, i = [], [], 0
    while i < len(argv):
        tok = argv[i]
        key = tok[2:].split("=", 1)[0]
        if tok.startswith("--") and key.split(".", 1)[0] in SECTIONS and "." in key:
            take = 1 if "=" in tok or i + 1 >= len(argv) else 2
            flags.extend(argv[i:i + take])
            i += take
        else:
            rest.append(tok)
            i += 1
    return rest, flags


def build_run_config(args, extra: list[str]):
    if args.config:
        rc = load_run_config(args.config)
    else:
        rc = preset(args.agent or "me-tf", args.variant)
    top = {}
    for k in ("name", "benchmark", "seed", "out_dir", "task", "morphology"):
        v = getattr(args, k, None)
        if v is not None:
            top[k] = json.dumps(v)
    if args.agent and args.config:
        top["agent"] = json.dumps(args.agent)
    if args.obstacles:
        top["obstacles"] = "true"
    if args.seed is not None:
        top["train.seed"] = str(args.seed)
    if args.envs is not None:
        top["train.n_envs"] = str(args.envs)
    if args.steps is not None:
        top["train.total_env_steps"] = str(args.steps)
    top.update(parse_overrides(extra))
    return apply_overrides(rc, top) if top else rc


def cmd_train(args, extra) -> int:
    from .trainer import prepare_run_dir, resume, Trainer

    if args.resume:
        resume(args.resume, log=print)
        return EXIT_OK
    rc = build_run_config(args, extra)
    run_dir = Path(rc.out_dir) / rc.name
    try:
        run_dir = prepare_run_dir(rc, run_dir, force=args.force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    print(f"training {rc.agent_label} on {rc.benchmark} -> {run_dir}")
    summary = Trainer(rc, run_dir, log=print).run()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _run_dir_of(checkpoint: Path) -> Path | None:
    d = checkpoint.resolve().parent
    if d.name == "checkpoints" and (d.parent / CONFIG_FILE).exists():
        return d.parent
    return None


def cmd_eval(args) -> int:
    from .config import run_config_from_dict
    from .evaluation import emit_report, evaluate
    from .policy import load_policy
    from .trainer import env_config_for, finetune

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    policy, meta, _ = load_policy(ckpt)
    rc = run_config_from_dict(meta["config"])
    bench_name = args.task or rc.benchmark
    bench = benchmark_split(bench_name, rc.seed).with_task(rc.task)
    env_cfg = env_config_for(rc, bench)
    seed = rc.seed if args.seed is None else args.seed
    splits = ("train", "test") if args.split == "both" else (args.split,)
    results = {}
    for split in splits:
        rows = []
        for e in bench.entries(split):
            p = policy
            if args.finetune_steps:
                p, _ = finetune(ckpt, e.morphology, e.task, args.finetune_steps, rc)
            r = evaluate(p, e.morphology, e.task, env_cfg, steps=args.steps, seed=seed, lanes=args.lanes,
                         deterministic=not args.stochastic, success_radius=rc.train.success_radius)
            print(f"{split:<5} {r.morphology:<24} {r.task:<5} score {r.score:+.4f} "
                  f"success {r.success_rate:.2f} episodes {r.episodes}")
            rows.append(r)
        results[split] = rows
    run_dir = _run_dir_of(ckpt)
    suffix = f"eval_{args.split}" + (f"_ft{args.finetune_steps}" if args.finetune_steps else "")
    out = Path(args.out) if args.out else (run_dir or ckpt.parent) / suffix
    paths = emit_report(out, run=rc.name, agent_kind=rc.agent_label, benchmark=bench_name,
                        split_results=results, metrics_csv=(run_dir / "metrics.csv") if run_dir else None)
    print(paths["summary"].read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- similarity

def similarity_table(task: str, seed: int = 0):
    from .morphology import cosine_similarity, morphology_vector

    bench = benchmark_split(task, seed)
    rows = []
    for t in bench.test:
        vt = morphology_vector(t.morphology)
        for e in bench.train:
            rows.append((t.name, e.name, cosine_similarity(vt, morphology_vector(e.morphology))))
    return sorted(rows, key=lambda r: (-r[2], r[0], r[1]))


def cmd_similarity(args) -> int:
    from .evaluation import write_series

    rows = similarity_table(args.task, args.seed)
    print(f"{'test':<24} {'train':<24} cosine")
    for test, train, s in rows:
        print(f"{test:<24} {train:<24} {s:.4f}")
    out = Path(args.out) if args.out else Path(f"similarity_{args.task}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_series(out, range(len(rows)), [s for _, _, s in rows])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="morphbench", description="Multi-embodiment manipulation benchmark")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("list", help="benchmark tasks with split statistics")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen", help="write one JSON descriptor per morphology of a task")
    p.add_argument("task", choices=TASK_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="morphologies")

    p = sub.add_parser("train", help="train an agent (extra --section.field value pairs override the config)")
    p.add_argument("config", nargs="?", help="run config JSON (default: built-in preset)")
    p.add_argument("--agent", choices=AGENT_KINDS)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--benchmark", choices=TASK_NAMES)
    p.add_argument("--task", choices=("reach", "push"))
    p.add_argument("--morphology")
    p.add_argument("--obstacles", action="store_true")
    p.add_argument("--name")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--envs", type=int, help="parallel env lanes (train.n_envs)")
    p.add_argument("--steps", type=int, help="train.total_env_steps")
    p.add_argument("--force", action="store_true", help="replace an existing run directory")
    p.add_argument("--resume", metavar="RUN_DIR", help="continue an existing run from its latest checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write report files")
    p.add_argument("checkpoint")
    p.add_argument("--task", choices=TASK_NAMES, help="benchmark task (default: the one trained on)")
    p.add_argument("--split", choices=("train", "test", "both"), default="test")
    p.add_argument("--finetune-steps", type=int, default=0, choices=FINETUNE_CHOICES)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--lanes", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("similarity", help="cosine similarity of test robots to each train robot")
    p.add_argument("task", choices=TASK_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "train":
        argv, section_flags = split_section_flags(argv)
    else:
        section_flags = []
    try:
        args, extra = ap.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if extra:
        ap.print_usage(sys.stderr)
        _err(f"unrecognized arguments: {' '.join(extra)}")
        return EXIT_USAGE
    try:
        if args.cmd == "list":
            return cmd_list(args)
        if args.cmd == "gen":
            return cmd_gen(args)
        if args.cmd == "train":
            return cmd_train(args, section_flags)
        if args.cmd == "eval":
            return cmd_eval(args)
        return cmd_similarity(args)
    except (UsageError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except KeyboardInterrupt:
        _err("interrupted")
        return EXIT_RUNTIME
    except Exception as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
