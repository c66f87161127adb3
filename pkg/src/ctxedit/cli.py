"""Command-line entry point: ``ctxedit {plan,gen-data,train,sample,eval,ablate}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from .errors import ConfigError, CtxEditError, MissingDataset
from .layout import TaskKind, plan_indices, plan_sequential, validate_plan


def _config(args) -> config_mod.Config:
    cfg = config_mod.load(args.config) if args.config else config_mod.Config()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.sample.seed = args.seed
    print(f"config fingerprint: {cfg.fingerprint()}")
    return cfg


def _out(args, cfg, default: str) -> Path:
    out = Path(args.out) if args.out else cfg.path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_plan(args) -> int:
    cfg = _config(args)
    conds = [c for c in (args.conditions or "").split(",") if c]
    fn = plan_sequential if args.sequential else plan_indices
    plan = fn(TaskKind.parse(args.task), conds, args.frames, cfg.registry, cfg.model.grid, cfg.model.text_len)
    print(plan.table())
    report = validate_plan(plan)
    print("overlap check: ok" if report.ok else "overlap check: COLLISIONS")
    for a, b, i in report.collisions:
        print(f"  {a} / {b} at index {i}")
    return 0 if report.ok else 1


def cmd_gen_data(args) -> int:
    from .synthetic import make_benchmark, write_dataset

    cfg = _config(args)
    d = cfg.data
    kinds = [TaskKind.parse(k) for k in args.kinds.split(",")] if args.kinds else list(TaskKind)
    if args.benchmark:
        out = Path(args.out) if args.out else cfg.path("benchmark")
        train_seeds = range(d.train_seed * 100_000, d.train_seed * 100_000 + d.train_count)
        manifest = make_benchmark(d.benchmark_seed, out, train_seeds, d.height, d.width, d.frames,
                                  d.benchmark_per_task, kinds)
    else:
        out = Path(args.out) if args.out else cfg.path("data")
        count = args.count if args.count is not None else d.train_count
        seeds = range(d.train_seed * 100_000, d.train_seed * 100_000 + count)
        manifest = write_dataset(out, kinds, seeds, d.height, d.width, d.frames)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    from .trainer import DatasetSource, init_state, load_checkpoint, parse_phases, preset, train

    cfg = _config(args)
    out = _out(args, cfg, "train")
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        if args.phases:
            schedule = parse_phases(args.phases)
        elif args.schedule:
            schedule = preset(args.schedule, cfg.train.steps_per_phase)
        else:
            schedule = cfg.schedule()
        state = init_state(cfg.model, schedule, cfg.train_config(), cfg.registry)
    source = None
    if not args.procedural:
        data = Path(args.data) if args.data else cfg.path("data")
        if not data.is_dir():
            raise MissingDataset(f"dataset directory not found: {data}")
        source = DatasetSource(data)

    def log(rec):
        if rec.step % args.log_every == 0:
            print(rec.line(), flush=True)

    train(state, source, out, log=log)
    print(f"checkpoint: {out / 'last.cxck'}")
    return 0


def cmd_sample(args) -> int:
    from .evaluator import run_model, save_gif
    from .flow import SamplerConfig
    from .synthetic import generate_sample, load_sample, save_sample
    from .tensorio import save_tensor
    from .trainer import load_model

    cfg = _config(args)
    out = _out(args, cfg, "samples")
    model = load_model(args.checkpoint)
    if args.input:
        sample = load_sample(args.input)
    else:
        d = cfg.data
        sample = generate_sample(TaskKind.parse(args.task), args.case, d.height, d.width, args.frames or d.frames[0])
    sampler = SamplerConfig(args.steps or cfg.sample.steps, cfg.sample.seed)
    (video,) = run_model(model, [sample], sampler, eval_seed=cfg.sample.seed)
    save_tensor(out / "output.cxt", video.astype(np.float32))
    save_sample(out / "case.cxs", sample)
    save_gif(out / "strip.gif", sample.reference, video, sample.target)
    print(f"wrote {out / 'output.cxt'} and {out / 'strip.gif'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluator import eval_checkpoint, load_benchmark, run_model, save_gif
    from .trainer import load_model

    cfg = _config(args)
    out = _out(args, cfg, "eval")
    model = load_model(args.checkpoint)
    bench = Path(args.benchmark) if args.benchmark else cfg.path("benchmark")
    if not (bench / "manifest.txt").exists():
        raise MissingDataset(f"benchmark manifest not found under {bench}")
    kinds = [TaskKind.parse(k) for k in args.kinds.split(",")] if args.kinds else None
    report = eval_checkpoint(model, bench, cfg.sampler(), cfg.sample.seed, kinds)
    print(report.table())
    (out / "report.tsv").write_text("\n".join(report.lines()) + "\n")
    if args.gif:
        cases = load_benchmark(bench, kinds)
        firsts = {}
        for c in cases:
            firsts.setdefault(c.kind, c)
        outs = run_model(model, list(firsts.values()), cfg.sampler(), cfg.sample.seed)
        for c, o in zip(firsts.values(), outs):
            save_gif(out / f"{c.kind.value}.gif", c.reference, o, c.target)
    print(f"wrote {out / 'report.tsv'}")
    return 0


def cmd_ablate(args) -> int:
    from .evaluator import compare_ablations, eval_checkpoint
    from .synthetic import benchmark_seeds, generate_sample
    from .trainer import ablation_grid, parse_phases

    cfg = _config(args)
    out = _out(args, cfg, "ablate")
    schedule = parse_phases(args.phases) if args.phases else cfg.schedule()
    tcfg = cfg.train_config()
    states = ablation_grid(cfg.model, schedule, tcfg, out)
    d = cfg.data
    rng_frames = list(d.frames)
    cases = [generate_sample(TaskKind.RECAMERA, s, d.height, d.width, rng_frames[i % len(rng_frames)])
             for i, s in enumerate(benchmark_seeds(d.benchmark_seed, d.benchmark_per_task))]
    reports = {name: eval_checkpoint(st.model, cases, cfg.sampler(), cfg.sample.seed)
               for name, st in states.items()}
    verdict = compare_ablations(reports)
    for name, value in verdict.numbers.items():
        print(f"{name}\ttrajectory_error\t{value:.4f}")
    for claim in verdict.claims:
        print(claim.line())
    return 0 if verdict.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxedit", description="Toy in-context video editing with task-aware RoPE.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override train and sample seeds")
    common.add_argument("--out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True, metavar="{plan,gen-data,train,sample,eval,ablate}")

    s = sub.add_parser("plan", parents=[common], help="print the positional-index plan for a task")
    s.add_argument("--task", required=True)
    s.add_argument("--frames", type=int, required=True, help="latent frame count N")
    s.add_argument("--conditions", help="extra condition roles, comma separated")
    s.add_argument("--sequential", action="store_true", help="baseline consecutive indexing")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset or benchmark")
    s.add_argument("--kinds", help="comma-separated tasks (default: all)")
    s.add_argument("--count", type=int, help="samples per task")
    s.add_argument("--benchmark", action="store_true", help="write the held-out benchmark instead")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train under a curriculum")
    s.add_argument("--data", help="dataset directory (default: paths.data)")
    s.add_argument("--procedural", action="store_true", help="generate training samples on the fly")
    s.add_argument("--schedule", help="preset: hard_to_easy, easy_to_hard or joint")
    s.add_argument("--phases", help='inline phases, e.g. "recamera:100;recamera,id_delete:100"')
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="edit one case with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", help="sample file (.cxs); otherwise one is generated")
    s.add_argument("--task", default="recamera")
    s.add_argument("--case", type=int, default=1_000_000, help="generator seed of the case")
    s.add_argument("--frames", type=int)
    s.add_argument("--steps", type=int, help="sampler steps")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on the benchmark")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--benchmark", help="benchmark directory (default: paths.benchmark)")
    s.add_argument("--kinds", help="restrict to these tasks")
    s.add_argument("--gif", action="store_true", help="dump reference/output/target strips")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and compare D1..D4")
    s.add_argument("--phases", help="inline phases for every arm")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except CtxEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        # bad task names and similar user input surface as config errors
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
