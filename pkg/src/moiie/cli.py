"""Command-line entry point: data generation, training, evaluation, routing stats and sweeps.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 numeric failure.
``MOIIE_OUT_DIR`` and ``MOIIE_WORKERS`` supply defaults for ``--out`` and ``--workers``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis
from .autodiff import NonFiniteError
from .synth import load_dataset_dir, make_dataset, save_dataset_dir
from .train import (ConfigError, RunConfig, datasets_for, evaluate, load_checkpoint, run_pipeline, run_stage1,
                    run_stage2, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
VARIANT_CHOICES = ("dense", "vanilla", "modality", "moiie")

SWEEPS = {
    "experts": [("experts=4", {"n_experts": 4}), ("experts=8", {"n_experts": 8})],
    "balance": [("balanced", {"n_experts": 8, "balance": "balanced"}),
                ("3,3,2", {"n_experts": 8, "balance": "3,3,2"})],
    "placement": [("interleaved", {"placement": "interleaved"}), ("full", {"placement": "full"})],
    "alpha": [("alpha=0", {"alpha": 0.0}), ("alpha=0.001", {"alpha": 0.001}), ("alpha=0.01", {"alpha": 0.01})],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _env_out() -> str | None:
    return os.environ.get("MOIIE_OUT_DIR")


def _env_workers() -> int:
    raw = os.environ.get("MOIIE_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"MOIIE_WORKERS must be an integer, got {raw!r}") from None


def _sizes(text: str) -> tuple[int, int, int]:
    try:
        sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three integers a,b,c, got {text!r}") from None
    if len(sizes) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers a,b,c, got {text!r}")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moiie", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train.jsonl and eval.jsonl")
    p.add_argument("--out", default=_env_out())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=_sizes, default=(4000, 3000, 3000), help="cross,text,image train sizes")
    p.add_argument("--eval-sizes", type=_sizes, default=(800, 600, 600))

    p = sub.add_parser("train", help="run stage 1 or stage 2 (or both) of the recipe")
    p.add_argument("--config", help="key = value config file; defaults apply when omitted")
    p.add_argument("--stage", choices=("1", "2", "all"), required=True)
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--out", default=_env_out())
    p.add_argument("--init", help="stage-1 checkpoint, required for stage 2")
    p.add_argument("--data", help="dataset directory from gen-data; generated from the seed when omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("eval", help="print per-task accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("route-stats", help="write the routing pathway CSV of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run one ablation grid and write a merged report")
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--config")
    p.add_argument("--out", default=_env_out())
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _load_config(path: str | None, overrides: list[str]) -> RunConfig:
    if path is not None and not Path(path).exists():
        raise UsageError(f"config file {path} not found")
    text = Path(path).read_text() if path else ""
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        text += "\n" + item
    try:
        return RunConfig.from_text(text)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required (or set MOIIE_OUT_DIR)")
    return Path(args.out)


def _datasets(cfg: RunConfig, data: str | None):
    if data is None:
        return datasets_for(cfg)
    return load_dataset_dir(data, "train", cfg.seed), load_dataset_dir(data, "eval", cfg.seed)


def _print_accuracy(acc: dict) -> None:
    for key in sorted(acc):
        print(f"{key} {acc[key]:.6f}")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    out = _require_out(args)
    save_dataset_dir(out, make_dataset(args.sizes, args.seed), make_dataset(args.eval_sizes, args.seed + 10_000))
    print(f"wrote {out / 'train.jsonl'} and {out / 'eval.jsonl'}")
    return EXIT_OK


def _finish_run(cfg: RunConfig, model, out: Path, eval_set) -> None:
    acc = evaluate(model, eval_set)
    (out / "eval.json").write_text(json.dumps(acc, indent=2, sort_keys=True) + "\n")
    if model.moe_layers:
        analysis.pathway_stats(model, eval_set, out / "route_stats.csv")
    analysis.export_report(out)
    _print_accuracy(acc)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.variant:
        cfg = cfg.replace(variant=args.variant)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.stage == "2" and not args.init:
        raise UsageError("train --stage 2 needs a stage-1 checkpoint via --init")
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    train, eval_set = _datasets(cfg, args.data)

    if args.stage == "all":
        result = run_pipeline(cfg, out, (train, eval_set))
        analysis.export_report(out)
        _print_accuracy(result.accuracies)
        return EXIT_OK
    cfg.save(out / "config.cfg")
    if args.stage == "1":
        run_stage1(cfg, out, train)
        print(f"wrote {out / 'stage1.moii'}")
        return EXIT_OK
    stage1, stage1_cfg = load_checkpoint(args.init)
    if stage1.moe_layers:
        raise UsageError(f"{args.init} is not a dense stage-1 checkpoint")
    want, have = cfg.model_config(1), stage1_cfg.model_config(1)
    clash = [k for k in ("d", "n_layers", "n_heads", "vocab_size", "dtype") if getattr(want, k) != getattr(have, k)]
    if clash:
        raise ConfigError(f"config disagrees with the stage-1 checkpoint on: {', '.join(clash)}")
    model, _ = run_stage2(cfg, stage1, out, train, eval_set)
    _finish_run(cfg, model, out, eval_set)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    _print_accuracy(evaluate(model, load_dataset_dir(args.data, "eval", cfg.seed)))
    return EXIT_OK


def cmd_route_stats(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    if not model.moe_layers:
        raise UsageError(f"{args.ckpt} is a dense checkpoint; routing statistics need MoE layers")
    summary = analysis.pathway_stats(model, load_dataset_dir(args.data, "eval", cfg.seed), args.out)
    for layer, share in summary.shared_share.items():
        print(f"layer {layer} shared_share {share:.6f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def run_dir_name(cfg: RunConfig) -> str:
    return f"{cfg.digest()}-seed{cfg.seed}"


def _sweep_member(job: tuple[str, RunConfig, str]) -> dict:
    label, cfg, root = job
    run_dir = Path(root) / run_dir_name(cfg)
    run_pipeline(cfg, run_dir)
    report = analysis.build_report(run_dir)
    (run_dir / "report.json").write_text(analysis.dumps_report(report))
    return report


def run_sweep(base: RunConfig, sweep: str, out: Path, workers: int = 1) -> str:
    """Run one ablation grid; the merged report keeps the grid order whatever the worker count."""
    jobs = [(label, base.replace(**changes), str(out)) for label, changes in SWEEPS[sweep]]
    out.mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_member, jobs))
    else:
        reports = [_sweep_member(job) for job in jobs]
    text = analysis.merge_reports([(label, r) for (label, _, _), r in zip(jobs, reports)], sweep)
    (out / f"ablate_{sweep}.json").write_text(text)
    return text


def cmd_ablate(args) -> int:
    base = _load_config(args.config, args.set)
    out = _require_out(args)
    workers = args.workers if args.workers is not None else _env_workers()
    if workers < 1:
        raise UsageError("--workers must be at least 1")
    text = run_sweep(base, args.sweep, out, workers)
    for label, acc in json.loads(text)["summary"].items():
        print(label, " ".join(f"{k}={acc[k]:.4f}" for k in sorted(acc)))
    print(f"wrote {out / f'ablate_{args.sweep}.json'}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "route-stats": cmd_route_stats, "ablate": cmd_ablate}


def run_command(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_command())
