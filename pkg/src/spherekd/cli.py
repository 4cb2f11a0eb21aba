"""Command-line interface.

One binary, six verbs:

    gen-data       write the dataset cache and both protocol files
    train-teacher  train the wide network with classification loss
    distill        train a student (none | l2 | angular) against a teacher
    evaluate       score a checkpoint on the verification/identification protocols
    compare        run the full experiment matrix over several seeds
    grad-check     finite-difference verification of all differentiable ops

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure,
5 check failure. Every command writes its effective config (all defaults
materialized) next to its outputs and echoes it to stdout, so a run is
reproducible from its printed output alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, dump_config, load_config, write_effective_config
from .errors import ConfigError, ContractError, DimensionError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spherekd",
        description="Hypersphere knowledge distillation toolkit",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. --set train.batch_size=16",
        )
        p.add_argument("--out", type=str, default=None, help="output directory override")

    p = sub.add_parser("gen-data", help="generate dataset cache and protocol files")
    common(p)

    p = sub.add_parser("train-teacher", help="train the teacher network")
    common(p)

    p = sub.add_parser("distill", help="train a student network")
    common(p)
    p.add_argument("--teacher", type=str, default=None, help="teacher checkpoint path")
    p.add_argument("--kind", choices=["none", "l2", "angular"], default=None)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the protocols")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)

    p = sub.add_parser("compare", help="run the teacher/student experiment matrix")
    common(p)
    p.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated seeds")
    p.add_argument("--parallel", type=int, default=1, help="seed cells run in N processes")

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--module", choices=["all", "losses", "nets"], default="all")
    p.add_argument("--instances", type=int, default=5)
    return parser


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if getattr(args, "out", None):
        cfg = apply_overrides(cfg, [f"output_dir={args.out}"])
    return cfg.validate()


def _announce(cfg: RunConfig, out: Path) -> None:
    write_effective_config(cfg, out)
    print(f"# effective config ({out / 'effective_config.yaml'}):")
    print(dump_config(cfg), end="")


def _cmd_gen_data(args) -> int:
    from .data import (
        save_dataset_cache,
        save_identification_protocol,
        save_verification_protocol,
    )
    from .engine import dataset_from_config, protocols_from_config

    cfg = _effective_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    dataset = dataset_from_config(cfg)
    vprot, iprot = protocols_from_config(cfg, dataset)
    save_dataset_cache(dataset, out / "dataset.bin")
    save_verification_protocol(vprot, out / "verification.txt")
    save_identification_protocol(iprot, out / "identification.txt")
    print(
        f"dataset: {dataset.num_samples} samples, "
        f"{len(dataset.train_classes)} train / {len(dataset.test_classes)} test classes, "
        f"{len(dataset.distractor_classes)} distractors"
    )
    print(
        f"verification: {vprot.num_pairs} pairs in {vprot.folds} folds; "
        f"identification: {len(iprot.gallery_indices)} gallery / "
        f"{len(iprot.probe_indices)} probes"
    )
    return EXIT_OK


def _cmd_train_teacher(args) -> int:
    from .engine import train_teacher

    cfg = _effective_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    path, summary = train_teacher(cfg)
    print(f"teacher checkpoint: {path}")
    print(
        f"final train loss {summary['train_loss']:.4f}, "
        f"train accuracy {summary['train_accuracy']:.4f}"
    )
    return EXIT_OK


def _cmd_distill(args) -> int:
    from .engine import evaluate_checkpoint, train_student

    cfg = _effective_config(args)
    if args.kind is not None:
        cfg = apply_overrides(cfg, [f"distill.kind={args.kind}"])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    path, summary = train_student(cfg, args.teacher)
    print(f"student checkpoint: {path}")
    metrics = evaluate_checkpoint(cfg, path)
    print(
        f"verification accuracy {metrics['verification_accuracy']:.4f} "
        f"(threshold {metrics['verification_threshold']:.4f}), "
        f"rank-1 {metrics['rank1']:.4f}"
    )
    (out / f"student_{cfg.distill.kind}_eval.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .engine import evaluate_checkpoint

    cfg = _effective_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    metrics = evaluate_checkpoint(cfg, args.checkpoint)
    print(json.dumps(metrics, sort_keys=True, indent=2))
    (out / "evaluation.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .engine import format_report, run_experiment_matrix

    cfg = _effective_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {args.seeds!r}") from exc
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _announce(cfg, out)
    report = run_experiment_matrix(cfg, seeds, parallel=args.parallel)
    print(format_report(report), end="")
    print(f"report: {out / 'report.json'}")
    if report["failures"]:
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(group=args.module, instances=args.instances)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) FAILED")
        return EXIT_CHECK
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IOError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, DimensionError, ContractError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
