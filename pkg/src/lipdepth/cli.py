"""Command-line harness: schedules, training, evaluation, Lipschitz and FLOPs reports."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigValidationError, ExperimentConfig, load_config
from .data import DataError, Dataset, load_cifar10_binary, resolve_data_dir, subset
from .flops import count_flops, expected_flops
from .lipschitz import LipschitzReport, local_lipschitz_estimate
from .model import CheckpointError, ConfigError, Model, build_vit, load_checkpoint, paper_shape_config, save_checkpoint
from .rng import Rng
from .schedule import (InvalidLambdaError, ScheduleError, budget_check, custom_schedule,
                       linear_schedule, make_schedule, no_drop_schedule)
from .train import LIPSCHITZ_COLUMNS, EvalReport, evaluate_suite, train

logger = logging.getLogger("lipdepth")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

TABLE_METHODS = (
    ("baseline", lambda L: no_drop_schedule(L)),
    ("linear", lambda L: linear_schedule(L, 0.1)),
    ("custom", lambda L: custom_schedule(L, 0.7)),
)


class UsageError(Exception):
    pass


def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def parse_fraction(text: str) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, outputs: list[Path], extra: dict | None = None,
                   name: str = "manifest.json") -> None:
    manifest = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {"lipdepth": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "outputs": {p.name if p.parent == out_dir else str(p.relative_to(out_dir)): _sha256(p) for p in outputs},
        "nondeterministic_fields": {"trainlog.jsonl": ["wall_time"]},
    }
    if extra:
        manifest.update(extra)
    atomic_write(out_dir / name, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _checkpoint_input(path) -> dict:
    return {"inputs": {"checkpoint": str(path), "checkpoint_sha256": _sha256(Path(path))}}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _data_dir(args, cfg: ExperimentConfig) -> Path:
    return resolve_data_dir(getattr(args, "data_dir", None) or cfg.paths.data_dir)


def _out_dir(args, cfg: ExperimentConfig, default: Path | None = None) -> Path:
    out = getattr(args, "out_dir", None) or (default if default is not None else cfg.paths.out_dir)
    return Path(out)


def load_splits(data_dir: Path, cfg: ExperimentConfig, strict: bool) -> tuple[Dataset, Dataset]:
    rng = Rng(cfg.seed).spawn(1)[0]
    full_train = load_cifar10_binary(data_dir, "train", strict=strict)
    full_test = load_cifar10_binary(data_dir, "test", strict=strict)
    tr = subset(full_train, min(cfg.data.train_size, len(full_train)), rng)
    te = subset(full_test, min(cfg.data.test_size, len(full_test)), rng)
    return tr, te


def _streams(seed: int) -> tuple[Rng, Rng, Rng]:
    init, fit, ev = Rng(seed + 1).spawn(3)
    return init, fit, ev


def train_one(cfg: ExperimentConfig, schedule, train_set: Dataset, test_set: Dataset, out_dir: Path):
    init_rng, fit_rng, _ = _streams(cfg.seed)
    model = build_vit(cfg.model, schedule, init_rng)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".trainlog.jsonl.tmp"
    with open(tmp, "w") as fh:
        log = train(model, train_set, cfg.train, fit_rng, test=test_set, log_stream=fh)
    os.replace(tmp, out_dir / "trainlog.jsonl")
    save_checkpoint(model, out_dir / "checkpoint.ldvt")
    return model, log


def evaluate_model(model: Model, cfg: ExperimentConfig, test_set: Dataset, method: str):
    _, _, eval_rng = _streams(cfg.seed)
    if cfg.attack.eval_size is not None:
        test_set = test_set.take(np.arange(min(cfg.attack.eval_size, len(test_set))))
    return evaluate_suite(
        model, test_set, {"fgsm": cfg.attack.fgsm(), "pgd": cfg.attack.pgd()}, method=method,
        lipschitz_epsilon=cfg.lipschitz.epsilon, lipschitz_directions=cfg.lipschitz.directions,
        rng=eval_rng, flops_per_mac=cfg.flops.flops_per_mac, nonlinear_cost=cfg.flops.nonlinear_cost,
        weight_decay=cfg.train.weight_decay)


# -- commands -----------------------------------------------------------------

def cmd_schedule(args) -> int:
    try:
        sched = make_schedule(args.kind, args.depth, args.kappa, args.pmax)
    except ScheduleError as exc:
        raise UsageError(str(exc)) from exc
    out = {"schedule": sched.to_dict()}
    if args.lam is not None:
        kappa = args.budget_kappa if args.budget_kappa is not None else args.kappa
        if kappa is None:
            raise UsageError("budget check needs --kappa or --budget-kappa")
        try:
            res = budget_check(sched, args.lam, kappa)
        except (InvalidLambdaError, ScheduleError) as exc:
            raise UsageError(str(exc)) from exc
        out["budget"] = res.to_dict() | {"lambda": args.lam, "kappa_target": kappa}
        if res.infeasible_regime:
            print(f"warning: budget right-hand side ln({kappa})/({args.lam}-1) = {res.rhs:.6f} < 0; "
                  "no nonnegative schedule satisfies it (infeasible regime)", file=sys.stderr)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out_dir = _out_dir(args, cfg)
    train_set, test_set = load_splits(_data_dir(args, cfg), cfg, cfg.data.strict_counts and not args.allow_partial_data)
    schedule = cfg.schedule.build(cfg.model.depth)
    train_one(cfg, schedule, train_set, test_set, out_dir)
    write_manifest(out_dir, cfg, [out_dir / "checkpoint.ldvt", out_dir / "trainlog.jsonl"])
    print(str(out_dir / "checkpoint.ldvt"))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    if args.eps is not None:
        cfg = cfg.replace(attack=replace(cfg.attack, epsilon=args.eps))
    out_dir = _out_dir(args, cfg, Path(args.checkpoint).parent)
    _, test_set = load_splits(_data_dir(args, cfg), cfg, cfg.data.strict_counts and not args.allow_partial_data)
    row = evaluate_model(model, cfg, test_set, args.method or model.schedule.kind)
    report = EvalReport([row], cfg.hash())
    atomic_write(out_dir / "eval.csv", report.eval_csv())
    write_manifest(out_dir, cfg, [out_dir / "eval.csv"], _checkpoint_input(args.checkpoint), "eval.manifest.json")
    sys.stdout.write(report.eval_csv())
    return EXIT_OK


def cmd_lipschitz(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    out_dir = _out_dir(args, cfg, Path(args.checkpoint).parent)
    _, test_set = load_splits(_data_dir(args, cfg), cfg, cfg.data.strict_counts and not args.allow_partial_data)
    if cfg.lipschitz.eval_size is not None:
        test_set = test_set.take(np.arange(min(cfg.lipschitz.eval_size, len(test_set))))
    _, _, rng = _streams(cfg.seed)
    ratios = []
    for i in range(0, len(test_set), 250):
        ratios.append(local_lipschitz_estimate(model, test_set.images[i:i + 250], args.eps,
                                               args.directions, rng).ratios)
    ratios = np.concatenate(ratios)
    rep = LipschitzReport(float(ratios.mean()), float(np.median(ratios)), float(ratios.max()),
                          args.eps, int(ratios.size))
    text = ",".join(LIPSCHITZ_COLUMNS) + "\n" + ",".join(
        [args.method or model.schedule.kind, f"{rep.mean:.4f}", f"{rep.median:.4f}", f"{rep.max:.4f}",
         f"{rep.epsilon:.6g}", str(rep.sample_count), cfg.hash()]) + "\n"
    atomic_write(out_dir / "lipschitz.csv", text)
    write_manifest(out_dir, cfg, [out_dir / "lipschitz.csv"], _checkpoint_input(args.checkpoint),
                   "lipschitz.manifest.json")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _config(args)
    model_cfg = paper_shape_config() if args.paper_shape else cfg.model
    schedule = cfg.schedule.build(model_cfg.depth)
    rep = count_flops(model_cfg, args.flops_per_mac or cfg.flops.flops_per_mac, cfg.flops.nonlinear_cost)
    rep.expected_under_schedule = expected_flops(rep, schedule)
    out = rep.to_dict() | {"schedule": schedule.to_dict(), "config_hash": cfg.hash(),
                           "expected_under_schedule_g": round(rep.expected_under_schedule / 1e9, 3)}
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out_dir:
        atomic_write(Path(args.out_dir) / "flops.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_reproduce_tables(args) -> int:
    """Train and evaluate the no-drop, linear (p_max 0.1) and custom (kappa 0.7) models."""
    cfg = _config(args)
    out_dir = _out_dir(args, cfg)
    train_set, test_set = load_splits(_data_dir(args, cfg), cfg, cfg.data.strict_counts and not args.allow_partial_data)
    report = EvalReport(config_hash=cfg.hash())
    outputs = []
    for method, make in TABLE_METHODS:
        schedule = make(cfg.model.depth)
        logger.info("training %s", method)
        model, _ = train_one(cfg, schedule, train_set, test_set, out_dir / method)
        report.rows.append(evaluate_model(model, cfg, test_set, method))
        outputs += [out_dir / method / "checkpoint.ldvt", out_dir / method / "trainlog.jsonl"]
    atomic_write(out_dir / "table1.csv", report.lipschitz_csv())
    atomic_write(out_dir / "table2.csv", report.eval_csv())
    outputs += [out_dir / "table1.csv", out_dir / "table2.csv"]
    write_manifest(out_dir, cfg, outputs)
    sys.stdout.write(report.lipschitz_csv() + "\n" + report.eval_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipdepth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="print a DropPath schedule and its budget check")
    p.add_argument("--kind", choices=("none", "linear", "custom"), required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--kappa", type=parse_fraction)
    p.add_argument("--pmax", type=parse_fraction)
    p.add_argument("--lambda", dest="lam", type=parse_fraction)
    p.add_argument("--budget-kappa", type=parse_fraction, help="kappa_target for the budget (default: --kappa)")
    p.set_defaults(func=cmd_schedule)

    def data_args(p):
        p.add_argument("--config")
        p.add_argument("--data-dir")
        p.add_argument("--out-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--allow-partial-data", action="store_true",
                       help="accept split sizes other than 50000/10000 (synthetic stand-ins)")

    p = sub.add_parser("train", help="train one model from a config")
    data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean/FGSM/PGD-20 accuracy, Lipschitz and FLOPs for a checkpoint")
    data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=parse_fraction, help="attack budget (default 8/255)")
    p.add_argument("--method")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lipschitz", help="empirical local Lipschitz statistics for a checkpoint")
    data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", type=parse_fraction, default=1 / 255)
    p.add_argument("--directions", choices=("random", "gradient_aligned"), default="random")
    p.add_argument("--method")
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--paper-shape", action="store_true", help="use ViT-Tiny/16 at 224x224")
    p.add_argument("--flops-per-mac", type=int, choices=(1, 2))
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("reproduce-tables", help="run all three schedules end to end")
    data_args(p)
    p.set_defaults(func=cmd_reproduce_tables)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
