"""Command-line entry point: ``otformer {train,eval,gradcheck,sweep-steps,straightness,ablate}``.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 training aborted on a NaN (the run record is still written).
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import (
    ConfigError,
    ExperimentConfig,
    build_data,
    build_train_config,
    from_dict,
    load_config,
    render_config,
    to_dict,
)
from .diagnostics import (
    VariantError,
    ablate,
    ablate_csv,
    nan_consistent,
    paired_wins,
    straightness,
    sweep_csv,
    sweep_steps,
)
from .gradcheck import COMPOSITE_TOL, run_suite
from .models import load_checkpoint, save_checkpoint
from .training import evaluate, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3

log = logging.getLogger("otformer")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _steps_list(text: str) -> list[int]:
    steps = _int_list(text)
    if min(steps) < 1:
        raise argparse.ArgumentTypeError("step counts must be positive integers")
    return steps


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="otformer", description="Continuous-time transformers with transport-cost regularisation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    def experiment_flags(p, need_config=True):
        p.add_argument("--config", type=Path, required=need_config, help="experiment TOML file")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", type=Path, help="output directory (overrides experiment.out)")
        p.add_argument("--lambda", dest="lam", type=float, help="override train.lam")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--variant", choices=("vanilla", "ot", "node"))

    p = sub.add_parser("train", help="train a model, write run.csv, model.ckpt and config.echo")
    experiment_flags(p)

    p = sub.add_parser("eval", help="report test metrics of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--steps", type=_steps_list, help="integration step count(s) to evaluate with")
    p.add_argument("--config", type=Path, help="take the test data from this config instead of the checkpoint's")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive, a block and the objective")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep-steps", help="accuracy of a frozen model for several step counts")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--steps", type=_steps_list, default=[1, 2, 4, 8, 16, 20])
    p.add_argument("--out", type=Path)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("straightness", help="arc length over displacement of hidden-state paths")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--out", type=Path)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("ablate", help="paired lambda=0 / lambda>0 runs over several seeds")
    experiment_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds")
    return ap


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out=str(args.out))
    if getattr(args, "lam", None) is not None:
        if args.lam < 0:
            raise ConfigError("--lambda must be >= 0")
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lam=args.lam))
    model = cfg.model
    if getattr(args, "precision", None):
        model = dataclasses.replace(model, precision=args.precision)
    if getattr(args, "variant", None):
        model = dataclasses.replace(model, variant=args.variant)
    return dataclasses.replace(cfg, model=model)


def _experiment_from_checkpoint(extra: dict, override: Path | None) -> ExperimentConfig:
    if override is not None:
        return load_config(override)
    if "experiment" not in extra:
        raise UsageError("checkpoint carries no experiment config; pass --config")
    return from_dict(extra["experiment"])


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(render_config(cfg))
    data = build_data(cfg)
    tcfg = build_train_config(cfg, data)
    model, record = train(tcfg, data)
    record.write_csv(out / "run.csv")
    save_checkpoint(out / "model.ckpt", model, extra={"experiment": to_dict(cfg)})
    last = record.rows[-1]
    if record.nan_flag:
        print(f"training aborted on NaN at epoch {last.epoch}; record written to {out / 'run.csv'}")
        return EXIT_NAN
    print(f"epoch {last.epoch}: train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    data = build_data(_experiment_from_checkpoint(extra, args.config))
    steps = args.steps or [model.config.steps]
    for n in steps:
        m = model.with_steps(n) if model.variant.continuous else model
        loss, acc = evaluate(m, data.test_x, data.test_y)
        print(f"steps={n} test_loss={loss:.6g} test_acc={acc:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    ok = True
    for entry in run_suite(args.seed):
        r = entry.result
        print(f"{r.name:16s} max_rel_err={r.max_rel_err:.3e} tol={entry.tol:.0e} {'ok' if entry.ok else 'FAIL'}")
        worst = max(worst, r.max_rel_err)
        ok &= entry.ok
    print(f"max_rel_err={worst:.3e}")
    return EXIT_OK if ok and worst < COMPOSITE_TOL else EXIT_FAIL


def cmd_sweep(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    data = build_data(_experiment_from_checkpoint(extra, args.config))
    rows = sweep_steps(model, data.test_x, data.test_y, args.steps)
    text = sweep_csv(rows)
    print(text, end="")
    out = args.out or args.checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(text)
    return EXIT_OK


def cmd_straightness(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    data = build_data(_experiment_from_checkpoint(extra, args.config))
    report = straightness(model, data.test_x, max_samples=args.samples)
    out = args.out or args.checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "straightness.csv").write_text(report.to_csv())
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(render_config(cfg))
    data = build_data(cfg)
    tcfg = build_train_config(cfg, data)
    rows = ablate(tcfg, data, args.seeds)
    (out / "ablate.csv").write_text(ablate_csv(rows))
    wins = paired_wins(rows)
    print(f"lambda={tcfg.lam:g} wins or ties in {sum(wins)}/{len(wins)} seeds; "
          f"nan-consistent={nan_consistent(rows)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep-steps": cmd_sweep,
    "straightness": cmd_straightness,
    "ablate": cmd_ablate,
}


def _thread_limit():
    value = os.environ.get("OTF_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"OTF_THREADS must be an integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, VariantError) as exc:
        print(f"otformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"otformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
