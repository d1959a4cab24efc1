"""``role-forge`` command line: train, evaluate, export-roles, plot, selftest.

Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import artifacts, plots, selftest
from .trainer import Trainer, TrainingAborted, evaluate

log = logging.getLogger("role_forge")


def _train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.single_thread:
        overrides["single_thread"] = True
    if args.t_max is not None:
        overrides["t_max"] = args.t_max
    cfg = artifacts.load_run_config(args.config, overrides)
    if args.run_name:
        cfg.run_name = args.run_name
    if args.output_dir:
        cfg.output_dir = args.output_dir
    run_dir = cfg.run_dir
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    artifacts.write_resolved_config(cfg, run_dir / "resolved_config.json")
    last = run_dir / "checkpoints" / "last.npz"
    metrics_path = run_dir / "metrics.csv"

    if args.resume:
        ckpt = artifacts.load_checkpoint(args.resume, expected=cfg.train, force=args.force)
        trainer = artifacts.restore_trainer(ckpt, cfg.train)
        if metrics_path.exists():
            # rows written after the checkpoint are replayed by the resumed run
            kept = [r for r in artifacts.read_metrics(metrics_path) if r["update"] <= trainer.updates]
            metrics_path.unlink()
            with artifacts.MetricsWriter(metrics_path) as w:
                for r in kept:
                    w.write({k: (int(v) if k in ("update", "env_steps") else v) for k, v in r.items()})
        log.info("resumed from %s at update %d", args.resume, trainer.updates)
    else:
        if metrics_path.exists():
            metrics_path.unlink()
        trainer = Trainer(cfg.train)

    t0 = time.perf_counter()
    with artifacts.MetricsWriter(metrics_path) as writer:

        def on_row(row, tr):
            writer.write(row)
            if not math.isnan(row["eval_return"]):
                artifacts.save_checkpoint(tr, last)
                log.info(
                    "update %d env_steps %d return %.3f success %.3f between %.3f within %.3f (%.0fs)",
                    row["update"], row["env_steps"], row["eval_return"], row["eval_success"],
                    row["between_d"], row["within_d"], time.perf_counter() - t0,
                )

        try:
            trainer.run(on_row)
        except TrainingAborted as exc:
            print(f"training aborted: {exc}; last good checkpoint: {last}", file=sys.stderr)
            return 1
    artifacts.save_checkpoint(trainer, run_dir / "checkpoints" / "final.npz")
    if trainer.spec.mode == "roles":
        res = trainer.evaluate(with_gap=False)
        artifacts.write_roles(res.role_record, run_dir / "roles.csv")
    print(f"wrote {metrics_path} ({writer.rows} rows) and checkpoints under {run_dir / 'checkpoints'}")
    return 0


def _load_for_eval(args):
    expected = artifacts.load_run_config(args.config).train if args.config else None
    ckpt = artifacts.load_checkpoint(args.checkpoint, expected=expected, force=args.force)
    return artifacts.restore_trainer(ckpt)


def _evaluate(args) -> int:
    tr = _load_for_eval(args)
    res = evaluate(tr.spec, tr.params, tr.cfg.env_kind, args.episodes, args.seed)
    report = {
        "env_kind": tr.cfg.env_kind,
        "updates": tr.updates,
        "env_steps": tr.env_steps,
        "mean_return": res.mean_return,
        "success_rate": res.success_rate,
        "between_d": res.between_d,
        "within_d": res.within_d,
    }
    print(json.dumps(report, indent=2))
    return 0


def _export_roles(args) -> int:
    tr = _load_for_eval(args)
    if tr.spec.mode != "roles":
        print(f"checkpoint was trained with ablation {tr.cfg.ablation!r}, which has no roles", file=sys.stderr)
        return 1
    res = evaluate(tr.spec, tr.params, tr.cfg.env_kind, args.episodes, args.seed, with_gap=False)
    n = artifacts.write_roles(res.role_record, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def _plot(args) -> int:
    out_dir = Path(args.out_dir or Path(args.metrics).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = artifacts.read_metrics(args.metrics)
    (out_dir / "learning_curve.svg").write_text(plots.learning_curve_svg(rows))
    written = ["learning_curve.svg"]
    if args.roles:
        role_rows = artifacts.read_roles(args.roles)
        for a, b in ((0, 1), (0, 2), (1, 2)):
            name = f"role_scatter_{a}{b}.svg"
            (out_dir / name).write_text(plots.role_scatter_svg(role_rows, (a, b)))
            written.append(name)
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


def _selftest(args) -> int:
    t0 = time.perf_counter()
    results = selftest.run_all(quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="role-forge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--t-max", type=int, help="override the env-step budget")
    p.add_argument("--run-name", help="override run_name")
    p.add_argument("--output-dir", help="override output_dir (takes precedence over the environment)")
    p.add_argument("--single-thread", action="store_true", help="collect episodes without worker threads")
    p.add_argument("--resume", help="checkpoint to continue from (the replay buffer restarts empty)")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")
    p.set_defaults(func=_train)

    for name, func, helptext in (
        ("evaluate", _evaluate, "greedy evaluation of a checkpoint"),
        ("export-roles", _export_roles, "write role means and variances to CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="run config to compare against the checkpoint's config hash")
        p.add_argument("--force", action="store_true", help="load despite a config hash mismatch")
        p.add_argument("--episodes", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)
        if name == "export-roles":
            p.add_argument("--out", required=True, help="CSV path")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render SVG charts from CSV outputs")
    p.add_argument("--metrics", required=True)
    p.add_argument("--roles", help="roles CSV for scatter plots of role means")
    p.add_argument("--out-dir", help="defaults to the metrics file's directory")
    p.set_defaults(func=_plot)

    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--quick", action="store_true", help="fewer samples and probed coordinates")
    p.set_defaults(func=_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, TypeError, artifacts.CheckpointError, FloatingPointError) as exc:
        print(f"role-forge {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
