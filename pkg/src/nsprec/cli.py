"""Command-line entry point: ``python -m nsprec <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import fcntl
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_resolved
from .data import DataError, Event, build_dataset, generate_events, parse_event, write_events, write_items
from .experiments import ablation, child_seed, pit_comparison, prepare, scale_sweep, train_and_evaluate
from .numerics import grad_check_report, toggle_grid
from .retrieval import NearlineCache, build_index, evaluate
from .training import checkpoint_load, checkpoint_save, make_checkpoint, restore

log = logging.getLogger("nsprec")

COMMANDS = ("gen-data", "train", "pit-run", "eval", "retrieve", "grad-check", "ablate", "scale")
METRICS_HEADER = ["experiment", "step", "scenario", "metric", "value", "seed"]
TRAIN_HEADER = ["step", "scenario", "loss_nce", "loss_click", "loss_pay", "loss_msp", "loss_total"]

USAGE = """usage: nsprec <command> [--config FILE] [--seed N] [--out DIR] [--set key=value ...]

commands:
  gen-data    write a synthetic event log, item catalog and stats
  train       train on the configured data, save a checkpoint, evaluate
  pit-run     pretrain, then compare partial incremental training with full retraining
  eval        evaluate a checkpoint on the held-out sessions
  retrieve    fill the nearline cache from a checkpoint and dump it as JSON Lines
  grad-check  compare autograd with finite differences over all toggle combinations
  ablate      base run plus one run per component switched off
  scale       train and evaluate across model widths (--dims)
"""


class MetricsError(ValueError):
    pass


@dataclass
class MetricsRow:
    experiment: str
    step: int | str
    scenario: str
    metric: str
    value: float
    seed: int

    def as_list(self) -> list:
        return [self.experiment, self.step, self.scenario, self.metric, repr(float(self.value)), self.seed]


def emit_metrics(path: str | Path, rows: list[MetricsRow]) -> None:
    """Append rows under an exclusive lock; write the header only into an empty file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0)
            first = fh.readline().rstrip("\r\n")
            if first and first.split(",") != METRICS_HEADER:
                raise MetricsError(f"{path}: header {first!r} does not match {','.join(METRICS_HEADER)!r}")
            fh.seek(0, os.SEEK_END)
            w = csv.writer(fh, lineterminator="\n")
            if not first:
                w.writerow(METRICS_HEADER)
            for r in rows:
                w.writerow(r.as_list())
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def step_rows(experiment: str, metrics, seed: int) -> list[MetricsRow]:
    rows = []
    for m in metrics:
        for sc, terms in m.per_scenario.items():
            for name in ("nce", "click", "pay", "msp"):
                rows.append(MetricsRow(experiment, m.step, sc, f"loss_{name}", terms[name], seed))
        rows.append(MetricsRow(experiment, m.step, "all", "loss_total", m.total, seed))
    return rows


def report_rows(experiment: str, report, seed: int, step="final") -> list[MetricsRow]:
    return [MetricsRow(experiment, step, r["scenario"], f"hr@{r['K']}", r["hit_rate"], seed) for r in report.rows()]


def write_train_csv(path: Path, metrics, label: str = "step") -> None:
    with open(path, "w", newline="") as fh:
        header = [label, *TRAIN_HEADER[1:]]
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            w.writerows(m.csv_rows(label))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsprec", add_help=True)
    p.add_argument("command")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--dims", default="16,32,64,128")
    p.add_argument("--seeds", default="", help="comma-separated seeds for scale (default: seed, seed+1, seed+2)")
    p.add_argument("--checkpoint")
    p.add_argument("--events", help="event batch for retrieve (JSON Lines)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE, file=sys.stderr if not argv else sys.stdout)
        return 2 if not argv else 0
    if argv[0] not in COMMANDS:
        print(f"unknown command {argv[0]!r}\n\n{USAGE}", file=sys.stderr)
        return 2
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    handler = HANDLERS[args.command]
    try:
        return handler(cfg, out, args)
    except (DataError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# handlers


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    events, items, _ = generate_events(cfg.data, cfg.seed)
    write_events(events, out / "events.jsonl")
    write_items(items, out / "items.jsonl")
    summary = build_dataset(events, cfg.data, items).summary()
    (out / "stats.txt").write_text(summary + "\n")
    print(summary)
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    prep = prepare(cfg)
    run = train_and_evaluate(prep, cfg)
    checkpoint_save(out / "model.ckpt", make_checkpoint(run.trainer))
    write_train_csv(out / "train_metrics.csv", run.metrics)
    (out / "eval_report.csv").write_text(run.report.to_csv())
    emit_metrics(out / "metrics.csv", step_rows("train", run.metrics, cfg.seed)
                 + report_rows("train", run.report, cfg.seed, run.trainer.step))
    print(run.report.to_csv(), end="")
    return 0


def cmd_pit_run(cfg: RunConfig, out: Path, args) -> int:
    prep = prepare(cfg)
    comp = pit_comparison(prep, cfg)
    with open(out / "pit_phases.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "phase", "bucket", "users", "target_sessions", "samples", "steps", "mean_loss"])
        for mode, phases in (("full", comp.full_phases), ("pit", comp.pit_phases)):
            for p in phases:
                w.writerow([mode, p.day, p.bucket, p.users, p.target_sessions, p.samples, p.steps,
                            f"{p.mean_loss:.6f}"])
    rows = []
    for mode, rep in (("pretrain", comp.pretrain), ("full", comp.full), ("pit", comp.pit)):
        rows += report_rows(f"pit-run/{mode}", rep, cfg.seed)
        (out / f"eval_{mode}.csv").write_text(rep.to_csv())
    for mode, phases in (("full", comp.full_phases), ("pit", comp.pit_phases)):
        for p in phases:
            rows.append(MetricsRow(f"pit-run/{mode}", p.day, "all", "samples", p.samples, cfg.seed))
            rows.append(MetricsRow(f"pit-run/{mode}", p.day, "all", "loss_total", p.mean_loss, cfg.seed))
    emit_metrics(out / "metrics.csv", rows)
    print(f"HR@{comp.k}: pretrain {comp.pretrain.hr(comp.k):.4f} full {comp.full.hr(comp.k):.4f} "
          f"pit {comp.pit.hr(comp.k):.4f} ratio {comp.ratio:.3f}; "
          f"per-phase sample ratio <= {comp.sample_ratio:.3f}")
    return 0


def _load_trainer(cfg: RunConfig, out: Path, args):
    path = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    return restore(checkpoint_load(path), cfg)


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    trainer = _load_trainer(cfg, out, args)
    prep = prepare(cfg)
    report = evaluate(trainer.model, prep.queries, cfg.retrieval)
    (out / "eval_report.csv").write_text(report.to_csv())
    emit_metrics(out / "metrics.csv", report_rows("eval", report, cfg.seed, trainer.step))
    print(report.to_csv(), end="")
    return 0


def cmd_retrieve(cfg: RunConfig, out: Path, args) -> int:
    trainer = _load_trainer(cfg, out, args)
    prep = prepare(cfg)
    index = build_index(trainer.model, trainer.model.vocab, cfg.retrieval, child_seed(cfg.seed, "index"))
    cache = NearlineCache(trainer.model, index, prep.dataset.users, cfg.retrieval.cache_k,
                          cfg.retrieval.serve_scenario)
    if args.events:
        with open(args.events) as fh:
            events = [parse_event(line) for line in fh if line.strip()]
    else:
        # no batch given: replay each user's most recent session as the triggering event batch
        events = []
        for uid, seq in prep.dataset.users.items():
            s = seq.sessions[-1]
            events += [Event(uid, s.start_time, s.scenario, s.session_id, iid, "exposure") for iid in s.exposed]
    refreshed = cache.refresh(events)
    cache.dump(out / "cache.jsonl")
    print(f"refreshed {len(refreshed)} users, {cache.forward_calls} forward batches, "
          f"pool {index.size}, mode {index.mode}")
    return 0


def cmd_grad_check(cfg: RunConfig, out: Path, args) -> int:
    ok = True
    with open(out / "grad_check.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["toggles", "block", "max_rel_err", "median_rel_err", "status"])
        for toggles in toggle_grid():
            rep = grad_check_report(toggles, seed=cfg.seed)
            print(rep.to_text())
            for r in rep.rows:
                w.writerow([rep.label, r.block, f"{r.max_rel_err:.6e}", f"{r.median_rel_err:.6e}", r.status])
            ok &= rep.status == "PASS"
    print("grad check:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    prep = prepare(cfg)
    runs = ablation(prep, cfg)
    ok = True
    for run in runs:
        path = out / f"ablate_{run.name}.csv"
        if path.exists():
            path.unlink()
        rows = step_rows(f"ablate/{run.name}", run.metrics, cfg.seed)
        rows += report_rows(f"ablate/{run.name}", run.report, cfg.seed)
        rows.append(MetricsRow(f"ablate/{run.name}", "final", "all", "params", run.params, cfg.seed))
        emit_metrics(path, rows)
        ok &= run.delta_ok and bool(np.isfinite(run.final_loss))
        print(f"{run.name:<8} params {run.params:>8} delta {run.actual_delta:>7} (expected {run.expected_delta:>7}) "
              f"loss {run.final_loss:.4f} HR@100 {run.report.overall.get(100, float('nan')):.4f}")
    return 0 if ok else 1


def cmd_scale(cfg: RunConfig, out: Path, args) -> int:
    try:
        dims = [int(d) for d in args.dims.split(",") if d]
        seeds = [int(s) for s in args.seeds.split(",") if s] or [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    except ValueError:
        print("error: --dims and --seeds take comma-separated integers", file=sys.stderr)
        return 2
    prep = prepare(cfg)
    sweep = scale_sweep(prep, dims, seeds, cfg)
    ks = sorted(sweep.points[0].hr)
    with open(out / "scale_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim", "seed", "params", "log_params", *[f"hr@{k}" for k in ks]])
        for p in sweep.points:
            w.writerow([p.dim, p.seed, p.params, f"{p.log_params:.6f}", *[f"{p.hr[k]:.6f}" for k in ks]])
    rows = [MetricsRow("scale", p.dim, "all", f"hr@{k}", p.hr[k], p.seed) for p in sweep.points for k in ks]
    emit_metrics(out / "metrics.csv", rows)
    k = 100 if 100 in ks else ks[-1]
    for d in sweep.dims():
        print(f"dim {d:>4}: mean HR@{k} {sweep.mean_hr(d, k):.4f}")
    print(f"slope of HR@{k} vs log params: {sweep.slope(k):.4f}")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pit-run": cmd_pit_run,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
    "scale": cmd_scale,
}


def main() -> None:
    sys.exit(run_command())
