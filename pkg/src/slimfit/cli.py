"""Command-line front end.

Subcommands:

  train          pretrain (optional) + fine-tune; writes metrics.csv,
                 schedule.csv, heatmap.csv, memory.csv, a resolved-config
                 echo, and figures
  sweep          one fine-tune per (scheduler, freezing rate); writes
                 sweep.csv and the trade-off figure
  memory-report  analytic activation-memory report for the configured
                 dimensions, JSON plus a breakdown figure
  gradcheck      finite-difference check of every differentiable op

Flags override their config-file equivalents. SLIMFIT_THREADS caps kernel
parallelism (read before numeric libraries load, see package __init__).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys

import numpy as np

from . import gradcheck as gc
from . import memory as mem
from . import reports
from .config import ResolvedRun, resolve
from .data import generate
from .errors import SlimfitError, TrainingDiverged
from .model import build_model
from .trainer import evaluate, fine_tune, pretrain_synthetic


def _add_common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="path to the run config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--freeze-rate", dest="freeze_rate", type=float, default=None)
    p.add_argument("--scheduler", choices=["ils", "random", "progressive", "none"],
                   default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--quant", choices=["on", "off"], default=None)
    p.add_argument("--prune", choices=["on", "off"], default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--plots", choices=["on", "off"], default=None)


def _overrides(args) -> dict:
    keys = ("seed", "freeze_rate", "scheduler", "epochs", "batch_size",
            "quant", "prune", "out_dir", "plots", "jobs", "freeze_rates")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _write_resolved(res: ResolvedRun, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.ini"), "w") as f:
        f.write("\n".join(res.echo_lines()) + "\n")


def _prepare_model(res: ResolvedRun, ckpt: str | None = None):
    """Build the model; pretrain on the source task or load a checkpoint."""
    model = build_model(res.model, res.run.seed)
    if ckpt is not None:
        model.load_checkpoint(ckpt)
        return model, None
    if res.pretrain_steps > 0:
        source_task = type(res.task)(
            kind=res.task.kind, vocab=res.task.vocab, seq_len=res.task.seq_len,
            num_classes=res.task.num_classes, train_size=res.task.train_size,
            val_size=1, seed=res.pretrain_task_seed, noise=res.task.noise)
        source_train, _ = generate(source_task)
        pretrain_synthetic(model, source_train, res.pretrain_steps,
                           lr=res.pretrain_lr, batch_size=res.run.batch_size,
                           seed=res.run.seed)
    return model, res.pretrain_steps


def cmd_train(args) -> int:
    res = resolve(args.config, _overrides(args))
    out_dir = res.out_dir
    _write_resolved(res, out_dir)

    train_data, val_data = generate(res.task)
    model, pre_steps = _prepare_model(res)
    if pre_steps:
        model.save_checkpoint(os.path.join(out_dir, "pretrained.ckpt"))

    log = fine_tune(model, train_data, res.run, val_data=val_data)
    paths = reports.write_run_csvs(out_dir, log, res.run.seed)
    if res.plots:
        paths += reports.plot_run(out_dir, log)

    print(f"scheduler={res.run.scheduler} freeze_rate={res.run.freeze_rate} "
          f"epochs={res.run.epochs} seed={res.run.seed}")
    print(f"loss {log.initial_train_loss:.4f} -> {log.final_train_loss:.4f}; "
          f"validation accuracy {log.final_accuracy:.4f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _sweep_member(config_path: str, base_overrides: dict, scheduler: str,
                  rate: float, out_dir: str, ckpt: str | None):
    overrides = dict(base_overrides)
    overrides.update({"scheduler": scheduler, "freeze_rate": rate, "out_dir": out_dir})
    res = resolve(config_path, overrides)
    train_data, val_data = generate(res.task)
    model, _ = _prepare_model(res, ckpt=ckpt)
    log = fine_tune(model, train_data, res.run, val_data=val_data)
    os.makedirs(out_dir, exist_ok=True)
    reports.write_run_csvs(out_dir, log, res.run.seed)
    if res.plots:
        reports.plot_run(out_dir, log)
    return scheduler, rate, log.final_accuracy


def cmd_sweep(args) -> int:
    over = _overrides(args)
    over.pop("scheduler", None)
    over.pop("freeze_rate", None)
    res = resolve(args.config, over)
    out_dir = res.out_dir
    _write_resolved(res, out_dir)

    ckpt = None
    if res.pretrain_steps > 0:
        model, _ = _prepare_model(res)
        ckpt = os.path.join(out_dir, "pretrained.ckpt")
        model.save_checkpoint(ckpt)

    members = [(sched, rate) for sched in res.sweep_schedulers for rate in res.sweep_rates]
    jobs = []
    for sched, rate in members:
        sub = os.path.join(out_dir, "sweep", f"{sched}-F{rate:g}")
        jobs.append((args.config, over, sched, rate, sub, ckpt))

    if res.sweep_jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=res.sweep_jobs) as pool:
            rows = list(pool.map(_sweep_member_star, jobs))
    else:
        rows = [_sweep_member(*job) for job in jobs]

    rows.sort(key=lambda r: (r[0], r[1]))
    reports.write_csv(os.path.join(out_dir, "sweep.csv"),
                      ["scheduler", "F", "final_accuracy"], rows, res.run.seed)
    if res.plots:
        reports.plot_sweep(out_dir, rows)
    for sched, rate, acc in rows:
        print(f"{sched:12s} F={rate:<5g} accuracy={acc:.4f}")
    print(f"wrote {os.path.join(out_dir, 'sweep.csv')}")
    return 0


def _sweep_member_star(job):
    return _sweep_member(*job)


def cmd_memory_report(args) -> int:
    res = resolve(args.config, _overrides(args))
    out_dir = res.out_dir
    os.makedirs(out_dir, exist_ok=True)
    B = res.run.batch_size
    F = res.run.freeze_rate
    codecs = res.run.compression

    report = mem.account_budget(res.model, B, F, codecs)
    baseline = mem.account_budget(res.model, B, 0.0, None)
    doc = report.to_dict()
    doc["baseline_total"] = baseline.totals["activations_total"]
    doc["reduction_factor"] = (baseline.totals["activations_total"]
                               / max(1, report.totals["activations_total"]))
    doc["imbalance_ratio"] = mem.imbalance_ratio(res.model)
    doc["batch_scaling"] = [
        {"batch_size": b,
         "baseline_bytes": mem.account_budget(res.model, b, 0.0, None)
             .totals["activations_total"],
         "configured_bytes": mem.account_budget(res.model, b, F, codecs)
             .totals["activations_total"]}
        for b in (B, 2 * B, 4 * B)
    ]

    path = os.path.join(out_dir, "memory_report.json")
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)

    gib = 1024 ** 3
    base_gib = doc["baseline_total"] / gib
    conf_gib = report.totals["activations_total"] / gib
    print(f"model: L={res.model.blocks} H={res.model.hidden} T={res.model.max_seq} B={B}")
    print(f"imbalance ratio: {doc['imbalance_ratio']:.1f}")
    print(f"activation memory: baseline {base_gib:.2f} GiB -> configured {conf_gib:.2f} GiB "
          f"at F={F:g} ({doc['reduction_factor']:.1f}x reduction)")
    for row in doc["batch_scaling"]:
        print(f"  B={row['batch_size']:<5d} baseline {row['baseline_bytes'] / gib:6.2f} GiB   "
              f"configured {row['configured_bytes'] / gib:6.2f} GiB")
    print(f"wrote {path}")
    if res.plots:
        fig = reports.plot_memory_report(
            out_dir, [r["batch_size"] for r in doc["batch_scaling"]],
            [r["baseline_bytes"] for r in doc["batch_scaling"]],
            [r["configured_bytes"] for r in doc["batch_scaling"]])
        print(f"wrote {fig}")
    return 0


def cmd_gradcheck(args) -> int:
    results, ok = gc.run_all(instances=args.instances, seed=args.gc_seed, tol=args.tol)
    width = max(len(name) for name in results)
    for name, err in sorted(results.items()):
        status = "ok" if err < args.tol else "FAIL"
        print(f"{name:<{width}s}  worst relative error {err:.3e}  {status}")
    print(f"gradcheck: {'all passed' if ok else 'FAILURES'} (tolerance {args.tol:g})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="slimfit",
        description="Memory-frugal fine-tuning: distance-driven layer freezing "
                    "with activation compression and analytic memory accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run pretrain (optional) + fine-tune")
    _add_common_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_sweep = sub.add_parser("sweep", help="fine-tune per (scheduler, freezing rate)")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--freeze-rates", dest="freeze_rates", default=None,
                         help="comma-separated list, e.g. 0,0.5,0.9")
    p_sweep.add_argument("--jobs", type=int, default=None,
                         help="concurrent member runs")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_mem = sub.add_parser("memory-report", help="analytic activation-memory report")
    _add_common_flags(p_mem)
    p_mem.set_defaults(fn=cmd_memory_report)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_gc.add_argument("--instances", type=int, default=20)
    p_gc.add_argument("--seed", dest="gc_seed", type=int, default=0)
    p_gc.add_argument("--tol", type=float, default=gc.DEFAULT_TOL)
    p_gc.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        for key, val in exc.snapshot.items():
            if isinstance(val, np.ndarray):
                val = np.array2string(val, precision=3, threshold=16)
            print(f"  {key}: {val}", file=sys.stderr)
        return 3
    except SlimfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
