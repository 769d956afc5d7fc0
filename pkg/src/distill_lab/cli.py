"""Command-line front end: ``distill-lab <command> ...``.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .bound import NormKind, verify_bound
from .checkpoint import load_network, save_checkpoint
from .config import ExperimentConfig, load_experiment
from .distillers import distill, train_ce_only
from .errors import CheckpointError, DistillLabError, DivergenceError, NonFiniteError, ParseError
from .nn import init_network
from .trainer import dumps_json, metrics_to_csv, summarize

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
WORKERS_ENV = "DISTILL_LAB_WORKERS"


class UsageError(DistillLabError, ValueError):
    pass


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def _aggregate(summaries: Sequence[dict]) -> dict:
    out = {"runs": len(summaries), "seeds": [s["seed"] for s in summaries]}
    for key in ("final_test_acc", "final_train_acc", "best_test_acc"):
        vals = [s[key] for s in summaries if s.get(key) is not None]
        if vals:
            arr = np.asarray(vals, dtype=float)
            out[key] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def _seed_dir(root: Path, seed: int) -> Path:
    return root / f"seed_{seed}"


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.kind == "spirals":
        train, test = D.make_spirals(args.classes, args.n, args.noise, args.turns, args.seed)
    else:
        train, test = D.make_blobs(args.classes, args.n, args.noise, args.seed)
    if not args.raw:
        train, test = D.standardize(train, test)
    out = Path(args.out)
    D.save_dataset(train, out / "train.csv")
    D.save_dataset(test, out / "test.csv")
    for ds in (train, test):
        print(f"{ds.split_tag}: N={len(ds)} C={ds.class_count} d={ds.dim}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------

def _run_teacher(cfg: ExperimentConfig, seed: int, out: Path, split) -> dict:
    if not cfg.teacher or "widths" not in cfg.teacher:
        raise UsageError("config field teacher.widths: required for train-teacher")
    train, test = split
    init_seed = cfg.teacher.get("seed", seed)
    net = init_network(cfg.teacher["widths"], train.class_count, seed=init_seed)
    tcfg = cfg.train_config(seed)
    outcome = train_ce_only(net, (train, test), tcfg)
    save_checkpoint(outcome.student, out / "teacher.ckpt", seed=seed, step=len(outcome.records))
    _write(out / "metrics.csv", metrics_to_csv(outcome.records))
    summary = summarize(outcome.records, {"role": "teacher", "widths": list(cfg.teacher["widths"]),
                                          "train": tcfg.to_dict()}, seed)
    _write(out / "summary.json", dumps_json(summary))
    return summary


def _run_distill(cfg: ExperimentConfig, seed: int, out: Path, split, overrides: Optional[dict] = None,
                 label: Optional[str] = None) -> dict:
    dcfg = cfg.distill_config(**(overrides or {}))
    if not cfg.student:
        raise UsageError("config field student: required for distill")
    train, test = split
    teacher = None
    if dcfg.strategy != "ce_only":
        if not cfg.teacher or "checkpoint" not in cfg.teacher:
            raise UsageError(f"config field teacher.checkpoint: required for strategy {dcfg.strategy}")
        teacher = load_network(cfg.resolve(cfg.teacher["checkpoint"]))
    student = init_network(cfg.student["widths"], train.class_count, seed=seed)
    tcfg = cfg.train_config(seed)
    conn_seed = cfg.distill.get("connector_seed")
    outcome = distill(dcfg, student, (train, test), tcfg, teacher=teacher,
                      connector_seed=None if conn_seed is None else conn_seed + seed)
    save_checkpoint(outcome.student, out / "student.ckpt", seed=seed, step=len(outcome.records))
    _write(out / "metrics.csv", metrics_to_csv(outcome.records))
    config = {"distill": dcfg.to_dict(), "student": list(cfg.student["widths"]), "train": tcfg.to_dict()}
    extra = {"frob_initial": outcome.frob_initial}
    if label is not None:
        extra["label"] = label
    summary = summarize(outcome.records, config, seed, extra)
    _write(out / "summary.json", dumps_json(summary))
    return summary


def _job(payload):
    # top-level so it pickles for the process pool
    kind, cfg, seed, out, overrides, label = payload
    split = cfg.load_data()
    if kind == "teacher":
        return _run_teacher(cfg, seed, out, split)
    return _run_distill(cfg, seed, out, split, overrides, label)


def _execute(jobs: list) -> list:
    workers = min(_worker_count(), len(jobs)) if jobs else 1
    if workers <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def cmd_train_teacher(args) -> int:
    cfg = load_experiment(args.config)
    if not cfg.teacher or "widths" not in cfg.teacher:
        raise UsageError("config field teacher.widths: required for train-teacher")
    jobs = [("teacher", cfg, s, _seed_dir(cfg.output_dir, s), None, None) for s in cfg.seeds]
    summaries = _execute(jobs)
    _write(cfg.output_dir / "aggregate.json", dumps_json(_aggregate(summaries)))
    _print_aggregate("teacher", summaries)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_experiment(args.config)
    dcfg = cfg.distill_config()
    if dcfg.strategy != "ce_only" and (not cfg.teacher or "checkpoint" not in cfg.teacher):
        raise UsageError(f"config field teacher.checkpoint: required for strategy {dcfg.strategy}")
    if not cfg.student:
        raise UsageError("config field student: required for distill")
    jobs = [("distill", cfg, s, _seed_dir(cfg.output_dir, s), None, None) for s in cfg.seeds]
    summaries = _execute(jobs)
    _write(cfg.output_dir / "aggregate.json", dumps_json(_aggregate(summaries)))
    _print_aggregate(dcfg.strategy, summaries)
    return EXIT_OK


def _print_aggregate(name: str, summaries: list) -> None:
    acc = np.asarray([s["final_test_acc"] for s in summaries], dtype=float)
    print(f"{name}: {len(summaries)} run(s), final test acc mean {acc.mean():.4f} std {acc.std():.4f}")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

ALPHA_CE_VALUES = (0.0, 0.1, 0.2, 0.5, 1.0)
NEG_COSINE_ALPHA = 10.0


def _fmt_value(v) -> str:
    return ("%g" % v) if isinstance(v, float) else str(v)


def _pick(axis: str, table: dict, values: Optional[list]) -> list:
    unknown = [v for v in (values or []) if v not in table]
    if unknown:
        raise UsageError(f"axis {axis}: unknown value(s) {unknown}; expected {list(table)}")
    return [(k, table[k]) for k in (values or table)]


def sweep_rows(axis: str, values: Optional[list] = None) -> list:
    """``(label, overrides)`` per row of the ablation table for ``axis``."""
    if axis == "alpha_ce":
        vals = [float(v) for v in (values or ALPHA_CE_VALUES)]
        rows = [("SR only" if v == 0 else f"alpha_ce={_fmt_value(v)}", {"alpha_ce": v}) for v in vals]
        rows.append(("CE only", {"alpha_ce": 1.0, "alpha": 0.0}))
        return rows
    if axis == "loss_comb":
        table = {
            "ce+sr": {"alpha": 1.0, "beta": 0.0},
            "ce+fm": {"alpha": 0.0, "beta": 1.0},
            "ce+sr+fm": {"alpha": 1.0, "beta": 1.0},
        }
        return _pick(axis, table, values)
    if axis == "matching_loss":
        table = {
            "mse": {"matching_loss": "mse", "alpha": 1.0},
            "neg_cosine": {"matching_loss": "neg_cosine", "alpha": NEG_COSINE_ALPHA},
            "cross_entropy": {"matching_loss": "cross_entropy", "alpha": 1.0},
        }
        return _pick(axis, table, values)
    if axis == "connector_depth":
        vals = [int(v) for v in (values or (1, 2, 3))]
        return [(f"depth={v}", {"connector_depth": v}) for v in vals]
    raise UsageError(f"unknown sweep axis {axis!r}; expected alpha_ce, loss_comb, matching_loss or connector_depth")


def _parse_axis(spec: str) -> tuple[str, Optional[list]]:
    name, _, rest = spec.partition("=")
    name = name.strip()
    if not rest:
        return name, None
    values = [v.strip() for v in rest.split(",") if v.strip()]
    if name in ("alpha_ce",):
        try:
            return name, [float(v) for v in values]
        except ValueError:
            raise UsageError(f"axis {name}: values must be numbers, got {rest!r}") from None
    if name == "connector_depth":
        try:
            return name, [int(v) for v in values]
        except ValueError:
            raise UsageError(f"axis {name}: values must be 1, 2 or 3, got {rest!r}") from None
    return name, values


_REUSE_ONLY_AXES = ("alpha_ce", "loss_comb")


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "+-=._" else "_" for c in label)


def cmd_sweep(args) -> int:
    if len(args.axis) != 1:
        raise UsageError("sweep takes exactly one --axis")
    axis, values = _parse_axis(args.axis[0])
    rows = sweep_rows(axis, values)
    cfg = load_experiment(args.config)
    base = cfg.distill_config()
    if axis in _REUSE_ONLY_AXES and base.strategy != "ijckd_reuse":
        raise UsageError(f"axis {axis} applies to ijckd_reuse, config has strategy {base.strategy}")
    for _, overrides in rows:
        cfg.distill_config(**overrides)  # validate every row before any compute
    root = cfg.output_dir / axis
    jobs = []
    for label, overrides in rows:
        for s in cfg.seeds:
            jobs.append(("distill", cfg, s, _seed_dir(root / _slug(label), s), overrides, label))
    summaries = _execute(jobs)
    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(["label", "seeds", "mean_test_acc", "std_test_acc", "mean_train_acc", "std_train_acc"])
    for label, _ in rows:
        mine = [s for s in summaries if s.get("label") == label]
        agg = _aggregate(mine)
        w.writerow([
            label, len(mine),
            "%.17g" % agg["final_test_acc"]["mean"], "%.17g" % agg["final_test_acc"]["std"],
            "%.17g" % agg["final_train_acc"]["mean"], "%.17g" % agg["final_train_acc"]["std"],
        ])
        print(f"{label:>16}: test {agg['final_test_acc']['mean']:.4f} +/- {agg['final_test_acc']['std']:.4f}")
    _write(root / "table.csv", table.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def cmd_probe(args) -> int:
    from .checkpoint import load_module

    teacher = load_network(args.teacher)
    student = load_network(args.student)
    data = D.load_dataset(args.data, class_count=teacher.num_classes)
    connector = load_module(args.connector, kind="connector") if args.connector else None
    report = verify_bound(teacher, student, data, args.norm, connector=connector, onehot_scale=args.onehot_scale)
    text = report.to_json()
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_BASE_COLS = ["epoch", "lr", "train_acc", "test_acc", "frob_dist"]
_CONFIG_COLS = ["run", "label", "strategy", "seed"]


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def collect_runs(root: Path) -> list[tuple[Path, dict, list]]:
    runs = []
    for metrics in sorted(root.rglob("metrics.csv")):
        summary_path = metrics.parent / "summary.json"
        summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
        runs.append((metrics.parent, summary, _read_csv(metrics)))
    return runs


def _strategy(summary: dict) -> str:
    cfg = summary.get("config", {})
    if "distill" in cfg:
        return cfg["distill"].get("strategy", "")
    return cfg.get("role", "")


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise UsageError(f"--runs {root} is not a directory")
    runs = collect_runs(root)
    if not runs:
        raise UsageError(f"no runs found under {root}")
    loss_cols: list = []
    for _, _, rows in runs:
        for k in rows[0].keys() if rows else ():
            if k.startswith("loss_") and k not in loss_cols:
                loss_cols.append(k)
    merged = io.StringIO()
    w = csv.writer(merged, lineterminator="\n")
    w.writerow(_CONFIG_COLS + _BASE_COLS + loss_cols)
    groups: dict = {}
    for run_dir, summary, rows in runs:
        rel = run_dir.relative_to(root).as_posix() or "."
        head = [rel, summary.get("label", ""), _strategy(summary), summary.get("seed", "")]
        for r in rows:
            w.writerow(head + [r.get(c, "") for c in _BASE_COLS] + [r.get(c, "") for c in loss_cols])
        if rows:
            group = run_dir.parent.relative_to(root).as_posix() if run_dir != root else "."
            groups.setdefault(group, []).append((head, rows[-1]))
    out = Path(args.out)
    _write(out, merged.getvalue())
    agg = io.StringIO()
    w = csv.writer(agg, lineterminator="\n")
    w.writerow(["group", "label", "strategy", "runs", "mean_final_test_acc", "std_final_test_acc",
                "mean_final_train_acc", "std_final_train_acc"])
    for group in sorted(groups):
        members = groups[group]
        test = np.asarray([float(last["test_acc"]) for _, last in members])
        train = np.asarray([float(last["train_acc"]) for _, last in members])
        head = members[0][0]
        w.writerow([group, head[1], head[2], len(members), "%.17g" % test.mean(), "%.17g" % test.std(),
                    "%.17g" % train.mean(), "%.17g" % train.std()])
    _write(aggregate_path(out), agg.getvalue())
    print(f"merged {len(runs)} run(s) into {out}")
    return EXIT_OK


def aggregate_path(out: Path) -> Path:
    return out.with_name(out.stem + "_aggregate" + (out.suffix or ".csv"))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distill-lab", description="Desk-scale knowledge distillation lab.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic train/test pair as CSV")
    g.add_argument("--kind", choices=["blobs", "spirals"], required=True)
    g.add_argument("--classes", type=int, default=D.CANONICAL_SPIRALS["classes"])
    g.add_argument("--n", type=int, default=D.CANONICAL_SPIRALS["per_class"], help="points per class per split")
    g.add_argument("--noise", type=float, default=D.CANONICAL_SPIRALS["noise"],
                   help="spiral noise, or cluster spread for blobs")
    g.add_argument("--turns", type=float, default=D.CANONICAL_SPIRALS["turns"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--raw", action="store_true", help="skip train-split standardization")
    g.add_argument("--out", required=True, help="output directory for train.csv and test.csv")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="pretrain a teacher per seed")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="train a student per seed with the configured strategy")
    d.add_argument("--config", required=True)
    d.set_defaults(func=cmd_distill)

    pr = sub.add_parser("probe", help="evaluate the error-bound terms for a teacher/student pair")
    pr.add_argument("--teacher", required=True)
    pr.add_argument("--student", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--norm", choices=[k.value for k in NormKind], default="l1_prob")
    pr.add_argument("--connector")
    pr.add_argument("--onehot-scale", type=float, default=1.0)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("sweep", help="single-axis ablation sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", action="append", required=True,
                   help="alpha_ce[=v,...] | loss_comb | matching_loss | connector_depth[=d,...]")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="merge per-epoch metrics of every run under a directory")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (DivergenceError, NonFiniteError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ParseError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DistillLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
