"""Command-line harness.

Subcommands cover the whole pipeline: generate data, train checkpoints,
merge them with any method, evaluate, certify the theory numerically, scan
landscapes, sweep knobs, and reproduce the full artifact bundle.

Exit codes: 0 when the run and all its gates pass, 2 when a measured gate or
certified inequality fails, 1 on usage errors (bad flags, missing files,
invalid values). Every command writes its artifacts under --out along with a
manifest.json of content digests; fixed seeds give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import sys
from pathlib import Path

from . import bounds as bl
from .artifacts import write_csv, write_manifest
from .datasets import (
    default_specs,
    finetune_task,
    gen_suite,
    load_suite,
    pretrain,
    save_suite,
)
from .harness import (
    ExperimentConfig,
    GateError,
    K_VALUES,
    LAM_INIT_VALUES,
    Pipeline,
    check_specialization,
    merge_with_method,
    reproduce_figures,
    result_rows_csv,
    samerging_model,
    adamerging_model,
    sweep_k,
    sweep_lambda_init,
    sweep_rho,
)
from .bounds import landscape_scan
from .nn import accuracy, load_params, save_params
from .task_vectors import compute_task_vector

USAGE_EXIT = 1
GATE_EXIT = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the harness reserves 2 for
    # failed gates, so usage problems are remapped to 1.
    def error(self, message):
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


# --- config plumbing ----------------------------------------------------------

_CFG_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_TUPLE_FIELDS = ("seeds", "sweep_values", "methods")


def _load_config(path):
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ValueError("config JSON must be an object")
    unknown = set(obj) - set(_CFG_FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS:
        if key in obj:
            obj[key] = tuple(obj[key])
    return obj


def _build_cfg(args, **overrides):
    values = {}
    if getattr(args, "config", None):
        values.update(_load_config(args.config))
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    return ExperimentConfig(**values)


def _parse_seeds(text):
    return tuple(int(s) for s in text.split(","))


def _parse_values(text):
    return tuple(float(s) for s in text.split(","))


def _parse_grid(text):
    """'a0:a1:n' or 'a0:a1:n,b0:b1:m' -> ((a0,a1,n,b0,b1,m), is_2d)."""
    parts = text.split(",")
    if len(parts) not in (1, 2):
        raise ValueError("grid must be 'a0:a1:n' or 'a0:a1:n,b0:b1:m'")

    def axis(s):
        m = re.fullmatch(r"([^:]+):([^:]+):(\d+)", s)
        if not m:
            raise ValueError(f"bad grid axis {s!r}")
        return float(m.group(1)), float(m.group(2)), int(m.group(3))

    a0, a1, na = axis(parts[0])
    if len(parts) == 2:
        b0, b1, nb = axis(parts[1])
        return (a0, a1, na, b0, b1, nb), True
    return (a0, a1, na, 0.0, 0.0, 1), False


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint_set(ckpt_dir):
    """pretrained.json plus task{t}.json in index order; errors name the
    first missing file."""
    root = Path(ckpt_dir)
    pre_path = root / "pretrained.json"
    if not pre_path.exists():
        raise FileNotFoundError(f"missing checkpoint: {pre_path}")
    theta0, specs = load_params(pre_path)
    indices = sorted(
        int(m.group(1))
        for p in root.glob("task*.json")
        if (m := re.fullmatch(r"task(\d+)\.json", p.name))
    )
    if not indices:
        raise FileNotFoundError(f"no task checkpoints (task0.json, ...) in {root}")
    if indices != list(range(len(indices))):
        raise FileNotFoundError(
            f"missing checkpoint: {root / f'task{next(i for i in range(len(indices) + 1) if i not in indices)}.json'}"
        )
    finetuned = []
    for t in indices:
        theta_t, specs_t = load_params(root / f"task{t}.json")
        if specs_t != specs:
            raise ValueError(f"task{t}.json architecture differs from pretrained.json")
        finetuned.append(theta_t)
    return theta0, finetuned, specs


# --- subcommands --------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _build_cfg(
        args,
        n_tasks=args.T,
        n_classes=args.C,
        dim=args.d,
        n_train=args.n_train,
        n_test=args.n_test,
        n_calib=args.n_calib,
        sep=args.sep,
        noise=args.noise,
    )
    suite = gen_suite(
        n_tasks=cfg.n_tasks,
        n_classes=cfg.n_classes,
        dim=cfg.dim,
        n_train=cfg.n_train,
        n_test=cfg.n_test,
        n_calib=cfg.n_calib,
        seed=args.seed,
        sep=cfg.sep,
        noise=cfg.noise,
        task_spread=cfg.task_spread,
    )
    out = save_suite(suite, _out_dir(args))
    print(f"wrote {suite.n_tasks}-task suite to {out}")
    return 0


def cmd_finetune(args):
    suite = load_suite(args.data)
    specs = default_specs(suite.dim, suite.n_classes)
    out = _out_dir(args)
    pre_path = out / "pretrained.json"

    def train_pretrained():
        epochs = args.epochs if args.epochs is not None else 3
        theta0, _ = pretrain(suite, specs, epochs=epochs, seed=10_000 + args.seed)
        save_params(pre_path, theta0, specs)
        print(f"wrote {pre_path}")
        return theta0

    if args.task == "pretrain":
        train_pretrained()
        write_manifest(out)
        return 0

    if args.init:
        theta0, specs_init = load_params(args.init)
        if specs_init != tuple(specs):
            raise ValueError(f"{args.init} architecture does not match the suite")
    elif pre_path.exists():
        theta0, _ = load_params(pre_path)
    elif args.task == "all":
        theta0 = train_pretrained()
    else:
        raise FileNotFoundError(f"missing checkpoint: {pre_path} (run --task pretrain first)")

    tasks = range(suite.n_tasks) if args.task == "all" else [int(args.task)]
    epochs = args.epochs if args.epochs is not None else 30
    failures = []
    for t in tasks:
        if not 0 <= t < suite.n_tasks:
            raise ValueError(f"task index {t} out of range (suite has {suite.n_tasks})")
        theta_t, _ = finetune_task(
            theta0, specs, suite.tasks[t], epochs=epochs, seed=20_000 + 100 * args.seed + t
        )
        save_params(out / f"task{t}.json", theta_t, specs)
        base = accuracy(theta0, specs, suite.tasks[t].test)
        fine = accuracy(theta_t, specs, suite.tasks[t].test)
        print(f"task {t}: accuracy {fine:.3f} (start {base:.3f})")
        if fine < base + 0.10:
            failures.append(t)
    write_manifest(out)
    if failures:
        raise GateError(f"tasks {failures}: fine-tuning did not clear the +10 point gate")
    return 0


_DATA_FREE_METHODS = ("avg", "ta", "ties")


def cmd_merge(args):
    theta0, finetuned, specs = _load_checkpoint_set(args.checkpoints)
    taus = [compute_task_vector(theta0, t) for t in finetuned]
    suite = None
    if args.data:
        suite = load_suite(args.data)
        if suite.n_tasks != len(finetuned):
            raise ValueError(
                f"{len(finetuned)} checkpoints but the suite has {suite.n_tasks} tasks"
            )
        check_specialization(suite, list(specs), theta0, finetuned)
    elif args.method not in _DATA_FREE_METHODS:
        raise ValueError(f"method {args.method!r} needs --data for statistics/calibration")

    cfg = _build_cfg(
        args,
        n_tasks=len(finetuned),
        k=args.k,
        epochs=args.epochs,
        ta_scale=args.scale,
        ties_keep=args.keep_fraction,
        fisher_floor=args.fisher_floor,
        rho_off=args.rho_off,
        rho=args.rho,
        lr=args.lr,
        lam_init_sam=args.lam_init if args.method == "samerging" else None,
        lam_init_ada=args.lam_init if args.method == "adamerging" else None,
    )
    if args.method == "ties" and args.scale is not None:
        cfg = dataclasses.replace(cfg, ties_scale=args.scale)
    pl = Pipeline(
        cfg=cfg,
        seed=args.seed,
        suite=suite,
        specs=list(specs),
        theta0=theta0,
        finetuned=finetuned,
        taus=taus,
        finetuned_acc=(),
    )
    out = _out_dir(args)
    merged = merge_with_method(args.method, pl)
    save_params(out / "merged.json", merged, specs)
    if args.method in ("samerging", "adamerging"):
        model = samerging_model if args.method == "samerging" else adamerging_model
        coeffs, log, _ = model(pl)
        coeffs.save(out / "coefficients.json")
        (out / "trainlog.csv").write_text(log.to_csv())
    write_manifest(out)
    print(f"wrote {out / 'merged.json'} ({args.method})")
    return 0


def cmd_eval(args):
    suite = load_suite(args.data)
    theta, specs = load_params(args.checkpoint)
    specs = list(specs)
    name = Path(args.checkpoint).stem
    accs = [accuracy(theta, specs, task.test) for task in suite.tasks]
    avg = sum(accs) / len(accs)
    rows = [[name, f"task{t}", a] for t, a in enumerate(accs)]
    rows.append([name, "avg", avg])
    if args.checkpoints:
        theta0, finetuned, specs_ck = _load_checkpoint_set(args.checkpoints)
        if list(specs_ck) != specs:
            raise ValueError("checkpoint architectures differ")
        fine = [
            accuracy(finetuned[t], specs, suite.tasks[t].test) for t in range(suite.n_tasks)
        ]
        rows.append([name, "normalized_avg", avg / (sum(fine) / len(fine))])
    out = _out_dir(args)
    write_csv(out / "eval.csv", "eval-v1", ["checkpoint", "task", "accuracy"], rows)
    write_manifest(out)
    for row in rows:
        print(f"{row[1]}: {row[2]:.4f}")
    return 0


def _bound_rows(reports):
    rows = []
    for i, rep in enumerate(reports):
        rows.append(
            [i, rep.lhs, rep.rhs, rep.slack, rep.mc_se, int(rep.ok)]
            + [rep.components[k] for k in rep.components]
        )
    return rows


def cmd_bounds(args):
    out = _out_dir(args)
    check = args.check
    trials = args.trials
    if check == "pertask":
        reports = bl.per_task_trials(trials=trials, seed=args.seed)
        write_csv(
            out / "bounds_pertask.csv",
            "bounds-v1",
            ["trial", "lhs", "rhs", "slack", "mc_se", "holds", "empirical", "complexity", "flatness"],
            _bound_rows(reports),
        )
        held = sum(r.ok for r in reports) / len(reports)
        print(f"pertask: {held:.1%} of {trials} trials hold")
        write_manifest(out)
        if held < 0.95:
            raise GateError(f"per-task bound held in only {held:.1%} of trials")
    elif check == "merged":
        reports = bl.merged_trials(trials=trials, seed=args.seed)
        write_csv(
            out / "bounds_merged.csv",
            "bounds-v1",
            ["trial", "lhs", "rhs", "slack", "mc_se", "holds",
             "per_task", "mixture_gap", "dispersion", "quadratic"],
            _bound_rows(reports),
        )
        held = sum(r.ok for r in reports) / len(reports)
        print(f"merged: {held:.1%} of {trials} trials hold")
        write_manifest(out)
        if held < 0.95:
            raise GateError(f"merged bound held in only {held:.1%} of trials")
    elif check == "excess":
        reports = bl.excess_trials(trials=trials, seed=args.seed)
        write_csv(
            out / "bounds_excess.csv",
            "bounds-v1",
            ["trial", "lhs", "rhs", "slack", "mc_se", "holds", "fit", "teacher"],
            _bound_rows(reports),
        )
        violations = sum(r.slack < -1e-12 for r in reports)
        print(f"excess: {violations} violations in {trials} trials")
        write_manifest(out)
        if violations:
            raise GateError(f"excess-risk bound violated {violations} times")
    elif check == "pinsker":
        violations, worst = bl.pinsker_trials(trials=trials, seed=args.seed)
        write_csv(
            out / "bounds_pinsker.csv",
            "bounds-v1",
            ["trials", "violations", "worst_gap"],
            [[trials, violations, worst]],
        )
        print(f"pinsker: {violations} violations in {trials} trials (worst gap {worst:.2e})")
        write_manifest(out)
        if violations:
            raise GateError(f"Pinsker violated {violations} times")
    else:  # decomposition
        residuals = bl.decomposition_trials(trials=trials, seed=args.seed)
        write_csv(
            out / "bounds_decomposition.csv",
            "bounds-v1",
            ["trial", "residual"],
            [[i, r] for i, r in enumerate(residuals)],
        )
        worst = max(residuals)
        print(f"decomposition: worst residual {worst:.2e} over {trials} trials")
        write_manifest(out)
        if worst >= 1e-10:
            raise GateError(f"decomposition residual {worst:.2e} exceeds 1e-10")
    return 0


def cmd_landscape(args):
    suite = load_suite(args.data)
    theta0, finetuned, specs = _load_checkpoint_set(args.checkpoints)
    specs = list(specs)
    center, specs_c = load_params(args.center)
    if list(specs_c) != specs:
        raise ValueError("center checkpoint architecture differs")
    taus = [compute_task_vector(theta0, t) for t in finetuned]
    d_a, d_b = (int(s) for s in args.dirs.split(","))
    for d in (d_a, d_b):
        if not 0 <= d < len(taus):
            raise ValueError(f"direction index {d} out of range")
    grid, is_2d = _parse_grid(args.grid)
    eval_batches = [task.test for task in suite.tasks]
    a_vals, b_vals, losses = landscape_scan(
        center, specs, taus[d_a], taus[d_b] if is_2d else None, grid, eval_batches
    )
    out = _out_dir(args)
    if is_2d:
        rows = [
            [a_vals[i], b_vals[j], losses[i, j]]
            for i in range(len(a_vals))
            for j in range(len(b_vals))
        ]
        write_csv(out / "landscape.csv", "landscape-v1", ["a", "b", "loss"], rows)
    else:
        rows = [[a_vals[i], losses[i, 0]] for i in range(len(a_vals))]
        write_csv(out / "landscape.csv", "landscape-v1", ["a", "loss"], rows)
    write_manifest(out)
    print(f"wrote {out / 'landscape.csv'} ({len(a_vals)}x{len(b_vals)} cells)")
    return 0


def cmd_sweep(args):
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    cfg = _build_cfg(args, k=args.k, epochs=args.epochs, seeds=seeds)
    out = _out_dir(args)
    if args.axis == "lam_init":
        inits = _parse_values(args.values) if args.values else LAM_INIT_VALUES
        rows, ranges = sweep_lambda_init(cfg, inits=inits)
        extra = [[m, v] for m, v in sorted(ranges.items())]
        extra_header = ["method", "accuracy_range"]
    elif args.axis == "k":
        ks = tuple(int(v) for v in _parse_values(args.values)) if args.values else K_VALUES
        rows, medians = sweep_k(cfg, ks=ks)
        extra = [[m, k, v] for (m, k), v in sorted(medians.items())]
        extra_header = ["method", "k", "median_avg_accuracy"]
    else:  # rho
        rhos = _parse_values(args.values) if args.values else (0.0, 0.01, 0.03, 0.07, 0.15)
        rows, medians = sweep_rho(cfg, rhos=rhos)
        extra = [[r, v] for r, v in sorted(medians.items())]
        extra_header = ["rho", "median_avg_accuracy"]
    result_rows_csv(out / "sweep.csv", rows, cfg.n_tasks, schema="sweep-v1")
    write_csv(out / "sweep_summary.csv", "sweep-v1", extra_header, extra)
    write_manifest(out)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def cmd_reproduce(args):
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    cfg = _build_cfg(args, seeds=seeds)
    out = reproduce_figures(cfg, _out_dir(args), include_timings=args.timings)
    n_files = len(list(Path(out).glob("*")))
    print(f"wrote {n_files} artifacts to {out}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="mergelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic multi-task suite")
    p.add_argument("--T", type=int, default=None, help="number of tasks")
    p.add_argument("--C", type=int, default=None, help="classes per task")
    p.add_argument("--d", type=int, default=None, help="input dimension")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--n-calib", type=int, default=None)
    p.add_argument("--sep", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("finetune", help="train the shared start and per-task checkpoints")
    p.add_argument("--data", required=True, help="suite directory from gen-data")
    p.add_argument("--task", required=True, help="'pretrain', 'all', or a task index")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default=None, help="starting checkpoint (default: <out>/pretrained.json)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("merge", help="merge checkpoints with one method")
    p.add_argument(
        "--method",
        required=True,
        choices=["avg", "ta", "ties", "fisher", "regmean", "adamerging", "samerging"],
    )
    p.add_argument("--checkpoints", required=True, help="directory with pretrained.json, task*.json")
    p.add_argument("--data", default=None, help="suite directory (needed by data-dependent methods)")
    p.add_argument("--scale", type=float, default=None, help="task-arithmetic / trim-merge scale")
    p.add_argument("--keep-fraction", type=float, default=None, help="trim fraction kept")
    p.add_argument("--fisher-floor", type=float, default=None)
    p.add_argument("--rho-off", type=float, default=None, help="off-diagonal Gram weight")
    p.add_argument("--rho", type=float, default=None, help="perturbation radius")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="calibration inputs per task")
    p.add_argument("--lam-init", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every task's test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--checkpoints", default=None, help="fine-tuned set for normalized accuracy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bounds", help="run a randomized certification sweep")
    p.add_argument(
        "--check",
        required=True,
        choices=["decomposition", "pertask", "merged", "excess", "pinsker"],
    )
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("landscape", help="grid-scan the loss around a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--center", required=True, help="checkpoint at the grid origin")
    p.add_argument("--dirs", default="0,1", help="task-vector direction indices, e.g. 0,1")
    p.add_argument("--grid", required=True, help="a0:a1:n or a0:a1:n,b0:b1:m")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("sweep", help="sweep one knob across seeds")
    p.add_argument("--axis", required=True, choices=["lam_init", "k", "rho"])
    p.add_argument("--values", default=None, help="comma-separated sweep values")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="write the full deterministic artifact bundle")
    p.add_argument("--seeds", default=None)
    p.add_argument("--timings", action="store_true", help="also write the wall-clock sidecar")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GateError as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return GATE_EXIT
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
