"""Experiment orchestration: build suites, train checkpoints, run every
merging method, sweep the knobs that matter, and write deterministic
artifacts.

Pipelines (suite + checkpoints + task vectors for one config and seed) and
coefficient fits are cached in-process, so sweeps that revisit a setting pay
for it once. All CSV output carries a schema_version column and renders
floats with repr, which round-trips exactly; rerunning a command reproduces
every byte. Wall-clock timings are kept on the in-memory rows only and never
written into the deterministic artifacts (an opt-in sidecar exists and is
excluded from the manifest).
"""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bounds as bl
from .adaptive import fit_coefficients, teacher_distributions
from .artifacts import write_csv, write_manifest
from .bounds import flatness_proxy, landscape_scan
from .datasets import (
    SyntheticSuite,
    default_specs,
    finetune_task,
    gen_suite,
    pretrain,
    sample_calibration,
)
from .nn import Batch, ParamSet, accuracy
from .static_mergers import (
    FisherConfig,
    TiesConfig,
    collect_gram_stats,
    estimate_diag_fisher,
    fisher_merge,
    regmean_merge,
    simple_average,
    task_arithmetic,
    ties_merge,
)
from .task_vectors import compute_task_vector, merge_params

METHOD_ORDER = (
    "pretrained",
    "finetuned",
    "avg",
    "ta",
    "ties",
    "fisher",
    "regmean",
    "adamerging",
    "samerging",
)

# One-factor-at-a-time grid over objective and optimizer. Coefficient init
# and weight decay ride along with the objective so the optimizer axis
# isolates the perturbation step; the corner variants coincide exactly with
# the two named methods.
ABLATION_VARIANTS = {
    "kl_sam": dict(objective="kl", rho=0.07, lam_init=0.0, weight_decay=5e-4),
    "kl_adam": dict(objective="kl", rho=0.0, lam_init=0.0, weight_decay=5e-4),
    "entropy_sam": dict(objective="entropy", rho=0.07, lam_init=0.3, weight_decay=0.0),
    "entropy_adam": dict(objective="entropy", rho=0.0, lam_init=0.3, weight_decay=0.0),
}

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
LAM_INIT_VALUES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
K_VALUES = (4, 16, 64, 256, 1024)


class GateError(AssertionError):
    """A measured precondition of the experiment protocol failed."""


def check_specialization(suite, specs, theta0, finetuned, margin=0.10):
    """Every fine-tuned checkpoint must beat the starting point on its own
    task by at least `margin` accuracy. Run before any merging experiment."""
    for t, task in enumerate(suite.tasks):
        base = accuracy(theta0, specs, task.test)
        fine = accuracy(finetuned[t], specs, task.test)
        if fine < base + margin:
            raise GateError(
                f"task {t}: fine-tuned accuracy {fine:.3f} does not beat the "
                f"starting point {base:.3f} by {margin:.2f}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    """One declarative run description; hashable so results can be cached."""

    n_tasks: int = 8
    n_classes: int = 4
    dim: int = 16
    n_train: int = 2000
    n_test: int = 1000
    n_calib: int = 512
    k: int = 16
    epochs: int = 700
    pretrain_epochs: int = 3
    finetune_epochs: int = 30
    sep: float = 6.0
    noise: float = 1.0
    task_spread: float = 0.25
    stats_samples: int = 1600
    seeds: tuple = DEFAULT_SEEDS
    sweep_axis: str = "none"  # none | lam_init | k | rho
    sweep_values: tuple = ()
    methods: tuple = ("avg", "ta", "ties", "fisher", "regmean", "adamerging", "samerging")
    # Per-method settings.
    ta_scale: float = 0.2
    ties_keep: float = 0.2
    ties_scale: float = 0.4
    fisher_floor: float = 1e-6
    rho_off: float = 0.6
    rho: float = 0.07
    lr: float = 1e-3
    sam_weight_decay: float = 5e-4
    lam_init_sam: float = 0.0
    lam_init_ada: float = 0.3
    enforce_gate: bool = True

    def __post_init__(self):
        if not self.methods:
            raise ValueError("need at least one method")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.sweep_axis not in ("none", "lam_init", "k", "rho"):
            raise ValueError(f"unknown sweep axis {self.sweep_axis!r}")
        if any(not np.isfinite(v) for v in self.sweep_values):
            raise ValueError("sweep values must be finite")


@dataclass
class ResultRow:
    method: str
    seed: int
    accuracies: tuple
    avg_accuracy: float
    normalized_accuracy: float
    flatness: float
    sweep_value: str = ""
    wall_time: float = 0.0  # in-memory diagnostic; never serialized


@dataclass
class Pipeline:
    """Everything derived from one (config, seed): data, checkpoints, task
    vectors, calibration batches, and teacher outputs."""

    cfg: ExperimentConfig
    seed: int
    suite: SyntheticSuite
    specs: list
    theta0: ParamSet
    finetuned: list
    taus: list
    finetuned_acc: tuple
    calibs: dict = field(default_factory=dict)
    teacher_probs: dict = field(default_factory=dict)

    def calibration(self, k):
        if k not in self.calibs:
            self.calibs[k] = sample_calibration(self.suite, k=k, seed=30_000 + self.seed)
        return self.calibs[k]

    def teachers_on(self, k):
        if k not in self.teacher_probs:
            self.teacher_probs[k] = teacher_distributions(
                self.finetuned, self.specs, self.calibration(k)
            )
        return self.teacher_probs[k]


_PIPELINES: dict = {}
_FITS: dict = {}


def clear_caches():
    _PIPELINES.clear()
    _FITS.clear()


def build_pipeline(cfg: ExperimentConfig, seed: int) -> Pipeline:
    key = (cfg, seed)
    if key in _PIPELINES:
        return _PIPELINES[key]
    suite = gen_suite(
        n_tasks=cfg.n_tasks,
        n_classes=cfg.n_classes,
        dim=cfg.dim,
        n_train=cfg.n_train,
        n_test=cfg.n_test,
        n_calib=cfg.n_calib,
        seed=seed,
        sep=cfg.sep,
        noise=cfg.noise,
        task_spread=cfg.task_spread,
    )
    specs = default_specs(cfg.dim, cfg.n_classes)
    theta0, _ = pretrain(suite, specs, epochs=cfg.pretrain_epochs, seed=10_000 + seed)
    finetuned = []
    for t, task in enumerate(suite.tasks):
        theta_t, _ = finetune_task(
            theta0, specs, task, epochs=cfg.finetune_epochs, seed=20_000 + 100 * seed + t
        )
        finetuned.append(theta_t)
    taus = [compute_task_vector(theta0, theta_t) for theta_t in finetuned]
    if cfg.enforce_gate:
        check_specialization(suite, specs, theta0, finetuned)
    fine_acc = tuple(
        accuracy(finetuned[t], specs, suite.tasks[t].test) for t in range(cfg.n_tasks)
    )
    pl = Pipeline(
        cfg=cfg,
        seed=seed,
        suite=suite,
        specs=specs,
        theta0=theta0,
        finetuned=finetuned,
        taus=taus,
        finetuned_acc=fine_acc,
    )
    _PIPELINES[key] = pl
    return pl


def evaluate_model(theta: ParamSet, pl: Pipeline, method: str, sweep_value="", wall_time=0.0):
    accs = tuple(accuracy(theta, pl.specs, task.test) for task in pl.suite.tasks)
    avg = float(np.mean(accs))
    norm = avg / float(np.mean(pl.finetuned_acc))
    flat = float(
        np.mean([flatness_proxy(theta, pl.specs, task.test, "ce") for task in pl.suite.tasks])
    )
    return ResultRow(
        method=method,
        seed=pl.seed,
        accuracies=accs,
        avg_accuracy=avg,
        normalized_accuracy=norm,
        flatness=flat,
        sweep_value=str(sweep_value),
        wall_time=wall_time,
    )


def fit_adaptive(
    pl: Pipeline,
    objective: str,
    rho: float,
    lam_init: float,
    weight_decay: float,
    k=None,
    epochs=None,
    omega=0.0,
    tie_groups=False,
):
    """Cached coefficient fit; returns (coefficients, train log, merged params)."""
    cfg = pl.cfg
    k = cfg.k if k is None else k
    epochs = cfg.epochs if epochs is None else epochs
    key = (cfg, pl.seed, objective, rho, lam_init, weight_decay, k, epochs, omega, tie_groups)
    if key in _FITS:
        return _FITS[key]
    batches = pl.calibration(k)
    coeffs, log = fit_coefficients(
        pl.theta0,
        pl.taus,
        pl.specs,
        batches,
        objective=objective,
        teachers=pl.finetuned if objective == "kl" else None,
        rho=rho,
        lam_init=lam_init,
        epochs=epochs,
        omega=omega,
        tie_groups=tie_groups,
        lr=cfg.lr,
        weight_decay=weight_decay,
    )
    merged = merge_params(pl.theta0, pl.taus, coeffs.values)
    _FITS[key] = (coeffs, log, merged)
    return _FITS[key]


def samerging_model(pl: Pipeline, k=None, epochs=None, lam_init=None, rho=None):
    cfg = pl.cfg
    rho = cfg.rho if rho is None else rho
    lam_init = cfg.lam_init_sam if lam_init is None else lam_init
    return fit_adaptive(pl, "kl", rho, lam_init, cfg.sam_weight_decay, k=k, epochs=epochs)


def adamerging_model(pl: Pipeline, k=None, epochs=None, lam_init=None):
    lam_init = pl.cfg.lam_init_ada if lam_init is None else lam_init
    return fit_adaptive(pl, "entropy", 0.0, lam_init, 0.0, k=k, epochs=epochs)


def merge_with_method(method: str, pl: Pipeline) -> ParamSet:
    """Run one merging method on a pipeline; returns the merged parameters."""
    cfg = pl.cfg
    if method == "avg":
        return simple_average(pl.finetuned)
    if method == "ta":
        return task_arithmetic(pl.theta0, pl.taus, scale=cfg.ta_scale)
    if method == "ties":
        return ties_merge(
            pl.theta0, pl.taus, TiesConfig(keep_fraction=cfg.ties_keep, scale=cfg.ties_scale)
        )
    if method == "fisher":
        fishers = []
        for t, theta_t in enumerate(pl.finetuned):
            train = pl.suite.tasks[t].train
            n = min(cfg.stats_samples, len(train))
            batch = Batch(inputs=train.inputs[:n], labels=None)
            fishers.append(
                estimate_diag_fisher(
                    theta_t,
                    pl.specs,
                    batch,
                    FisherConfig(floor=cfg.fisher_floor),
                    seed=40_000 + 100 * pl.seed + t,
                )
            )
        return fisher_merge(pl.finetuned, fishers)
    if method == "regmean":
        grams = []
        for t, theta_t in enumerate(pl.finetuned):
            train = pl.suite.tasks[t].train
            n = min(cfg.stats_samples, len(train))
            grams.append(collect_gram_stats(theta_t, pl.specs, train.inputs[:n]))
        return regmean_merge(pl.finetuned, grams, rho_off=cfg.rho_off)
    if method == "adamerging":
        return adamerging_model(pl)[2]
    if method == "samerging":
        return samerging_model(pl)[2]
    raise ValueError(f"unknown method {method!r}")


def _sorted_rows(rows):
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    return sorted(
        rows, key=lambda r: (order.get(r.method, len(order)), r.method, r.sweep_value, r.seed)
    )


def run_comparison(cfg: ExperimentConfig, seeds=None):
    """All methods on all seeds. Returns rows sorted by (method, seed)."""
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for seed in seeds:
        pl = build_pipeline(cfg, seed)
        rows.append(evaluate_model(pl.theta0, pl, "pretrained"))
        fine_flat = float(
            np.mean(
                [
                    flatness_proxy(pl.finetuned[t], pl.specs, pl.suite.tasks[t].test, "ce")
                    for t in range(cfg.n_tasks)
                ]
            )
        )
        rows.append(
            ResultRow(
                method="finetuned",
                seed=seed,
                accuracies=pl.finetuned_acc,
                avg_accuracy=float(np.mean(pl.finetuned_acc)),
                normalized_accuracy=1.0,
                flatness=fine_flat,
            )
        )
        for method in cfg.methods:
            start = time.perf_counter()
            merged = merge_with_method(method, pl)
            elapsed = time.perf_counter() - start
            rows.append(evaluate_model(merged, pl, method, wall_time=elapsed))
    return _sorted_rows(rows)


def median_by_method(rows, attr="avg_accuracy"):
    byname = {}
    for row in rows:
        byname.setdefault(row.method, []).append(getattr(row, attr))
    return {m: statistics.median(v) for m, v in byname.items()}


def sweep_lambda_init(cfg: ExperimentConfig, inits=LAM_INIT_VALUES, seeds=None):
    """Final accuracy of both adaptive methods across coefficient inits.

    Returns (rows, ranges): one row per (method, init, seed); ranges maps
    method to max - min of the median accuracy over inits.
    """
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for seed in seeds:
        pl = build_pipeline(cfg, seed)
        for init in inits:
            for method in ("adamerging", "samerging"):
                if method == "samerging":
                    merged = samerging_model(pl, lam_init=init)[2]
                else:
                    merged = adamerging_model(pl, lam_init=init)[2]
                rows.append(evaluate_model(merged, pl, method, sweep_value=init))
    # Sensitivity as a user sees it: spread across inits within one run,
    # summarized by the median run. Pooling across seeds first would let
    # seed-to-seed drift mask (or fake) init sensitivity.
    ranges = {}
    for method in ("adamerging", "samerging"):
        per_seed = []
        for seed in seeds:
            vals = [
                r.avg_accuracy
                for r in rows
                if r.method == method and r.seed == seed
            ]
            per_seed.append(max(vals) - min(vals))
        ranges[method] = statistics.median(per_seed)
    return _sorted_rows(rows), ranges


def sweep_k(cfg: ExperimentConfig, ks=K_VALUES, seeds=None, methods=("adamerging", "samerging")):
    """Calibration-size sweep for the adaptive methods.

    The calibration pool is widened to the largest k if needed; every other
    split is unaffected because each draws from its own seed stream.

    Returns (rows, medians) where medians maps (method, k) to the median
    average accuracy over seeds.
    """
    seeds = cfg.seeds if seeds is None else seeds
    if max(ks) > cfg.n_calib:
        cfg = dataclasses.replace(cfg, n_calib=max(ks))
    rows = []
    for seed in seeds:
        pl = build_pipeline(cfg, seed)
        for k in ks:
            for method in methods:
                if method == "samerging":
                    merged = samerging_model(pl, k=k)[2]
                else:
                    merged = adamerging_model(pl, k=k)[2]
                rows.append(evaluate_model(merged, pl, method, sweep_value=k))
    medians = {}
    for method in methods:
        for k in ks:
            vals = [
                r.avg_accuracy for r in rows if r.method == method and r.sweep_value == str(k)
            ]
            medians[(method, k)] = statistics.median(vals)
    return _sorted_rows(rows), medians


def sweep_rho(cfg: ExperimentConfig, rhos=(0.0, 0.01, 0.03, 0.07, 0.15), seeds=None):
    """Perturbation-radius sweep for the distillation fit."""
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for seed in seeds:
        pl = build_pipeline(cfg, seed)
        for rho in rhos:
            merged = samerging_model(pl, rho=rho)[2]
            rows.append(evaluate_model(merged, pl, "samerging", sweep_value=rho))
    medians = {
        rho: statistics.median(
            [r.avg_accuracy for r in rows if r.sweep_value == str(rho)]
        )
        for rho in rhos
    }
    return _sorted_rows(rows), medians


def ablate_kl_sam(cfg: ExperimentConfig, seeds=None):
    """2x2 objective/optimizer grid; returns (rows, medians by variant)."""
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for seed in seeds:
        pl = build_pipeline(cfg, seed)
        for name, knobs in ABLATION_VARIANTS.items():
            merged = fit_adaptive(
                pl,
                knobs["objective"],
                knobs["rho"],
                knobs["lam_init"],
                knobs["weight_decay"],
            )[2]
            rows.append(evaluate_model(merged, pl, name))
    medians = {
        name: statistics.median([r.avg_accuracy for r in rows if r.method == name])
        for name in ABLATION_VARIANTS
    }
    return sorted(rows, key=lambda r: (r.method, r.seed)), medians


# --- deterministic artifact writing -------------------------------------------


def result_rows_csv(path, rows, n_tasks, schema="results-v1"):
    header = (
        ["method", "seed", "sweep_value"]
        + [f"acc_task{t}" for t in range(n_tasks)]
        + ["avg_accuracy", "normalized_accuracy", "flatness"]
    )
    body = [
        [
            r.method,
            r.seed,
            r.sweep_value,
            *r.accuracies,
            r.avg_accuracy,
            r.normalized_accuracy,
            r.flatness,
        ]
        for r in rows
    ]
    return write_csv(path, schema, header, body)


def summary_csv(path, rows):
    med_acc = median_by_method(rows, "avg_accuracy")
    med_norm = median_by_method(rows, "normalized_accuracy")
    med_flat = median_by_method(rows, "flatness")
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    methods = sorted(med_acc, key=lambda m: (order.get(m, len(order)), m))
    body = [[m, med_acc[m], med_norm[m], med_flat[m]] for m in methods]
    return write_csv(
        path,
        "summary-v1",
        ["method", "median_avg_accuracy", "median_normalized_accuracy", "median_flatness"],
        body,
    )


def write_timings(out_dir, rows):
    """Optional wall-clock sidecar; inherently non-reproducible, so it is
    excluded from the manifest and from byte-equality expectations."""
    body = [[r.method, r.seed, r.wall_time] for r in rows]
    return write_csv(
        Path(out_dir) / "timings.csv", "timings-v1", ["method", "seed", "seconds"], body
    )


# --- figure-style reproduction bundle ------------------------------------------


def _bound_report_rows(reports):
    rows = []
    for i, rep in enumerate(reports):
        rows.append(
            [i, rep.lhs, rep.rhs, rep.slack, rep.mc_se, int(rep.ok)]
            + [rep.components[k] for k in rep.components]
        )
    return rows


def _landscape_files(out, tag, center, pl, grid_spec=(-1.0, 1.0, 9)):
    """2-d grid plus both 1-d axis slices around one solution, along the
    first two task-vector directions."""
    eval_batches = [task.test for task in pl.suite.tasks]
    a0, a1, n = grid_spec
    a_vals, b_vals, grid = landscape_scan(
        center, pl.specs, pl.taus[0], pl.taus[1], (a0, a1, n, a0, a1, n), eval_batches
    )
    write_csv(
        out / f"landscape_2d_{tag}.csv",
        "landscape-v1",
        ["a", "b", "loss"],
        [
            [a_vals[i], b_vals[j], grid[i, j]]
            for i in range(len(a_vals))
            for j in range(len(b_vals))
        ],
    )
    for axis, direction in (("a", pl.taus[0]), ("b", pl.taus[1])):
        vals, _, line = landscape_scan(
            center, pl.specs, direction, None, (a0, a1, 2 * n + 1, 0.0, 0.0, 1), eval_batches
        )
        write_csv(
            out / f"landscape_slice_{tag}_{axis}.csv",
            "landscape-v1",
            [axis, "loss"],
            [[vals[i], line[i, 0]] for i in range(len(vals))],
        )


def reproduce_figures(cfg: ExperimentConfig, out_dir, seeds=None, include_timings=False):
    """Write the full deterministic artifact bundle under out_dir.

    Covers the method comparison, the coefficient-init and calibration-size
    sweeps, the objective/optimizer ablation, landscape grids and slices
    around both adaptive solutions, the flatness comparison, the bound-lab
    sweeps, and a manifest of sha256 digests. Returns the output directory.
    """
    seeds = cfg.seeds if seeds is None else seeds
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = run_comparison(cfg, seeds=seeds)
    result_rows_csv(out / "comparison.csv", rows, cfg.n_tasks)
    summary_csv(out / "comparison_summary.csv", rows)
    if include_timings:
        write_timings(out, rows)

    sweep_rows, ranges = sweep_lambda_init(cfg, seeds=seeds)
    result_rows_csv(out / "lambda_init_sweep.csv", sweep_rows, cfg.n_tasks, schema="sweep-v1")
    write_csv(
        out / "lambda_init_ranges.csv",
        "sweep-v1",
        ["method", "accuracy_range"],
        [[m, v] for m, v in sorted(ranges.items())],
    )

    k_rows, _ = sweep_k(cfg, seeds=seeds)
    result_rows_csv(out / "k_sweep.csv", k_rows, cfg.n_tasks, schema="sweep-v1")

    ab_rows, ab_medians = ablate_kl_sam(cfg, seeds=seeds)
    result_rows_csv(out / "ablation.csv", ab_rows, cfg.n_tasks, schema="ablation-v1")
    write_csv(
        out / "ablation_summary.csv",
        "ablation-v1",
        ["variant", "median_avg_accuracy"],
        [[name, ab_medians[name]] for name in ABLATION_VARIANTS],
    )

    # Flatness at the two adaptive solutions, one row per seed plus medians.
    flat_rows = [
        [r.method, r.seed, r.flatness]
        for r in rows
        if r.method in ("adamerging", "samerging")
    ]
    med_flat = median_by_method(
        [r for r in rows if r.method in ("adamerging", "samerging")], "flatness"
    )
    write_csv(
        out / "flatness.csv",
        "flatness-v1",
        ["method", "seed", "flatness"],
        flat_rows + [[m, "median", med_flat[m]] for m in sorted(med_flat)],
    )

    # Landscape grids and slices around both solutions for the first seed.
    pl = build_pipeline(cfg, seeds[0])
    sam_coeffs, sam_log, sam_merged = samerging_model(pl)
    ada_coeffs, _, ada_merged = adamerging_model(pl)
    sam_coeffs.save(out / "samerging_coefficients.json")
    ada_coeffs.save(out / "adamerging_coefficients.json")
    (out / "samerging_trainlog.csv").write_text(sam_log.to_csv())
    _landscape_files(out, "samerging", sam_merged, pl)
    _landscape_files(out, "adamerging", ada_merged, pl)

    # Bound-lab sweeps at the published trial counts.
    pertask = bl.per_task_trials(trials=100, seed=0)
    write_csv(
        out / "bounds_pertask.csv",
        "bounds-v1",
        ["trial", "lhs", "rhs", "slack", "mc_se", "holds", "empirical", "complexity", "flatness"],
        _bound_report_rows(pertask),
    )
    merged_reports = bl.merged_trials(trials=50, seed=1)
    write_csv(
        out / "bounds_merged.csv",
        "bounds-v1",
        [
            "trial",
            "lhs",
            "rhs",
            "slack",
            "mc_se",
            "holds",
            "per_task",
            "mixture_gap",
            "dispersion",
            "quadratic",
        ],
        _bound_report_rows(merged_reports),
    )
    excess_reports = bl.excess_trials(trials=1000, seed=2)
    write_csv(
        out / "bounds_excess.csv",
        "bounds-v1",
        ["trial", "lhs", "rhs", "slack", "mc_se", "holds", "fit", "teacher"],
        _bound_report_rows(excess_reports),
    )
    pv, worst = bl.pinsker_trials(trials=100000, seed=3)
    write_csv(
        out / "bounds_pinsker.csv",
        "bounds-v1",
        ["trials", "violations", "worst_gap"],
        [[100000, pv, worst]],
    )
    residuals = bl.decomposition_trials(trials=50, seed=4)
    write_csv(
        out / "bounds_decomposition.csv",
        "bounds-v1",
        ["trial", "residual"],
        [[i, r] for i, r in enumerate(residuals)],
    )

    write_manifest(out)
    return out
