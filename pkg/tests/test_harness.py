"""Orchestration: pipelines, caching, method dispatch, sweeps, artifacts."""

import json
import statistics

import numpy as np
import pytest

from mergelab.artifacts import read_csv
from mergelab.harness import (
    ABLATION_VARIANTS,
    ExperimentConfig,
    GateError,
    METHOD_ORDER,
    ResultRow,
    ablate_kl_sam,
    adamerging_model,
    build_pipeline,
    clear_caches,
    evaluate_model,
    fit_adaptive,
    median_by_method,
    merge_with_method,
    result_rows_csv,
    run_comparison,
    samerging_model,
    summary_csv,
    sweep_k,
    sweep_lambda_init,
    sweep_rho,
    write_timings,
)
from mergelab.task_vectors import merge_params

# Small enough to keep the whole module under a minute; the gate is off
# because 3-epoch fine-tuning on 2 easy tasks is about wiring, not science.
TINY = ExperimentConfig(
    n_tasks=2,
    n_classes=3,
    dim=6,
    n_train=200,
    n_test=150,
    n_calib=64,
    k=8,
    epochs=8,
    pretrain_epochs=2,
    finetune_epochs=3,
    stats_samples=200,
    seeds=(0, 1),
    enforce_gate=False,
)


@pytest.fixture(scope="module")
def pl():
    return build_pipeline(TINY, seed=0)


class TestConfig:
    def test_is_hashable_and_frozen(self):
        assert hash(TINY) == hash(ExperimentConfig(**{
            f: getattr(TINY, f) for f in TINY.__dataclass_fields__
        }))
        with pytest.raises(Exception):
            TINY.k = 4

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            ExperimentConfig(methods=())
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=())
        with pytest.raises(ValueError):
            ExperimentConfig(sweep_axis="banana")
        with pytest.raises(ValueError):
            ExperimentConfig(sweep_values=(float("nan"),))


class TestBuildPipeline:
    def test_second_call_returns_cached_object(self, pl):
        assert build_pipeline(TINY, seed=0) is pl

    def test_clear_caches_forces_rebuild(self):
        cfg = ExperimentConfig(**{**TINY.__dict__, "seeds": (9,)})
        a = build_pipeline(cfg, seed=9)
        clear_caches()
        assert build_pipeline(cfg, seed=9) is not a

    def test_contents(self, pl):
        assert len(pl.finetuned) == 2 and len(pl.taus) == 2
        assert len(pl.finetuned_acc) == 2
        assert pl.theta0.shape_signature() == pl.finetuned[0].shape_signature()
        batches = pl.calibration(8)
        assert len(batches) == 2 and batches[0].inputs.shape == (8, 6)
        probs = pl.teachers_on(8)
        assert len(probs) == 2 and probs[0].shape == (8, 3)
        assert pl.calibration(8) is batches

    def test_gate_fires_when_finetuning_does_nothing(self):
        cfg = ExperimentConfig(**{
            **TINY.__dict__, "finetune_epochs": 0, "enforce_gate": True, "seeds": (3,)
        })
        with pytest.raises(GateError):
            build_pipeline(cfg, seed=3)


class TestEvaluateAndMerge:
    def test_evaluate_model_fields(self, pl):
        row = evaluate_model(pl.theta0, pl, "pretrained", sweep_value=7)
        assert row.method == "pretrained" and row.seed == 0
        assert len(row.accuracies) == 2
        assert row.avg_accuracy == pytest.approx(float(np.mean(row.accuracies)))
        assert row.normalized_accuracy == pytest.approx(
            row.avg_accuracy / float(np.mean(pl.finetuned_acc))
        )
        assert row.flatness > 0.0
        assert row.sweep_value == "7"

    def test_avg_is_uniform_coefficient_merge(self, pl):
        direct = merge_with_method("avg", pl)
        lam = np.full((2, pl.taus[0].n_groups), 0.5)
        via_lambda = merge_params(pl.theta0, pl.taus, lam)
        assert direct.allclose(via_lambda, atol=1e-12, rtol=0.0)

    def test_every_method_dispatches(self, pl):
        for method in TINY.methods:
            merged = merge_with_method(method, pl)
            assert merged.shape_signature() == pl.theta0.shape_signature()
        with pytest.raises(ValueError):
            merge_with_method("slerp", pl)

    def test_ablation_corners_hit_the_named_method_cache(self, pl):
        # Same fit key means the cached tuple is literally the same object.
        assert fit_adaptive(pl, **ABLATION_VARIANTS["kl_sam"]) is samerging_model(pl)
        assert fit_adaptive(pl, **ABLATION_VARIANTS["entropy_adam"]) is adamerging_model(pl)


class TestRunComparison:
    def test_row_inventory_and_order(self):
        rows = run_comparison(TINY)
        per_seed = 2 + len(TINY.methods)
        assert len(rows) == per_seed * len(TINY.seeds)
        methods = [r.method for r in rows]
        want = [m for m in METHOD_ORDER for _ in TINY.seeds]
        assert methods == want
        for a, b in zip(rows, rows[1:]):
            if a.method == b.method:
                assert a.seed < b.seed

    def test_finetuned_row_is_normalization_reference(self):
        rows = run_comparison(TINY)
        for row in rows:
            if row.method == "finetuned":
                assert row.normalized_accuracy == 1.0

    def test_median_by_method_hand_case(self):
        rows = [
            ResultRow("m", 0, (0.5,), 0.50, 1.0, 0.0),
            ResultRow("m", 1, (0.7,), 0.70, 1.0, 0.0),
            ResultRow("m", 2, (0.6,), 0.62, 1.0, 0.0),
            ResultRow("n", 0, (0.4,), 0.40, 1.0, 0.0),
        ]
        assert median_by_method(rows) == {"m": 0.62, "n": 0.40}


class TestSweeps:
    def test_lambda_init_rows_and_per_seed_ranges(self):
        inits = (0.0, 0.3)
        rows, ranges = sweep_lambda_init(TINY, inits=inits)
        assert len(rows) == len(inits) * 2 * len(TINY.seeds)
        for method in ("adamerging", "samerging"):
            per_seed = []
            for seed in TINY.seeds:
                vals = [r.avg_accuracy for r in rows if r.method == method and r.seed == seed]
                assert len(vals) == len(inits)
                per_seed.append(max(vals) - min(vals))
            assert ranges[method] == statistics.median(per_seed)

    def test_k_sweep_widens_the_pool_on_demand(self):
        ks = (8, 128)  # 128 exceeds TINY.n_calib=64
        rows, medians = sweep_k(TINY, ks=ks, seeds=(0,))
        assert set(medians) == {(m, k) for m in ("adamerging", "samerging") for k in ks}
        for (method, k), med in medians.items():
            vals = [
                r.avg_accuracy
                for r in rows
                if r.method == method and r.sweep_value == str(k)
            ]
            assert med == statistics.median(vals)

    def test_rho_sweep(self):
        rhos = (0.0, 0.07)
        rows, medians = sweep_rho(TINY, rhos=rhos, seeds=(0,))
        assert len(rows) == len(rhos)
        assert set(medians) == set(rhos)
        assert all(r.method == "samerging" for r in rows)

    def test_ablation_medians_match_rows(self):
        rows, medians = ablate_kl_sam(TINY, seeds=TINY.seeds)
        assert set(medians) == set(ABLATION_VARIANTS)
        for name in ABLATION_VARIANTS:
            vals = [r.avg_accuracy for r in rows if r.method == name]
            assert len(vals) == len(TINY.seeds)
            assert medians[name] == statistics.median(vals)


class TestArtifacts:
    def test_result_rows_csv_round_trips_exact_floats(self, pl, tmp_path):
        rows = [evaluate_model(pl.theta0, pl, "pretrained")]
        path = result_rows_csv(tmp_path / "r.csv", rows, n_tasks=2)
        schema, header, body = read_csv(path)
        assert schema == "results-v1"
        assert header == [
            "method", "seed", "sweep_value", "acc_task0", "acc_task1",
            "avg_accuracy", "normalized_accuracy", "flatness",
        ]
        assert len(body) == 1
        got = body[0]
        assert got[0] == "pretrained" and got[1] == "0"
        assert float(got[5]) == rows[0].avg_accuracy
        assert float(got[7]) == rows[0].flatness

    def test_summary_orders_methods_canonically(self, tmp_path):
        rows = [
            ResultRow("samerging", 0, (0.9,), 0.9, 1.0, 1.0),
            ResultRow("avg", 0, (0.7,), 0.7, 1.0, 2.0),
            ResultRow("pretrained", 0, (0.5,), 0.5, 1.0, 3.0),
        ]
        path = summary_csv(tmp_path / "s.csv", rows)
        _, header, body = read_csv(path)
        assert [r[0] for r in body] == ["pretrained", "avg", "samerging"]
        assert float(body[0][1]) == 0.5

    def test_timings_sidecar_stays_out_of_the_manifest(self, pl, tmp_path):
        from mergelab.artifacts import write_manifest

        rows = [evaluate_model(pl.theta0, pl, "pretrained", wall_time=1.23)]
        result_rows_csv(tmp_path / "r.csv", rows, n_tasks=2)
        write_timings(tmp_path, rows)
        manifest = json.loads(write_manifest(tmp_path).read_text())
        assert "r.csv" in manifest["files"]
        assert "timings.csv" not in manifest["files"]
