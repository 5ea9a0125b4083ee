"""Temporary: C8 variants at fe=30 across epoch counts, per seed."""

import statistics
import sys
import time

import numpy as np

from mergelab.harness import (
    ABLATION_VARIANTS,
    DEFAULT_SEEDS,
    ExperimentConfig,
    build_pipeline,
    evaluate_model,
    fit_adaptive,
)

fe = int(sys.argv[1]) if len(sys.argv) > 1 else 30
eps = (200, 300, 500, 1000, 1500)
cfg = ExperimentConfig(finetune_epochs=fe)

t0 = time.time()
acc = {}  # (variant, ep, seed) -> avg acc
for seed in DEFAULT_SEEDS:
    pl = build_pipeline(cfg, seed)
    for name, kw in ABLATION_VARIANTS.items():
        for ep in eps:
            merged = fit_adaptive(pl, epochs=ep, **kw)[2]
            acc[(name, ep, seed)] = evaluate_model(merged, pl, name).avg_accuracy
    print(f"seed {seed} done [{time.time()-t0:.0f}s]", flush=True)

for ep in eps:
    med = {
        name: statistics.median(acc[(name, ep, s)] for s in DEFAULT_SEEDS)
        for name in ABLATION_VARIANTS
    }
    ok = (
        med["kl_sam"] >= med["kl_adam"] >= med["entropy_adam"]
        and med["kl_sam"] >= med["entropy_sam"] >= med["entropy_adam"]
    )
    deltas = [acc[("kl_sam", ep, s)] - acc[("kl_adam", ep, s)] for s in DEFAULT_SEEDS]
    print(
        f"ep={ep:5d} C8={'PASS' if ok else 'FAIL'} "
        f"kl_sam={med['kl_sam']:.4f} kl_adam={med['kl_adam']:.4f} "
        f"ent_sam={med['entropy_sam']:.4f} ent_adam={med['entropy_adam']:.4f} "
        f"kl_deltas={np.round(deltas, 4)}"
    )
