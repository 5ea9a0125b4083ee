"""Scan (finetune_epochs, task_spread) corners for criteria 6/7/8 margins."""
import dataclasses
import statistics
import sys
import time

import numpy as np

from mergelab.harness import (
    ABLATION_VARIANTS, DEFAULT_SEEDS, LAM_INIT_VALUES, ExperimentConfig,
    build_pipeline, evaluate_model, fit_adaptive, merge_with_method,
)


def run(fe, spread, epochs=1000):
    t0 = time.time()
    accs = {name: [] for name in ABLATION_VARIANTS}
    ranges = {"samerging": [], "adamerging": []}
    static = {m: [] for m in ("pretrained", "avg", "ta", "ties")}
    fine_min = 1.0
    cfg = ExperimentConfig(finetune_epochs=fe, epochs=epochs, task_spread=spread)
    for seed in DEFAULT_SEEDS:
        pl = build_pipeline(cfg, seed)
        for name, kw in ABLATION_VARIANTS.items():
            _, _, merged = fit_adaptive(pl, **kw)
            accs[name].append(evaluate_model(merged, pl, name).avg_accuracy)
        static["pretrained"].append(evaluate_model(pl.theta0, pl, "pretrained").avg_accuracy)
        for method in ("avg", "ta", "ties"):
            theta = merge_with_method(method, pl)
            static[method].append(evaluate_model(theta, pl, method).avg_accuracy)
        for method, obj, rho, wd in (("samerging", "kl", 0.07, 5e-4),
                                     ("adamerging", "entropy", 0.0, 0.0)):
            vals = []
            for init in LAM_INIT_VALUES:
                _, _, merged = fit_adaptive(pl, obj, rho, init, wd)
                vals.append(evaluate_model(merged, pl, method).avg_accuracy)
            ranges[method].append(max(vals) - min(vals))
    med = {k: statistics.median(v) for k, v in accs.items()}
    deltas = np.array(accs["kl_sam"]) - np.array(accs["kl_adam"])
    c8 = (med["kl_sam"] >= med["kl_adam"] and med["kl_sam"] >= med["entropy_sam"]
          and med["kl_adam"] >= med["entropy_adam"]
          and med["entropy_sam"] >= med["entropy_adam"])
    sam_r = statistics.median(ranges["samerging"])
    ada_r = statistics.median(ranges["adamerging"])
    meds = {m: statistics.median(v) for m, v in static.items()}
    sam, ada = med["kl_sam"], med["entropy_adam"]
    c6 = (sam - ada >= 0.01 and sam - meds["ta"] >= 0.02
          and all(meds[m] > meds["pretrained"] for m in
                  ("avg", "ta", "ties")) and sam > meds["pretrained"]
          and ada > meds["pretrained"])
    print(f"fe={fe} spread={spread} ep={epochs}  [{time.time()-t0:.0f}s]")
    print(f"  C8={'PASS' if c8 else 'FAIL'} kl_sam={med['kl_sam']:.4f} "
          f"kl_adam={med['kl_adam']:.4f} entropy_sam={med['entropy_sam']:.4f} "
          f"entropy_adam={med['entropy_adam']:.4f}")
    print(f"    kl deltas per seed: {np.round(deltas, 4)}")
    print(f"  C7={'PASS' if sam_r < ada_r else 'FAIL'} sam={sam_r:.4f} ada={ada_r:.4f}")
    print(f"  C6={'PASS' if c6 else 'FAIL'} sam-ada={sam-ada:+.4f} "
          f"sam-ta={sam-meds['ta']:+.4f} pre={meds['pretrained']:.3f} "
          f"avg={meds['avg']:.3f} ta={meds['ta']:.3f} "
          f"ties={meds['ties']:.3f}", flush=True)


if __name__ == "__main__":
    for arg in sys.argv[1:]:
        fe_s, spread_s = arg.split(":")
        run(int(fe_s), float(spread_s))
