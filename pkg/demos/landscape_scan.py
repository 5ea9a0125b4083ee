"""Look at the loss surface the two coefficient learners actually land in.

Scans the multi-task evaluation loss on a plane through a merged solution,
spanned by the first two task-vector directions (unit-normalized), and draws
it as a small ASCII contour map. The sharpness-aware solution should sit in
a visibly wider basin than the entropy/Adam one; the printed gradient-noise
proxy makes the same comparison quantitative.

    python demos/landscape_scan.py
"""

import numpy as np

from mergelab.bounds import flatness_proxy, landscape_scan
from mergelab.harness import (
    ExperimentConfig,
    adamerging_model,
    build_pipeline,
    samerging_model,
)

CFG = ExperimentConfig(
    n_tasks=4,
    n_classes=3,
    dim=8,
    n_train=600,
    n_test=400,
    n_calib=128,
    k=16,
    epochs=400,
    pretrain_epochs=2,
    finetune_epochs=25,
    stats_samples=400,
    seeds=(0,),
)

SHADES = " .:-=+*#%@"


def ascii_map(tag, center, pl, span=1.5, n=21):
    batches = [task.test for task in pl.suite.tasks]
    _, _, losses = landscape_scan(
        center, pl.specs, pl.taus[0], pl.taus[1], (-span, span, n, -span, span, n), batches
    )
    lo, hi = losses.min(), losses.max()
    scaled = (losses - lo) / max(hi - lo, 1e-12)
    flat = float(np.mean([flatness_proxy(center, pl.specs, b, "ce") for b in batches]))
    print(f"{tag}: loss {lo:.3f} (center row/col) .. {hi:.3f}, "
          f"gradient-noise proxy {flat:.3e}")
    for i in range(n):
        row = "".join(SHADES[min(int(s * len(SHADES)), len(SHADES) - 1)] for s in scaled[i])
        print("   " + row)
    print()


def main():
    pl = build_pipeline(CFG, seed=0)
    sam = samerging_model(pl)[2]
    ada = adamerging_model(pl)[2]
    print(f"plane: two task-vector directions, +/-1.5 around each solution; "
          f"darker = lower loss\n")
    ascii_map("distillation + sharpness-aware step", sam, pl)
    ascii_map("entropy + plain Adam", ada, pl)


if __name__ == "__main__":
    main()
