"""Temporary: C7 (init ranges) and C9 (k16 vs k1024) at fe=30 for one epoch count."""

import statistics
import sys
import time

from mergelab.harness import (
    DEFAULT_SEEDS,
    ExperimentConfig,
    LAM_INIT_VALUES,
    sweep_k,
    sweep_lambda_init,
)

ep = int(sys.argv[1])
cfg = ExperimentConfig(finetune_epochs=30, epochs=ep)

t0 = time.time()
_, ranges = sweep_lambda_init(cfg)
print(
    f"ep={ep} C7={'PASS' if ranges['samerging'] < ranges['adamerging'] else 'FAIL'} "
    f"sam={ranges['samerging']:.4f} ada={ranges['adamerging']:.4f} [{time.time()-t0:.0f}s]",
    flush=True,
)

t1 = time.time()
_, medians = sweep_k(cfg, ks=(16, 1024), methods=("samerging",))
gap = abs(medians[("samerging", 16)] - medians[("samerging", 1024)])
print(
    f"ep={ep} C9={'PASS' if gap <= 0.03 else 'FAIL'} "
    f"k16={medians[('samerging', 16)]:.4f} k1024={medians[('samerging', 1024)]:.4f} "
    f"gap={gap:.4f} [{time.time()-t1:.0f}s]"
)
