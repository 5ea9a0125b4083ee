"""Numerical checks of the generalization story behind calibration-set merging.

The merged model is trained on a few unlabeled examples per task, so the
interesting question is why that should generalize at all. The bound lab
answers it at desk scale with exact linear-Gaussian models:

  * a multi-task risk decomposition that must hold to float precision,
  * a per-task PAC-Bayes bound and its merged-model counterpart, evaluated
    with every term printed rather than trusted,
  * the two deterministic inequalities the distillation argument leans on
    (Pinsker, and soft-label excess risk vs distillation loss).

    python demos/bound_lab.py
"""

import numpy as np

from mergelab.bounds import (
    decomposition_trials,
    excess_trials,
    merged_trials,
    per_task_trials,
    pinsker_trials,
)


def show_report(tag, rep):
    print(f"{tag}: lhs {rep.lhs:.4f} <= rhs {rep.rhs:.4f} (slack {rep.slack:.4f}, "
          f"mc se {rep.mc_se:.1e})")
    for name, value in rep.components.items():
        print(f"    {name:>12} {value:.4f}")


def main():
    residuals = decomposition_trials(trials=20, seed=4)
    print(f"risk decomposition, 20 random instances: max |residual| "
          f"{max(abs(r) for r in residuals):.2e}")
    print()

    pertask = per_task_trials(trials=40, seed=0)
    held = sum(r.ok for r in pertask)
    print(f"per-task PAC-Bayes bound held in {held}/40 trials at delta=0.05")
    show_report("  typical trial", pertask[0])
    print()

    merged = merged_trials(trials=25, seed=1)
    held = sum(r.ok for r in merged)
    print(f"merged-model bound held in {held}/25 trials")
    show_report("  typical trial", merged[0])
    print()

    violations, worst = pinsker_trials(trials=20_000, seed=3)
    print(f"pinsker: {violations}/20000 violations, worst tv - bound = {worst:.1e}")

    reports = excess_trials(trials=200, seed=2)
    bad = sum(1 for r in reports if not r.ok)
    tightest = min(r.slack for r in reports)
    print(f"excess-risk inequality: {bad}/200 violations, tightest slack {tightest:.2e}")


if __name__ == "__main__":
    main()
