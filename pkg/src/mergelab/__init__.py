"""mergelab: a desk-scale laboratory for model merging.

Small numpy networks, task-vector arithmetic, the standard merging
baselines, merge-coefficient learning by multi-teacher distillation with a
sharpness-aware step, and a numerical lab that certifies the accompanying
generalization theory on exactly-solvable instances.
"""

from .nn import (
    Batch,
    LayerSpec,
    ParamSet,
    accuracy,
    batch_loss,
    cross_entropy,
    entropy,
    forward,
    kl_div,
    load_params,
    loss_and_grad,
    one_hot,
    save_params,
    softmax,
)
from .task_vectors import (
    MergeCoefficients,
    MergedModel,
    compute_task_vector,
    construct_merged,
    grad_wrt_lambda,
    l2_penalty,
    merge_params,
    params_digest,
)
from .static_mergers import (
    DegenerateStatsError,
    FisherConfig,
    GramStats,
    TiesConfig,
    collect_gram_stats,
    estimate_diag_fisher,
    fisher_merge,
    regmean_merge,
    simple_average,
    task_arithmetic,
    ties_merge,
)
from .adaptive import (
    AdamState,
    SamConfig,
    TrainLog,
    adam_step,
    adamerging_fit,
    entropy_loss,
    fit_coefficients,
    kd_loss,
    sam_ascent,
    samerging_fit,
    teacher_distributions,
)
from .bounds import (
    BoundReport,
    FiniteTaskDataset,
    GaussianPosterior,
    LinearTaskModel,
    decomposition_check,
    excess_risk_check,
    flatness_proxy,
    gaussian_kl,
    heterogeneity,
    landscape_scan,
    merged_bound_rhs,
    per_task_bound_rhs,
    pinsker_check,
)
from .datasets import (
    SyntheticSuite,
    TaskSpec,
    default_specs,
    finetune_task,
    gen_suite,
    init_params,
    load_suite,
    pretrain,
    sample_calibration,
    save_suite,
    train_network,
)
from .harness import (
    ExperimentConfig,
    GateError,
    ResultRow,
    ablate_kl_sam,
    build_pipeline,
    reproduce_figures,
    run_comparison,
    sweep_k,
    sweep_lambda_init,
    sweep_rho,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
