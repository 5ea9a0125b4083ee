"""Coefficient-learning mergers.

Two label-free procedures fit the merge coefficients on small per-task
calibration batches:

- entropy minimization with plain Adam (coefficients initialized at 0.3);
- multi-teacher distillation: KL from each fine-tuned teacher to the merged
  student, minimized with a sharpness-aware two-step optimizer (Adam base,
  coefficients initialized at 0).

The sharpness-aware step perturbs the coefficients by epsilon =
rho * g / ||g||_2 before computing the gradient used for the update, so the
fit descends toward flat regions of the objective. Both fits are
deterministic given their inputs; no randomness is consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet, _forward_trace, loss_and_grad, softmax
from .task_vectors import MergeCoefficients, grad_wrt_lambda, l2_penalty, merge_params

SAM_GRAD_GUARD = 1e-12


@dataclass
class AdamState:
    """Adam accumulators plus hyperparameters; step counts completed updates.

    Weight decay is decoupled: p <- p * (1 - lr * wd) before the Adam step.
    """

    m: list
    v: list
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init_like(cls, params, **hyper):
        plist = [params] if isinstance(params, np.ndarray) else list(params)
        return cls(
            m=[np.zeros_like(p) for p in plist],
            v=[np.zeros_like(p) for p in plist],
            **hyper,
        )


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Accepts an ndarray or a list of them.

    Returns (updated params, state); the state is mutated in place.
    """
    single = isinstance(params, np.ndarray)
    plist = [params] if single else list(params)
    glist = [grads] if single else list(grads)
    if len(plist) != len(state.m) or len(glist) != len(plist):
        raise ValueError("parameter/gradient structure does not match the state")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(plist, glist)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError("parameter/gradient shapes do not match the state")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p_new = p * (1.0 - state.lr * state.weight_decay)
        p_new = p_new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        out.append(p_new)
    return (out[0] if single else out), state


def sam_ascent(grad, rho):
    """Ascent perturbation epsilon = rho * g / ||g||_2.

    ||epsilon||_2 equals rho exactly for any nonzero gradient; gradients with
    norm <= 1e-12 (and rho = 0) give epsilon = 0.
    """
    g = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("gradient must be finite")
    norm = float(np.sqrt(np.sum(g * g)))
    if rho == 0.0 or norm <= SAM_GRAD_GUARD:
        return np.zeros_like(g)
    return (rho / norm) * g


@dataclass(frozen=True)
class SamConfig:
    """Perturbation radius plus the Adam base-optimizer hyperparameters."""

    rho: float = 0.07
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.rho < 0.0:
            raise ValueError("rho must be >= 0")


@dataclass(frozen=True)
class TrainLogRecord:
    epoch: int
    objective: float
    lam_digest: str
    grad_norm: float


@dataclass
class TrainLog:
    """Per-epoch fit records; epochs strictly increase."""

    records: list = field(default_factory=list)

    def append(self, record: TrainLogRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must strictly increase")
        self.records.append(record)

    def digest(self):
        h = hashlib.sha256()
        for r in self.records:
            h.update(f"{r.epoch},{r.objective!r},{r.lam_digest},{r.grad_norm!r}\n".encode())
        return h.hexdigest()

    def to_csv(self, path=None):
        lines = ["schema_version,epoch,objective,grad_norm"]
        lines += [f"trainlog-v1,{r.epoch},{r.objective!r},{r.grad_norm!r}" for r in self.records]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        return text


def _check_alpha(alpha, n_tasks):
    if alpha is None:
        return np.full(n_tasks, 1.0 / n_tasks)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (n_tasks,):
        raise ValueError(f"alpha must have one weight per task ({n_tasks})")
    if (alpha < 0).any() or abs(alpha.sum() - 1.0) > 1e-9:
        raise ValueError("alpha must lie in the probability simplex")
    return alpha


def _lam_values(lam, n_tasks, n_groups):
    if isinstance(lam, MergeCoefficients):
        values = lam.values
    else:
        values = np.asarray(lam, dtype=np.float64)
    if values.shape != (n_tasks, n_groups):
        raise ValueError(f"coefficients must have shape ({n_tasks}, {n_groups})")
    return values


def teacher_distributions(teachers, specs, batches):
    """Softmax outputs of each teacher on its own calibration batch."""
    if len(teachers) != len(batches):
        raise ValueError("need one batch per teacher")
    out = []
    for teacher, batch in zip(teachers, batches):
        if len(batch) == 0:
            raise ValueError("empty calibration batch")
        logits, _, _ = _forward_trace(teacher, specs, batch.inputs)
        out.append(softmax(logits))
    return out


def _objective_and_grad(lam_values, theta_0, taus, specs, batches, alpha, objective, teacher_probs):
    """Scalar objective and its exact (T, L) coefficient gradient."""
    student = merge_params(theta_0, taus, lam_values)
    total = 0.0
    grad_theta = theta_0.zeros_like()
    for t, batch in enumerate(batches):
        tp = teacher_probs[t] if objective == "kl" else None
        loss_t, grad_t = loss_and_grad(student, specs, batch, objective, teacher_probs=tp)
        total += alpha[t] * loss_t
        grad_theta = grad_theta + grad_t * alpha[t]
    lam = MergeCoefficients(lam_values)
    return total, grad_wrt_lambda(theta_0, taus, lam, grad_theta)


def kd_loss(lam, theta_0, taus, specs, teachers, batches, alpha=None):
    """Multi-teacher distillation loss sum_t alpha_t E_{x in B_t} KL(p_t || q_lam).

    Teachers predict with their own fine-tuned parameters; the student with
    the merged parameters built from lam. alpha defaults to uniform.
    """
    alpha = _check_alpha(alpha, len(taus))
    values = _lam_values(lam, len(taus), theta_0.n_groups)
    probs = teacher_distributions(teachers, specs, batches)
    loss, _ = _objective_and_grad(values, theta_0, taus, specs, batches, alpha, "kl", probs)
    return loss


def entropy_loss(lam, theta_0, taus, specs, batches, alpha=None):
    """Mean prediction entropy of the merged student, weighted by alpha."""
    alpha = _check_alpha(alpha, len(taus))
    values = _lam_values(lam, len(taus), theta_0.n_groups)
    loss, _ = _objective_and_grad(values, theta_0, taus, specs, batches, alpha, "entropy", None)
    return loss


def fit_coefficients(
    theta_0,
    taus,
    specs,
    batches,
    objective,
    teachers=None,
    rho=0.0,
    lam_init=0.0,
    epochs=300,
    alpha=None,
    omega=0.0,
    tie_groups=False,
    lr=0.001,
    beta1=0.9,
    beta2=0.99,
    eps=1e-8,
    weight_decay=0.0,
):
    """Shared fit loop for both coefficient-learning mergers.

    objective is "kl" (needs teachers) or "entropy". rho > 0 enables the
    two-step sharpness-aware update: the descent gradient is evaluated at
    lam + rho * g / ||g||_2. With tie_groups one coefficient per task is
    learned and broadcast across all parameter groups. omega adds an
    L2 coefficient penalty omega * ||lam||^2 to the objective.

    Returns (MergeCoefficients with the full T x L matrix, TrainLog). The
    logged digest is a sha256 of the coefficient bytes after each update.
    """
    if objective not in ("kl", "entropy"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "kl":
        if teachers is None:
            raise ValueError("the distillation objective needs teacher models")
        teacher_probs = teacher_distributions(teachers, specs, batches)
    else:
        teacher_probs = None
    if len(batches) != len(taus):
        raise ValueError("need one calibration batch per task")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    T = len(taus)
    L = theta_0.n_groups
    alpha = _check_alpha(alpha, T)

    param_shape = (T, 1) if tie_groups else (T, L)
    if np.isscalar(lam_init):
        param = np.full(param_shape, float(lam_init))
    else:
        param = _lam_values(lam_init, T, L).copy()
        if tie_groups:
            if not np.all(param == param[:, :1]):
                raise ValueError("tie_groups needs a per-task constant initialization")
            param = param[:, :1].copy()

    def expand(p):
        return np.repeat(p, L, axis=1) if tie_groups else p

    def reduce_grad(g):
        return g.sum(axis=1, keepdims=True) if tie_groups else g

    def objective_grad(p):
        full = expand(p)
        value, grad_full = _objective_and_grad(
            full, theta_0, taus, specs, batches, alpha, objective, teacher_probs
        )
        if omega != 0.0:
            pen, pen_grad = l2_penalty(full, omega)
            value += pen
            grad_full = grad_full + pen_grad
        return value, reduce_grad(grad_full)

    state = AdamState.init_like(
        param, lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay
    )
    log = TrainLog()
    for epoch in range(1, epochs + 1):
        value, g = objective_grad(param)
        epsilon = sam_ascent(g, rho)
        _, g_sam = objective_grad(param + epsilon)
        param, state = adam_step(state, param, g_sam)
        digest = hashlib.sha256(np.ascontiguousarray(expand(param)).tobytes()).hexdigest()
        log.append(
            TrainLogRecord(
                epoch=epoch,
                objective=value,
                lam_digest=digest,
                grad_norm=float(np.sqrt(np.sum(g * g))),
            )
        )
    return MergeCoefficients(expand(param).copy()), log


def samerging_fit(
    theta_0,
    taus,
    specs,
    teachers,
    calib_batches,
    cfg: SamConfig = SamConfig(),
    epochs=300,
    lam_init=0.0,
    alpha=None,
    omega=0.0,
    tie_groups=False,
):
    """Distillation objective, sharpness-aware Adam, coefficients start at 0."""
    return fit_coefficients(
        theta_0,
        taus,
        specs,
        calib_batches,
        objective="kl",
        teachers=teachers,
        rho=cfg.rho,
        lam_init=lam_init,
        epochs=epochs,
        alpha=alpha,
        omega=omega,
        tie_groups=tie_groups,
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def adamerging_fit(
    theta_0,
    taus,
    specs,
    calib_batches,
    lr=0.001,
    epochs=300,
    lam_init=0.3,
    alpha=None,
    omega=0.0,
    tie_groups=False,
):
    """Entropy objective, plain Adam, coefficients start at 0.3."""
    return fit_coefficients(
        theta_0,
        taus,
        specs,
        calib_batches,
        objective="entropy",
        rho=0.0,
        lam_init=lam_init,
        epochs=epochs,
        alpha=alpha,
        omega=omega,
        tie_groups=tie_groups,
        lr=lr,
    )
