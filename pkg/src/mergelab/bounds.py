"""Numerical verification lab for the merging theory.

Everything here certifies inequalities and identities at desk scale:

- flatness proxy: mean squared per-sample parameter-gradient norm;
- mixture-risk decomposition and the cross-task heterogeneity term;
- per-task and merged-model PAC-Bayes bounds on exactly-linear models with
  isotropic Gaussian posteriors;
- distillation excess-risk bound and Pinsker's inequality on finite
  label distributions;
- loss-landscape scans along task-vector directions.

Linear task models keep the feature map explicit (one row per input), score
affine in the parameters, and use the bounded convex smooth loss
ell(s, y) = (s - y)^2 / B with gamma = 2 / B. On the declared domain the
loss stays in [0, 1]; realized values outside it are counted and reported,
never silently clipped. Because the loss is quadratic in the score, all
Gaussian posterior expectations have closed forms; Monte Carlo draws are
used for the decomposition/heterogeneity estimators (shared-draw design)
and as cross-checks, with standard errors reported alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    LOG_EPS,
    ParamSet,
    _act_deriv,
    _dloss_dlogits,
    _forward_trace,
    batch_loss,
    softmax,
)


@dataclass(frozen=True)
class GaussianPosterior:
    """Isotropic Gaussian N(mean, sigma2 * I); operator norm of the
    covariance is sigma2 itself."""

    mean: np.ndarray
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.mean.ndim != 1:
            raise ValueError("posterior mean must be a 1-d vector")
        if not self.sigma2 > 0.0:
            raise ValueError("sigma2 must be > 0")

    @property
    def dim(self):
        return self.mean.shape[0]

    def draw(self, rng, n):
        return self.mean + math.sqrt(self.sigma2) * rng.standard_normal((n, self.dim))


def gaussian_kl(q: GaussianPosterior, p: GaussianPosterior) -> float:
    """KL(q || p) for isotropic Gaussians of equal dimension (closed form)."""
    if q.dim != p.dim:
        raise ValueError("dimension mismatch")
    d = q.dim
    ratio = q.sigma2 / p.sigma2
    sq = float(np.sum((p.mean - q.mean) ** 2))
    return 0.5 * (d * ratio + sq / p.sigma2 - d + d * math.log(p.sigma2 / q.sigma2))


@dataclass
class LinearTaskModel:
    """A finite task with explicit features, affine scores, quadratic loss.

    phi has one feature row per input; the score of parameter theta on row i
    is phi[i] . theta, and the loss is (score - y[i])^2 / bound. theta0 is
    the base point the linearization is anchored at (prior center).
    Population expectations are exact means over the rows.
    """

    phi: np.ndarray
    y: np.ndarray
    bound: float
    theta0: np.ndarray | None = None

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.phi.ndim != 2 or self.y.shape != (self.phi.shape[0],):
            raise ValueError("phi must be (n, d) with one target per row")
        if not self.bound > 0.0:
            raise ValueError("loss bound must be > 0")
        if self.theta0 is None:
            self.theta0 = np.zeros(self.phi.shape[1])
        else:
            self.theta0 = np.asarray(self.theta0, dtype=np.float64)
            if self.theta0.shape != (self.phi.shape[1],):
                raise ValueError("theta0 dimension mismatch")

    @property
    def dim(self):
        return self.phi.shape[1]

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def gamma(self):
        """Smoothness of the loss in the score."""
        return 2.0 / self.bound

    def _rows(self, idx):
        if idx is None:
            return self.phi, self.y
        return self.phi[idx], self.y[idx]

    def point_risk(self, theta, idx=None):
        phi, y = self._rows(idx)
        r = phi @ theta - y
        return float(np.mean(r * r)) / self.bound

    def posterior_risk(self, q: GaussianPosterior, idx=None):
        """E_{theta ~ q} of the risk; exact because the loss is quadratic."""
        phi, y = self._rows(idx)
        r = phi @ q.mean - y
        rn2 = np.sum(phi * phi, axis=1)
        return float(np.mean(r * r + q.sigma2 * rn2)) / self.bound

    def point_flatness(self, theta, idx=None):
        """Mean squared parameter-gradient norm at a single theta."""
        phi, y = self._rows(idx)
        r = phi @ theta - y
        rn2 = np.sum(phi * phi, axis=1)
        return float(np.mean(r * r * rn2)) * 4.0 / self.bound**2

    def posterior_flatness(self, q: GaussianPosterior, idx=None):
        phi, y = self._rows(idx)
        r = phi @ q.mean - y
        rn2 = np.sum(phi * phi, axis=1)
        return float(np.mean((r * r + q.sigma2 * rn2) * rn2)) * 4.0 / self.bound**2

    def kernel(self, idx=None):
        """E[phi phi^T] over the rows (the task kernel)."""
        phi, _ = self._rows(idx)
        return phi.T @ phi / phi.shape[0]

    def draw_losses(self, thetas):
        """Loss matrix (rows, draws) for a (m, d) array of parameter draws."""
        r = self.phi @ thetas.T - self.y[:, None]
        return r * r / self.bound


@dataclass
class BoundReport:
    """One bound evaluation: every term, both sides, slack, and MC error.

    components sum to rhs exactly (same floats, same order); terms carries
    named diagnostics. counts records the sample sizes used.
    """

    lhs: float
    rhs: float
    slack: float
    components: dict
    terms: dict = field(default_factory=dict)
    mc_se: float = 0.0
    counts: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.lhs <= self.rhs


def _check_simplex(w, n, name):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"{name} must have {n} entries")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must lie in the probability simplex")
    return w


# --- flatness proxy ---------------------------------------------------------


def flatness_proxy(theta: ParamSet, specs, batch, loss_kind="ce", targets=None):
    """Mean over samples of the squared parameter-gradient norm.

    loss_kind "ce" uses softmax cross-entropy against batch.labels; "sq" uses
    the squared error of the raw outputs against float targets (n,) or
    (n, out_dim). Per-sample weight gradients are rank one, so the squared
    norms factor into delta and activation norms and one batched backward
    pass suffices.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, hs, zs = _forward_trace(theta, specs, batch.inputs)
    if loss_kind == "ce":
        if batch.labels is None:
            raise ValueError("flatness with cross-entropy needs labels")
        probs = softmax(hs[-1])
        g = _dloss_dlogits(probs, "ce", labels=batch.labels)
    elif loss_kind == "sq":
        if targets is None:
            raise ValueError("flatness with squared loss needs targets")
        t = np.asarray(targets, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        if t.shape != hs[-1].shape:
            raise ValueError("targets must match the output shape")
        g = 2.0 * (hs[-1] - t)
    else:
        raise ValueError(f"unsupported loss kind {loss_kind!r}")

    per_sample = np.zeros(len(batch))
    for l in range(theta.n_layers - 1, -1, -1):
        delta = g * _act_deriv(zs[l], hs[l + 1], specs[l].activation)
        dn2 = np.sum(delta * delta, axis=1)
        hn2 = np.sum(hs[l] * hs[l], axis=1)
        per_sample += dn2 * (hn2 + 1.0)
        if l > 0:
            g = delta @ theta.weights[l]
    return float(per_sample.mean())


# --- mixture decomposition and heterogeneity --------------------------------


def _risk_matrix(posteriors, models, mc_draws, seed):
    """Per-draw losses of each posterior on each task.

    Returns (R, per_draw) where R[i, j] = estimated risk of posterior j on
    task i and per_draw[i][j] is the (mc_draws,) vector behind it. Point
    masses (plain mean vectors) give exact risks with a single "draw".
    """
    T = len(models)
    seeds = np.random.SeedSequence(seed).spawn(T)
    per_draw = [[None] * T for _ in range(T)]
    R = np.empty((T, T))
    for j, q in enumerate(posteriors):
        if isinstance(q, GaussianPosterior):
            draws = q.draw(np.random.default_rng(seeds[j]), mc_draws)
        else:
            draws = np.asarray(q, dtype=np.float64)[None, :]
        for i, model in enumerate(models):
            losses = model.draw_losses(draws).mean(axis=0)
            per_draw[i][j] = losses
            R[i, j] = float(losses.mean())
    return R, per_draw


def heterogeneity(posteriors, models, alpha, beta, mc_draws=10000, seed=0):
    """Cross-task heterogeneity H = sum_ij alpha_i beta_j (L_i(Q_j) - L_j(Q_j)).

    posteriors may be GaussianPosterior objects (Monte Carlo, standard error
    from the per-draw values) or plain mean vectors (exact, zero error).
    Returns (H, standard_error).
    """
    T = len(models)
    if len(posteriors) != T:
        raise ValueError("need one posterior per task")
    alpha = _check_simplex(alpha, T, "alpha")
    beta = _check_simplex(beta, T, "beta")
    _, per_draw = _risk_matrix(posteriors, models, mc_draws, seed)
    h_draws = None
    for i in range(T):
        for j in range(T):
            contrib = alpha[i] * beta[j] * (per_draw[i][j] - per_draw[j][j])
            h_draws = contrib if h_draws is None else h_draws + contrib
    H = float(h_draws.mean())
    if h_draws.shape[0] < 2:
        return H, 0.0
    se = float(h_draws.std(ddof=1) / math.sqrt(h_draws.shape[0]))
    return H, se


def decomposition_check(posteriors, models, alpha, beta, mc_draws=10000, seed=0):
    """Residual of L_alpha(Q_merge) = sum_j beta_j L_j(Q_j) + H under shared
    draws. The identity is algebraic, so the residual is pure float
    association error (< 1e-10).

    Returns (residual, details dict).
    """
    T = len(models)
    if len(posteriors) != T:
        raise ValueError("need one posterior per task")
    alpha = _check_simplex(alpha, T, "alpha")
    beta = _check_simplex(beta, T, "beta")
    R, _ = _risk_matrix(posteriors, models, mc_draws, seed)
    lhs = 0.0
    for i in range(T):
        for j in range(T):
            lhs += alpha[i] * beta[j] * R[i, j]
    own = sum(beta[j] * R[j, j] for j in range(T))
    H = 0.0
    for i in range(T):
        for j in range(T):
            H += alpha[i] * beta[j] * (R[i, j] - R[j, j])
    rhs = own + H
    return abs(lhs - rhs), {"lhs": lhs, "rhs": rhs, "own_risk": own, "heterogeneity": H}


# --- PAC-Bayes bounds on linear task models ---------------------------------


def per_task_bound_rhs(
    model: LinearTaskModel,
    sample_idx,
    posterior: GaussianPosterior,
    prior: GaussianPosterior,
    eta: float,
    delta: float,
    mc_draws=10000,
    seed=0,
) -> BoundReport:
    """Single-task PAC-Bayes bound for a bounded loss with the flatness term.

    rhs = (1 - eta/2)^-1 (Lhat + (KL + log(1/delta)) / (eta n))
          + eta/(2 - eta) * sigma2 * G(Q)

    lhs is the exact population risk of the posterior (closed form). A Monte
    Carlo cross-estimate of the lhs and its standard error are reported, as
    is the number of drawn losses falling outside [0, 1].
    """
    if not 0.0 < eta < 2.0:
        raise ValueError("eta must be in (0, 2)")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    sample_idx = np.asarray(sample_idx)
    n = sample_idx.shape[0]
    if n == 0:
        raise ValueError("empty sample")

    emp = model.posterior_risk(posterior, idx=sample_idx)
    kl = gaussian_kl(posterior, prior)
    flat = model.posterior_flatness(posterior)
    inv = 1.0 / (1.0 - eta / 2.0)
    components = {
        "empirical": inv * emp,
        "complexity": inv * (kl + math.log(1.0 / delta)) / (eta * n),
        "flatness": eta / (2.0 - eta) * posterior.sigma2 * flat,
    }
    rhs = sum(components.values())
    lhs = model.posterior_risk(posterior)

    mc_se = 0.0
    lhs_mc = lhs
    domain_violations = 0
    if mc_draws > 0:
        draws = posterior.draw(np.random.default_rng(seed), mc_draws)
        losses = model.draw_losses(draws)
        domain_violations = int((losses > 1.0).sum())
        per_draw = losses.mean(axis=0)
        lhs_mc = float(per_draw.mean())
        if mc_draws > 1:
            mc_se = float(per_draw.std(ddof=1) / math.sqrt(mc_draws))

    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        slack=rhs - lhs,
        components=components,
        terms={
            "empirical_risk": emp,
            "kl": kl,
            "posterior_flatness": flat,
            "eta": eta,
            "delta": delta,
            "sigma2": posterior.sigma2,
            "lhs_mc": lhs_mc,
            "domain_violations": domain_violations,
        },
        mc_se=mc_se,
        counts={"n_sample": int(n), "n_population": model.n, "mc_draws": int(mc_draws)},
    )


def merged_bound_rhs(
    models,
    samples_idx,
    posteriors,
    prior: GaussianPosterior,
    etas,
    deltas,
    alpha,
    beta,
) -> BoundReport:
    """Merged-model bound: per-task terms at the posterior means plus the
    heterogeneity surcharge (mixture gap, dispersion, kernel quadratics).

    theta_merge = sum_j beta_j mu_j. All tasks must share the same loss
    bound (one loss function). The lhs L_alpha(theta_merge) is exact on the
    finite populations.
    """
    T = len(models)
    if not (len(samples_idx) == len(posteriors) == T):
        raise ValueError("need one sample and one posterior per task")
    alpha = _check_simplex(alpha, T, "alpha")
    beta = _check_simplex(beta, T, "beta")
    etas = np.asarray(etas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if etas.shape != (T,) or deltas.shape != (T,):
        raise ValueError("need eta and delta per task")
    if ((etas <= 0) | (etas >= 2)).any():
        raise ValueError("every eta must be in (0, 2)")
    if ((deltas <= 0) | (deltas >= 1)).any():
        raise ValueError("every delta must be in (0, 1)")
    bound0 = models[0].bound
    for m in models[1:]:
        if m.bound != bound0:
            raise ValueError("all tasks must share one loss bound")
    dim = models[0].dim
    for q in posteriors:
        if q.dim != dim:
            raise ValueError("posterior dimension mismatch")
    gamma = models[0].gamma

    mus = np.stack([q.mean for q in posteriors])
    theta_merge = beta @ mus
    deltas_vec = mus - theta_merge

    kernels = [m.kernel() for m in models]
    k_alpha = sum(alpha[t] * kernels[t] for t in range(T))
    k_beta = sum(beta[t] * kernels[t] for t in range(T))

    per_task = 0.0
    terms = {}
    for t in range(T):
        q = posteriors[t]
        n_t = len(samples_idx[t])
        emp = models[t].point_risk(q.mean, idx=samples_idx[t])
        tr_k = q.sigma2 * float(np.trace(kernels[t]))
        kl = gaussian_kl(q, prior)
        g_mu = models[t].point_flatness(q.mean)
        tr_k2 = q.sigma2 * float(np.trace(kernels[t] @ kernels[t]))
        inv = 1.0 / (1.0 - etas[t] / 2.0)
        bracket = inv * (
            emp + 0.5 * gamma * tr_k + (kl + math.log(1.0 / deltas[t])) / (etas[t] * n_t)
        ) + etas[t] / (2.0 - etas[t]) * q.sigma2 * (math.sqrt(g_mu) + gamma * math.sqrt(tr_k2)) ** 2
        per_task += beta[t] * bracket
        terms[f"task{t}_empirical"] = emp
        terms[f"task{t}_kl"] = kl
        terms[f"task{t}_flatness_mu"] = g_mu
        terms[f"task{t}_trace_k"] = tr_k
        terms[f"task{t}_trace_k2"] = tr_k2

    l_alpha = sum(alpha[t] * models[t].point_risk(theta_merge) for t in range(T))
    l_beta = sum(beta[t] * models[t].point_risk(theta_merge) for t in range(T))
    gap = l_alpha - l_beta

    g_merge = [models[t].point_flatness(theta_merge) for t in range(T)]
    g_mix = sum(alpha[t] * g_merge[t] for t in range(T)) + sum(
        beta[t] * g_merge[t] for t in range(T)
    )
    disp2 = sum(beta[j] * float(np.sum(deltas_vec[j] ** 2)) for j in range(T))
    dispersion = math.sqrt(2.0 * g_mix) * math.sqrt(disp2)

    quad = 0.0
    ksum = k_alpha + k_beta
    for j in range(T):
        quad += beta[j] * (
            float(deltas_vec[j] @ ksum @ deltas_vec[j])
            + posteriors[j].sigma2 * float(np.trace(k_alpha))
        )
    quad *= 0.5 * gamma

    components = {
        "per_task": per_task,
        "mixture_gap": gap,
        "dispersion": dispersion,
        "quadratic": quad,
    }
    rhs = sum(components.values())

    terms.update(
        {
            "l_alpha_merge": l_alpha,
            "l_beta_merge": l_beta,
            "dispersion_sq": disp2,
            "flatness_at_merge": g_mix,
        }
    )
    return BoundReport(
        lhs=l_alpha,
        rhs=rhs,
        slack=rhs - l_alpha,
        components=components,
        terms=terms,
        mc_se=0.0,
        counts={
            "n_population": models[0].n,
            "n_samples": [int(len(s)) for s in samples_idx],
        },
    )


# --- excess-risk and Pinsker checks -----------------------------------------


@dataclass
class FiniteTaskDataset:
    """Finite inputs with per-task true conditional label distributions.

    cond[t, i] is y_t(. | x_i); expectations are uniform over the inputs.
    """

    cond: np.ndarray
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.cond = np.asarray(self.cond, dtype=np.float64)
        if self.cond.ndim != 3:
            raise ValueError("cond must be (tasks, inputs, classes)")
        _check_prob_rows(self.cond, "true conditionals")
        if self.alpha is not None:
            self.alpha = _check_simplex(self.alpha, self.cond.shape[0], "alpha")

    @property
    def n_tasks(self):
        return self.cond.shape[0]

    @property
    def n_inputs(self):
        return self.cond.shape[1]


def _check_prob_rows(arr, name):
    if (arr < 0).any() or not np.isfinite(arr).all():
        raise ValueError(f"{name} must be finite and nonnegative")
    sums = arr.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ValueError(f"{name} rows must sum to 1")


def _kl_rows(p, q):
    """Row-wise KL(p || q) with the q argument clamped at 1e-12."""
    logq = np.log(np.maximum(q, LOG_EPS))
    logp = np.where(p > 0.0, np.log(np.maximum(p, LOG_EPS)), 0.0)
    return np.sum(np.where(p > 0.0, p * (logp - logq), 0.0), axis=-1)


def pinsker_check(p, q):
    """Total variation and its KL bound: tv = 0.5 sum|p - q| <= sqrt(KL/2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_prob_rows(p[None, :], "p")
    _check_prob_rows(q[None, :], "q")
    if p.shape != q.shape:
        raise ValueError("distributions must share a label set")
    tv = 0.5 * float(np.abs(p - q).sum())
    bound = math.sqrt(0.5 * float(_kl_rows(p[None, :], q[None, :])[0]))
    return tv, bound


def excess_risk_check(dataset: FiniteTaskDataset, teachers, student, alpha=None) -> BoundReport:
    """Average excess 0-1 risk of the student against its distillation bound.

    lhs = sum_t alpha_t E_x[max_y y_t(y|x) - y_t(h(x)|x)] where h is the
    student's argmax classifier (lowest class index wins ties). rhs is
    sqrt(2 * fit KL) + sqrt(2 * teacher KL), both averaged under alpha. The
    plain and Bayes risks are reported per task as diagnostics.
    """
    teachers = np.asarray(teachers, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    y = dataset.cond
    if teachers.shape != y.shape:
        raise ValueError("teacher table must be (tasks, inputs, classes)")
    if student.shape != y.shape[1:]:
        raise ValueError("student table must be (inputs, classes)")
    _check_prob_rows(teachers, "teachers")
    _check_prob_rows(student, "student")
    if alpha is None:
        alpha = dataset.alpha
    alpha = _check_simplex(
        alpha if alpha is not None else np.full(y.shape[0], 1.0 / y.shape[0]),
        y.shape[0],
        "alpha",
    )

    h = student.argmax(axis=1)
    rows = np.arange(y.shape[1])
    plain = 1.0 - y[:, rows, h].mean(axis=1)
    bayes = 1.0 - y.max(axis=2).mean(axis=1)
    excess = (y.max(axis=2) - y[:, rows, h]).mean(axis=1)
    lhs = float(alpha @ excess)

    fit = float(alpha @ _kl_rows(teachers, student[None, :, :]).mean(axis=1))
    teacher_err = float(alpha @ _kl_rows(y, teachers).mean(axis=1))
    components = {
        "fit": math.sqrt(2.0 * fit),
        "teacher": math.sqrt(2.0 * teacher_err),
    }
    rhs = sum(components.values())
    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        slack=rhs - lhs,
        components=components,
        terms={
            "fit_kl": fit,
            "teacher_kl": teacher_err,
            "plain_risk": float(alpha @ plain),
            "bayes_risk": float(alpha @ bayes),
        },
        counts={"n_tasks": y.shape[0], "n_inputs": y.shape[1]},
    )


# --- landscape scans ---------------------------------------------------------


def _unit_direction(direction: ParamSet):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in direction.groups())))
    if norm == 0.0:
        return direction
    return direction * (1.0 / norm)


def landscape_scan(theta_center: ParamSet, specs, dir_a, dir_b, grid, eval_batches, loss_kind="ce"):
    """Mean evaluation loss on a grid theta_center + a * dir_a + b * dir_b.

    grid is (a_min, a_max, n_a, b_min, b_max, n_b); directions are
    normalized to unit parameter norm (a zero direction stays zero, giving a
    constant axis). dir_b may be None for a 1-d scan (n_b collapses to 1).
    The cell value is the sample-weighted mean loss over eval_batches.

    Returns (a_values, b_values, losses) with losses shaped (n_a, n_b).
    """
    a_min, a_max, n_a, b_min, b_max, n_b = grid
    n_a = int(n_a)
    n_b = int(n_b)
    if n_a < 1 or n_b < 1:
        raise ValueError("grid must have at least one step per axis")
    if not eval_batches:
        raise ValueError("need at least one evaluation batch")
    ua = _unit_direction(dir_a)
    if dir_b is None:
        ub = theta_center.zeros_like()
        n_b = 1
        b_min = b_max = 0.0
    else:
        ub = _unit_direction(dir_b)

    a_vals = np.linspace(a_min, a_max, n_a)
    b_vals = np.linspace(b_min, b_max, n_b)
    losses = np.empty((n_a, n_b))
    for i, a in enumerate(a_vals):
        for j, b in enumerate(b_vals):
            theta = theta_center + ua * float(a) + ub * float(b)
            losses[i, j] = landscape_point(theta, specs, eval_batches, loss_kind)
    return a_vals, b_vals, losses


def landscape_point(theta, specs, eval_batches, loss_kind="ce"):
    """Sample-weighted mean loss over the evaluation batches at one theta."""
    total = 0.0
    count = 0
    for batch in eval_batches:
        total += batch_loss(theta, specs, batch, loss_kind) * len(batch)
        count += len(batch)
    return total / count


# --- randomized trial runners -------------------------------------------------
#
# These generate the instances behind the randomized certification sweeps.
# Each trial is seeded independently via SeedSequence spawning, so sweeps are
# reproducible and parallelizable.


def random_linear_task(rng, n_population=1000, dim=8, feature_scale=1.0, noise=0.3, bound=None):
    """A finite linear task: Gaussian features, linear targets plus noise."""
    phi = feature_scale * rng.standard_normal((n_population, dim)) / math.sqrt(dim)
    theta_star = rng.standard_normal(dim)
    y = phi @ theta_star + noise * rng.standard_normal(n_population)
    if bound is None:
        # Placeholder; callers size the final bound from the posteriors they
        # evaluate so the loss stays in [0, 1] on the declared domain.
        bound = 1.0
    return LinearTaskModel(phi=phi, y=y, bound=bound, theta0=np.zeros(dim))


def _declare_bound(models, centers, sigmas, margin=8.0):
    """Pick the loss bound B so that (score - y)^2 / B stays in [0, 1].

    Covers every center plus a margin * sigma * ||phi|| * (sqrt(d) + 4)
    allowance for Gaussian parameter draws around it.
    """
    worst = 0.0
    for model in models:
        phin = np.sqrt(np.sum(model.phi * model.phi, axis=1))
        for c, s in zip(centers, sigmas):
            resid = np.abs(model.phi @ c - model.y)
            d = model.dim
            tail = margin * math.sqrt(s) * phin * (math.sqrt(d) + 4.0)
            worst = max(worst, float((resid + tail).max()))
    return worst * worst if worst > 0 else 1.0


def _ridge_fit(phi, y, reg=1e-3):
    d = phi.shape[1]
    return np.linalg.solve(phi.T @ phi + reg * np.eye(d), phi.T @ y)


def per_task_trials(
    trials=100,
    seed=0,
    n_population=1000,
    dim=8,
    n_sample=100,
    eta=0.5,
    delta=0.05,
    sigma2=0.01,
    prior_sigma2=1.0,
    mc_draws=2000,
):
    """Random single-task bound evaluations; posterior mean fit on the sample."""
    reports = []
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        model = random_linear_task(rng, n_population=n_population, dim=dim)
        idx = rng.choice(n_population, size=n_sample, replace=True)
        mu = _ridge_fit(model.phi[idx], model.y[idx])
        theta0 = np.zeros(dim)
        model.bound = _declare_bound(
            [model], [mu, theta0], [sigma2, prior_sigma2]
        )
        posterior = GaussianPosterior(mean=mu, sigma2=sigma2)
        prior = GaussianPosterior(mean=theta0, sigma2=prior_sigma2)
        reports.append(
            per_task_bound_rhs(
                model, idx, posterior, prior, eta, delta, mc_draws=mc_draws, seed=rng.integers(2**32)
            )
        )
    return reports


def merged_trials(
    trials=50,
    seed=0,
    n_tasks=2,
    n_population=800,
    dim=8,
    n_sample=100,
    eta=0.5,
    delta=0.05,
    sigma2=0.01,
    prior_sigma2=1.0,
):
    """Random multi-task merged-bound evaluations on related linear tasks."""
    reports = []
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        base = rng.standard_normal(dim)
        models = []
        idxs = []
        mus = []
        for _ in range(n_tasks):
            model = random_linear_task(rng, n_population=n_population, dim=dim)
            # Related tasks: each true parameter is a jitter of a shared base.
            theta_star = base + 0.5 * rng.standard_normal(dim)
            model.y = model.phi @ theta_star + 0.3 * rng.standard_normal(n_population)
            idx = rng.choice(n_population, size=n_sample, replace=True)
            models.append(model)
            idxs.append(idx)
            mus.append(_ridge_fit(model.phi[idx], model.y[idx]))
        theta0 = np.zeros(dim)
        bound = _declare_bound(models, mus + [theta0], [sigma2] * n_tasks + [prior_sigma2])
        for model in models:
            model.bound = bound
        posteriors = [GaussianPosterior(mean=mu, sigma2=sigma2) for mu in mus]
        prior = GaussianPosterior(mean=theta0, sigma2=prior_sigma2)
        uniform = np.full(n_tasks, 1.0 / n_tasks)
        reports.append(
            merged_bound_rhs(
                models,
                idxs,
                posteriors,
                prior,
                etas=np.full(n_tasks, eta),
                deltas=np.full(n_tasks, delta),
                alpha=uniform,
                beta=uniform,
            )
        )
    return reports


def _random_dirichlet(rng, k):
    # Varied peakedness exercises both smooth and near-deterministic rows.
    conc = float(rng.uniform(0.2, 3.0))
    return rng.dirichlet(np.full(k, conc))


def excess_trials(trials=1000, seed=0, max_tasks=3, max_inputs=8, max_classes=5):
    """Random finite distillation instances for the excess-risk inequality."""
    reports = []
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        T = int(rng.integers(1, max_tasks + 1))
        n = int(rng.integers(1, max_inputs + 1))
        C = int(rng.integers(2, max_classes + 1))
        y = np.array([[_random_dirichlet(rng, C) for _ in range(n)] for _ in range(T)])
        p = np.array([[_random_dirichlet(rng, C) for _ in range(n)] for _ in range(T)])
        q = np.array([_random_dirichlet(rng, C) for _ in range(n)])
        alpha = rng.dirichlet(np.ones(T))
        dataset = FiniteTaskDataset(cond=y)
        reports.append(excess_risk_check(dataset, p, q, alpha=alpha))
    return reports


def pinsker_trials(trials=100000, seed=0, max_classes=6):
    """Random pairs; returns (n_violations beyond 1e-12, max tv - bound)."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst = -math.inf
    for _ in range(trials):
        C = int(rng.integers(2, max_classes + 1))
        p = _random_dirichlet(rng, C)
        q = _random_dirichlet(rng, C)
        if rng.random() < 0.05:
            p = np.zeros(C)
            p[rng.integers(C)] = 1.0
        tv, bound = pinsker_check(p, q)
        gap = tv - bound
        worst = max(worst, gap)
        if gap > 1e-12:
            violations += 1
    return violations, worst


def decomposition_trials(trials=50, seed=0, n_tasks=3, n_population=200, dim=6, mc_draws=2000):
    """Random shared-draw decomposition checks; returns the residual list."""
    residuals = []
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        models = []
        posteriors = []
        for _ in range(n_tasks):
            model = random_linear_task(rng, n_population=n_population, dim=dim, bound=50.0)
            models.append(model)
            posteriors.append(
                GaussianPosterior(mean=rng.standard_normal(dim), sigma2=float(rng.uniform(0.01, 0.5)))
            )
        alpha = rng.dirichlet(np.ones(n_tasks))
        beta = rng.dirichlet(np.ones(n_tasks))
        residual, _ = decomposition_check(
            posteriors, models, alpha, beta, mc_draws=mc_draws, seed=int(rng.integers(2**32))
        )
        residuals.append(residual)
    return residuals
