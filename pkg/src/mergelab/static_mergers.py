"""Data-free and closed-form data-dependent merging baselines.

Five ways to combine fine-tuned checkpoints that share a pretrained parent:

- simple_average: unweighted mean of the checkpoints.
- task_arithmetic: theta_0 + scale * sum of task vectors.
- ties_merge: trim each task vector to its largest-magnitude entries, elect
  a per-coordinate sign, then average only the sign-agreeing survivors.
- fisher_merge: per-parameter weighted mean, weights from an empirical
  diagonal Fisher estimate.
- regmean_merge: per linear layer, the closed-form least-squares combination
  of the task weight matrices under each task's input Gram statistics.

All mergers are deterministic given their inputs and explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .nn import ParamSet, _forward_trace, check_specs, softmax


class DegenerateStatsError(ValueError):
    """Accumulated statistics too singular to solve, even after jitter."""


@dataclass(frozen=True)
class TiesConfig:
    """keep_fraction of largest-magnitude entries kept per task vector."""

    keep_fraction: float = 0.20
    scale: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")


@dataclass(frozen=True)
class FisherConfig:
    """num_samples caps the rows used (None = whole batch); floor > 0."""

    num_samples: int | None = None
    floor: float = 1e-6

    def __post_init__(self):
        if self.floor <= 0.0:
            raise ValueError("floor must be > 0")
        if self.num_samples is not None and self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def _check_same_shapes(thetas):
    if len(thetas) == 0:
        raise ValueError("need at least one model")
    for t, theta in enumerate(thetas[1:], start=1):
        if not thetas[0].same_shape(theta):
            raise ValueError(f"model {t} shape does not match model 0")


def simple_average(thetas) -> ParamSet:
    """Element-wise arithmetic mean of the checkpoints."""
    _check_same_shapes(thetas)
    inv = 1.0 / len(thetas)
    acc = thetas[0] * inv
    for theta in thetas[1:]:
        acc = acc + theta * inv
    return acc


def task_arithmetic(theta_0: ParamSet, taus, scale: float = 0.2) -> ParamSet:
    """theta_0 + scale * sum_t tau_t."""
    _check_same_shapes([theta_0, *taus])
    acc = theta_0.copy()
    for tau in taus:
        acc = acc + tau * scale
    return acc


def _flatten_groups(ps: ParamSet):
    return np.concatenate([g.ravel() for g in ps.groups()])


def _unflatten_like(flat, ref: ParamSet) -> ParamSet:
    groups = []
    pos = 0
    for g in ref.groups():
        groups.append(flat[pos : pos + g.size].reshape(g.shape))
        pos += g.size
    return ParamSet(groups[0::2], groups[1::2])


def ties_merge(theta_0: ParamSet, taus, cfg: TiesConfig = TiesConfig()) -> ParamSet:
    """Trim, elect sign, disjoint-mean; returns theta_0 + scale * merged.

    Trimming keeps the top ceil(keep_fraction * n) entries of each task
    vector by absolute value, globally across all parameter groups, with
    magnitude ties broken by lower flat index. The elected sign at each
    coordinate is the sign of the sum of kept values; the merged entry is
    the mean of kept values agreeing with that sign, or 0 if none survive.
    """
    _check_same_shapes([theta_0, *taus])
    flat_taus = np.stack([_flatten_groups(tau) for tau in taus])
    T, n = flat_taus.shape
    k = max(1, math.ceil(cfg.keep_fraction * n))

    kept = np.zeros_like(flat_taus)
    for t in range(T):
        # Stable argsort on -|v|: equal magnitudes keep ascending flat index.
        order = np.argsort(-np.abs(flat_taus[t]), kind="stable")
        idx = order[:k]
        kept[t, idx] = flat_taus[t, idx]

    elected = np.sign(kept.sum(axis=0))
    agree = (np.sign(kept) == elected) & (kept != 0.0)
    counts = agree.sum(axis=0)
    totals = np.where(agree, kept, 0.0).sum(axis=0)
    merged = np.divide(totals, counts, out=np.zeros(n), where=counts > 0)

    return theta_0 + _unflatten_like(merged, theta_0) * cfg.scale


def sample_model_labels(probs, rng):
    """Draw one label per row from its softmax distribution.

    Inverse-CDF on the row cumsum: label = #\\{k : cdf_k <= u\\}, clipped to the
    last class. This exact algorithm is part of the contract so that tests
    can reproduce the draws from the same seed.
    """
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    labels = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(labels, probs.shape[1] - 1)


def estimate_diag_fisher(
    theta_t: ParamSet,
    specs,
    batch,
    cfg: FisherConfig = FisherConfig(),
    seed: int = 0,
    normalize: bool = True,
) -> ParamSet:
    """Empirical diagonal Fisher: mean squared gradient of the log-probability
    of a label sampled from the model's own softmax (fixed seed).

    The floor is applied first; with normalize=True the result is then scaled
    so its entries have global mean 1 (per-task normalization). Entries are
    strictly positive either way.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = batch.inputs
    if cfg.num_samples is not None:
        x = x[: cfg.num_samples]
        if x.shape[0] == 0:
            raise ValueError("num_samples leaves an empty batch")
    logits, hs, zs = _forward_trace(theta_t, specs, x)
    probs = softmax(logits)
    n = probs.shape[0]
    labels = sample_model_labels(probs, np.random.default_rng(seed))

    # Per-sample gradient of -log q(label) wrt the logits.
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0

    # Per-sample weight gradients are rank-1 (delta_i outer h_i), so their
    # squares factor: mean_i (delta_i^2 outer h_i^2).
    from .nn import _act_deriv

    fws = [None] * theta_t.n_layers
    fbs = [None] * theta_t.n_layers
    g = delta
    for l in range(theta_t.n_layers - 1, -1, -1):
        d = g * _act_deriv(zs[l], hs[l + 1], specs[l].activation)
        fws[l] = (d * d).T @ (hs[l] * hs[l]) / n
        fbs[l] = (d * d).mean(axis=0)
        if l > 0:
            g = d @ theta_t.weights[l]

    fisher = ParamSet([np.maximum(w, cfg.floor) for w in fws], [np.maximum(b, cfg.floor) for b in fbs])
    if normalize:
        flat = fisher.flatten()
        fisher = fisher * (1.0 / flat.mean())
    return fisher


def fisher_merge(thetas, fishers) -> ParamSet:
    """Element-wise (sum_t F_t * theta_t) / (sum_t F_t)."""
    _check_same_shapes(thetas)
    if len(fishers) != len(thetas):
        raise ValueError("need one Fisher estimate per model")
    _check_same_shapes([thetas[0], *fishers])
    for f in fishers:
        for g in f.groups():
            if (g <= 0.0).any():
                raise ValueError("Fisher weights must be strictly positive")
    num = thetas[0].zeros_like()
    den = thetas[0].zeros_like()
    for theta, f in zip(thetas, fishers):
        num = num + ParamSet(
            [fw * tw for fw, tw in zip(f.weights, theta.weights)],
            [fb * tb for fb, tb in zip(f.biases, theta.biases)],
        )
        den = den + f
    return ParamSet(
        [nw / dw for nw, dw in zip(num.weights, den.weights)],
        [nb / db for nb, db in zip(num.biases, den.biases)],
    )


@dataclass
class GramStats:
    """Accumulated input Gram matrix X^T X per linear layer, plus row count."""

    grams: list
    count: int

    def __post_init__(self):
        for l, g in enumerate(self.grams):
            g = np.asarray(g, dtype=np.float64)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError(f"layer {l}: Gram must be square")
            if not np.allclose(g, g.T, atol=1e-9):
                raise ValueError(f"layer {l}: Gram must be symmetric")
            self.grams[l] = g


def collect_gram_stats(net: ParamSet, specs, inputs) -> GramStats:
    """Gram statistics of each linear layer's input under this model."""
    check_specs(net, specs)
    _, hs, _ = _forward_trace(net, specs, np.asarray(inputs, dtype=np.float64))
    grams = [hs[l].T @ hs[l] for l in range(net.n_layers)]
    return GramStats(grams=grams, count=hs[0].shape[0])


def _spd_solve(S, rhs):
    dim = S.shape[0]
    try:
        c = scipy.linalg.cho_factor(S, lower=True)
    except scipy.linalg.LinAlgError:
        jitter = 1e-8 * np.trace(S) / dim
        try:
            c = scipy.linalg.cho_factor(S + jitter * np.eye(dim), lower=True)
        except scipy.linalg.LinAlgError:
            raise DegenerateStatsError(
                "accumulated Gram matrix is singular even after diagonal jitter"
            )
    return scipy.linalg.cho_solve(c, rhs)


def regmean_merge(thetas, grams, rho_off: float = 0.6) -> ParamSet:
    """Closed-form least-squares merge of linear layers under input Grams.

    Per layer, solves (sum_t G~_t) W_merged^T = sum_t G~_t W_t^T where G~
    scales the off-diagonal Gram entries by rho_off. Biases are simple-
    averaged. Raises DegenerateStatsError when the accumulated Gram stays
    singular after jitter.
    """
    _check_same_shapes(thetas)
    if len(grams) != len(thetas):
        raise ValueError("need one GramStats per model")
    if not 0.0 < rho_off <= 1.0:
        raise ValueError(f"rho_off must be in (0, 1], got {rho_off}")
    n_layers = thetas[0].n_layers
    for t, gs in enumerate(grams):
        if len(gs.grams) != n_layers:
            raise ValueError(f"GramStats {t} does not cover every layer")

    weights = []
    for l in range(n_layers):
        S = None
        rhs = None
        for theta, gs in zip(thetas, grams):
            G = gs.grams[l]
            Gt = rho_off * G + (1.0 - rho_off) * np.diag(np.diag(G))
            S = Gt if S is None else S + Gt
            contrib = Gt @ theta.weights[l].T
            rhs = contrib if rhs is None else rhs + contrib
        weights.append(_spd_solve(S, rhs).T)

    biases = [np.mean([theta.biases[l] for theta in thetas], axis=0) for l in range(n_layers)]
    return ParamSet(weights, biases)
