"""Minimal dense feed-forward network engine.

Forward evaluation, probabilistic losses (cross-entropy, KL to a teacher,
entropy) and manual reverse-mode gradients with respect to parameters.
Everything is float64 and pure: no internal state, no framework.

Matrices are 2-d numpy arrays; a weight has shape (out_dim, in_dim) and a
layer computes act(x @ W.T + b). Probability vectors are 1-d arrays that sum
to one; batches of them are rows of a 2-d array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

# Log arguments are clamped here for numerical safety in CE/KL.
LOG_EPS = 1e-12

# Tolerance for "rows sum to one" validation of probability arrays.
PROB_ATOL = 1e-9


@dataclass(frozen=True)
class LayerSpec:
    """Shape and activation of one dense layer."""

    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")


class ParamSet:
    """Ordered per-layer dense parameters: weight (out, in) and bias (out,).

    Consecutive layer dimensions must chain (out_dim of layer l equals in_dim
    of layer l+1). Shape equality is the compatibility predicate for all
    arithmetic. Task-vector deltas are ParamSets too; they share the shape of
    the checkpoint they came from.
    """

    __slots__ = ("weights", "biases")

    def __init__(self, weights, biases):
        if len(weights) != len(biases):
            raise ValueError("weights and biases must have equal layer counts")
        if not weights:
            raise ValueError("a ParamSet needs at least one layer")
        ws, bs = [], []
        for l, (w, b) in enumerate(zip(weights, biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1:
                raise ValueError(f"layer {l}: weight must be 2-d and bias 1-d")
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: bias length {b.shape[0]} != out_dim {w.shape[0]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {l}: non-finite parameter entries")
            ws.append(w)
            bs.append(b)
        for l in range(len(ws) - 1):
            if ws[l + 1].shape[1] != ws[l].shape[0]:
                raise ValueError(
                    f"layer dims do not chain: layer {l} out_dim {ws[l].shape[0]} "
                    f"vs layer {l + 1} in_dim {ws[l + 1].shape[1]}"
                )
        self.weights = ws
        self.biases = bs

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_groups(self):
        """Parameter groups: each weight matrix and each bias vector."""
        return 2 * len(self.weights)

    def group(self, g):
        """Group g in the fixed order W0, b0, W1, b1, ..."""
        w, b = divmod(g, 2)
        return self.weights[w] if b == 0 else self.biases[w]

    def groups(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def shape_signature(self):
        return tuple(w.shape for w in self.weights)

    def same_shape(self, other):
        return self.shape_signature() == other.shape_signature()

    def copy(self):
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return ParamSet(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
        )

    def flatten(self):
        """All parameters as one 1-d vector, in group order."""
        return np.concatenate([g.ravel() for g in self.groups()])

    def _require_same_shape(self, other):
        if not isinstance(other, ParamSet) or not self.same_shape(other):
            raise ValueError("ParamSet shapes do not match")

    def __add__(self, other):
        self._require_same_shape(other)
        return ParamSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def __sub__(self, other):
        self._require_same_shape(other)
        return ParamSet(
            [a - b for a, b in zip(self.weights, other.weights)],
            [a - b for a, b in zip(self.biases, other.biases)],
        )

    def __mul__(self, scalar):
        s = float(scalar)
        return ParamSet([w * s for w in self.weights], [b * s for b in self.biases])

    __rmul__ = __mul__

    def allclose(self, other, atol=0.0, rtol=0.0):
        if not self.same_shape(other):
            return False
        return all(
            np.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.groups(), other.groups())
        )


@dataclass
class Batch:
    """Inputs (n, d) with optional integer class labels (n,)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError("batch inputs must be 2-d (n, d)")
        if not np.isfinite(self.inputs).all():
            raise ValueError("batch inputs must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
                raise ValueError("labels must be 1-d with one entry per input row")
            if not np.issubdtype(self.labels.dtype, np.integer):
                raise ValueError("labels must be integers")
            if self.labels.min(initial=0) < 0:
                raise ValueError("labels must be nonnegative class indices")

    def __len__(self):
        return self.inputs.shape[0]


def check_specs(net: ParamSet, specs):
    """Validate that specs describe exactly the shapes in net."""
    if len(specs) != net.n_layers:
        raise ValueError(f"{len(specs)} layer specs for {net.n_layers} layers")
    for l, spec in enumerate(specs):
        w = net.weights[l]
        if w.shape != (spec.out_dim, spec.in_dim):
            raise ValueError(
                f"layer {l}: weight shape {w.shape} does not match spec "
                f"({spec.out_dim}, {spec.in_dim})"
            )


def _apply_act(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _act_deriv(z, h, activation):
    # h = act(z) is passed in so tanh can reuse the forward value.
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


def forward(net: ParamSet, specs, x):
    """Logits (n, out_dim) of the network on inputs x (n, d)."""
    logits, _, _ = _forward_trace(net, specs, x)
    return logits


def _forward_trace(net, specs, x):
    """Forward pass keeping pre- and post-activation values per layer.

    Returns (output, hs, zs) where hs[0] is the input and hs[l+1] = act(zs[l]).
    """
    check_specs(net, specs)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("inputs must be 2-d (n, d)")
    if x.shape[1] != specs[0].in_dim:
        raise ValueError(f"input dim {x.shape[1]} != first layer in_dim {specs[0].in_dim}")
    hs = [x]
    zs = []
    h = x
    for l, spec in enumerate(specs):
        z = h @ net.weights[l].T + net.biases[l]
        h = _apply_act(z, spec.activation)
        zs.append(z)
        hs.append(h)
    return hs[-1], hs, zs


def softmax(logits):
    """Row-wise stable softmax; 1-d input gives a single distribution."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax needs finite logits")
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def check_prob(p):
    """Validate a probability vector (entries >= 0, sums to 1 within 1e-9)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probability vector must be 1-d")
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValueError("probabilities must be finite and nonnegative")
    if abs(p.sum() - 1.0) > PROB_ATOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def one_hot(labels, num_classes):
    labels = np.asarray(labels)
    if (labels < 0).any() or (labels >= num_classes).any():
        raise IndexError("label out of range")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(q, label):
    """-log q(label) with the log argument clamped at 1e-12."""
    q = check_prob(q)
    label = int(label)
    if label < 0 or label >= q.shape[0]:
        raise IndexError(f"label {label} out of range for {q.shape[0]} classes")
    return float(-np.log(max(q[label], LOG_EPS)))


def kl_div(p, q):
    """KL(p || q) = sum_y p(y) log(p(y)/q(y)); terms with p(y)=0 contribute 0.

    q is clamped at 1e-12 inside the log. Always >= 0 up to that clamp.
    """
    p = check_prob(p)
    q = check_prob(q)
    if p.shape != q.shape:
        raise ValueError("distributions must share a label set")
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], LOG_EPS)))))


def entropy(q):
    """-sum q log q with 0 log 0 = 0. Lies in [0, log K]."""
    q = check_prob(q)
    mask = q > 0.0
    return float(-np.sum(q[mask] * np.log(q[mask])))


LOSS_KINDS = ("ce", "kl", "entropy")


def _loss_rows(probs, loss_kind, labels=None, teacher_probs=None):
    """Per-row loss values for a (n, C) matrix of predicted distributions."""
    n, C = probs.shape
    logp = np.log(np.maximum(probs, LOG_EPS))
    if loss_kind == "ce":
        if labels is None:
            raise ValueError("cross-entropy needs labels")
        if (labels >= C).any():
            raise IndexError("label out of range")
        return -logp[np.arange(n), labels]
    if loss_kind == "kl":
        if teacher_probs is None:
            raise ValueError("kl loss needs teacher distributions")
        p = np.asarray(teacher_probs, dtype=np.float64)
        if p.shape != probs.shape:
            raise ValueError("teacher distribution shape must match the batch outputs")
        plogp = np.where(p > 0.0, p * np.log(np.maximum(p, LOG_EPS)), 0.0)
        return plogp.sum(axis=1) - (p * logp).sum(axis=1)
    if loss_kind == "entropy":
        return -(probs * np.where(probs > 0.0, logp, 0.0)).sum(axis=1)
    raise ValueError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")


def _dloss_dlogits(probs, loss_kind, labels=None, teacher_probs=None):
    """Per-row gradient of the loss with respect to the logits."""
    n, C = probs.shape
    if loss_kind == "ce":
        return probs - one_hot(labels, C)
    if loss_kind == "kl":
        return probs - np.asarray(teacher_probs, dtype=np.float64)
    if loss_kind == "entropy":
        logq = np.log(np.maximum(probs, LOG_EPS))
        ent = -(probs * np.where(probs > 0.0, logq, 0.0)).sum(axis=1, keepdims=True)
        return -probs * (logq + ent)
    raise ValueError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")


def batch_loss(net, specs, batch, loss_kind, teacher_probs=None):
    """Mean loss over the batch rows (softmax applied to the logits)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    logits, _, _ = _forward_trace(net, specs, batch.inputs)
    probs = softmax(logits)
    rows = _loss_rows(probs, loss_kind, labels=batch.labels, teacher_probs=teacher_probs)
    return float(rows.mean())


def loss_and_grad(net, specs, batch, loss_kind, teacher_probs=None):
    """Mean batch loss and its parameter gradient from a single forward pass."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, hs, zs = _forward_trace(net, specs, batch.inputs)
    probs = softmax(hs[-1])
    n = probs.shape[0]
    rows = _loss_rows(probs, loss_kind, labels=batch.labels, teacher_probs=teacher_probs)
    g = _dloss_dlogits(probs, loss_kind, labels=batch.labels, teacher_probs=teacher_probs) / n
    gws = [None] * net.n_layers
    gbs = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        delta = g * _act_deriv(zs[l], hs[l + 1], specs[l].activation)
        gws[l] = delta.T @ hs[l]
        gbs[l] = delta.sum(axis=0)
        if l > 0:
            g = delta @ net.weights[l]
    return float(rows.mean()), ParamSet(gws, gbs)


def backward_params(net, specs, batch, loss_kind, teacher_probs=None):
    """Gradient of the mean batch loss with respect to every parameter.

    Parameters
    ----------
    net, specs : the network and its layer specs.
    batch : Batch; labels are required for loss_kind "ce".
    loss_kind : "ce" (to labels), "kl" (to teacher distributions), "entropy".
    teacher_probs : (n, C) teacher distributions, required for "kl".

    Returns
    -------
    ParamSet shaped exactly like net, holding d(mean loss)/d(parameter).
    """
    _, grad = loss_and_grad(net, specs, batch, loss_kind, teacher_probs=teacher_probs)
    return grad


def accuracy(net, specs, batch):
    """Fraction of batch rows whose argmax logit matches the label."""
    if batch.labels is None:
        raise ValueError("accuracy needs a labeled batch")
    logits = forward(net, specs, batch.inputs)
    return float((logits.argmax(axis=1) == batch.labels).mean())


# --- checkpoint serialization ---------------------------------------------
#
# The on-disk interchange for every module: a JSON object
#   {"layers": [{"w": {"rows": r, "cols": c, "data": [...]}, "b": [...],
#                "act": "relu"}, ...]}
# with row-major data and full-precision floats (repr round-trip).


def params_to_json_obj(net: ParamSet, specs):
    check_specs(net, specs)
    layers = []
    for l, spec in enumerate(specs):
        w = net.weights[l]
        layers.append(
            {
                "w": {"rows": w.shape[0], "cols": w.shape[1], "data": [float(v) for v in w.ravel()]},
                "b": [float(v) for v in net.biases[l]],
                "act": spec.activation,
            }
        )
    return {"layers": layers}


def params_from_json_obj(obj):
    try:
        layers = obj["layers"]
    except (TypeError, KeyError):
        raise ValueError("checkpoint JSON must have a 'layers' list")
    weights, biases, specs = [], [], []
    for rec in layers:
        wrec = rec["w"]
        w = np.array(wrec["data"], dtype=np.float64).reshape(wrec["rows"], wrec["cols"])
        b = np.array(rec["b"], dtype=np.float64)
        weights.append(w)
        biases.append(b)
        specs.append(LayerSpec(in_dim=wrec["cols"], out_dim=wrec["rows"], activation=rec["act"]))
    return ParamSet(weights, biases), tuple(specs)


def save_params(path, net, specs):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params_to_json_obj(net, specs), f)
        f.write("\n")


def load_params(path):
    with open(path, "r", encoding="utf-8") as f:
        return params_from_json_obj(json.load(f))
