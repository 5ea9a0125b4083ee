"""Independent reference implementations used to cross-check the package.

Everything here is written the slow, obvious way: explicit Python loops,
per-sample math, scalar recurrences. None of it imports from mergelab, so a
bug in the package cannot hide in its own oracle.
"""

import math

import numpy as np


def act_ref(z, activation):
    if activation == "relu":
        return max(z, 0.0)
    if activation == "tanh":
        return math.tanh(z)
    if activation == "identity":
        return z
    raise ValueError(activation)


def forward_loop(weights, biases, activations, x_row):
    """One input row through the MLP with scalar loops. Returns the logits."""
    h = list(x_row)
    for W, b, act in zip(weights, biases, activations):
        out = []
        for i in range(len(b)):
            z = b[i]
            for j in range(len(h)):
                z += W[i][j] * h[j]
            out.append(act_ref(z, act))
        h = out
    return np.array(h)


def softmax_ref(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def kl_ref(p, q, eps=1e-12):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            total += pi * (math.log(pi) - math.log(max(qi, eps)))
    return total


def entropy_ref(q):
    return -sum(qi * math.log(qi) for qi in q if qi > 0.0)


def ce_ref(q, label, eps=1e-12):
    return -math.log(max(q[label], eps))


def batch_loss_ref(weights, biases, activations, inputs, loss_kind,
                   labels=None, teacher_probs=None):
    """Mean loss over rows, each computed with the scalar-loop forward."""
    total = 0.0
    for i, row in enumerate(inputs):
        q = softmax_ref(forward_loop(weights, biases, activations, row))
        if loss_kind == "ce":
            total += ce_ref(q, labels[i])
        elif loss_kind == "kl":
            total += kl_ref(teacher_probs[i], q)
        elif loss_kind == "entropy":
            total += entropy_ref(q)
        else:
            raise ValueError(loss_kind)
    return total / len(inputs)


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def ties_literal(taus_flat, theta0_flat, keep_fraction, scale):
    """TIES by its literal steps: trim, elect signs, disjoint mean, rescale."""
    T = len(taus_flat)
    n = len(theta0_flat)
    k = max(1, math.ceil(keep_fraction * n))

    kept = [[0.0] * n for _ in range(T)]
    for t in range(T):
        # Top-k by |value|; ties go to the lower index (stable sort on -|v|).
        order = sorted(range(n), key=lambda i: (-abs(taus_flat[t][i]), i))
        for i in order[:k]:
            kept[t][i] = taus_flat[t][i]

    def sign(v):
        return 1 if v > 0 else (-1 if v < 0 else 0)

    merged = [0.0] * n
    for i in range(n):
        elected = sign(sum(kept[t][i] for t in range(T)))
        agreeing = [kept[t][i] for t in range(T)
                    if kept[t][i] != 0.0 and sign(kept[t][i]) == elected]
        if agreeing:
            merged[i] = sum(agreeing) / len(agreeing)

    return np.array([theta0_flat[i] + scale * merged[i] for i in range(n)])


def fisher_diag_loop(weights, biases, activations, inputs, labels, floor,
                     normalize):
    """Per-sample squared gradients of -log q(label), averaged, then floored.

    Backprop is done one sample at a time with explicit loops, so the rank-1
    factorization used by the fast path never enters.
    """
    n_layers = len(weights)
    sq_w = [np.zeros_like(np.asarray(W, dtype=np.float64)) for W in weights]
    sq_b = [np.zeros_like(np.asarray(b, dtype=np.float64)) for b in biases]
    n = len(inputs)
    for s in range(n):
        hs = [np.asarray(inputs[s], dtype=np.float64)]
        zs = []
        for W, b, act in zip(weights, biases, activations):
            z = np.asarray(W) @ hs[-1] + np.asarray(b)
            zs.append(z)
            hs.append(np.array([act_ref(v, act) for v in z]))
        q = softmax_ref(hs[-1])
        delta = q.copy()
        delta[labels[s]] -= 1.0
        for l in range(n_layers - 1, -1, -1):
            if activations[l] == "relu":
                dact = (zs[l] > 0).astype(float)
            elif activations[l] == "tanh":
                dact = 1.0 - hs[l + 1] ** 2
            else:
                dact = np.ones_like(zs[l])
            d = delta * dact
            sq_w[l] += np.outer(d, hs[l]) ** 2
            sq_b[l] += d**2
            if l > 0:
                delta = np.asarray(weights[l]).T @ d
    fw = [np.maximum(m / n, floor) for m in sq_w]
    fb = [np.maximum(m / n, floor) for m in sq_b]
    if normalize:
        flat = np.concatenate([m.ravel() for pair in zip(fw, fb) for m in pair])
        scale = 1.0 / flat.mean()
        fw = [m * scale for m in fw]
        fb = [m * scale for m in fb]
    return fw, fb


def regmean_layer_ref(task_weights, task_grams, rho_off):
    """Solve the layer normal equations with a dense inverse."""
    S = None
    rhs = None
    for W, G in zip(task_weights, task_grams):
        G = np.asarray(G, dtype=np.float64)
        Gt = rho_off * G + (1.0 - rho_off) * np.diag(np.diag(G))
        S = Gt if S is None else S + Gt
        r = Gt @ np.asarray(W, dtype=np.float64).T
        rhs = r if rhs is None else rhs + r
    return (np.linalg.inv(S) @ rhs).T


def adam_scalar_ref(g_seq, p0, lr=0.001, beta1=0.9, beta2=0.99, eps=1e-8,
                    weight_decay=0.0):
    """Scalar Adam with bias correction and decoupled weight decay."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = p * (1 - lr * weight_decay) - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(p)
    return out


def gaussian_kl_ref(mu_q, s2_q, mu_p, s2_p):
    """KL between isotropic Gaussians, term by term."""
    d = len(mu_q)
    trace = d * s2_q / s2_p
    quad = sum((a - b) ** 2 for a, b in zip(mu_p, mu_q)) / s2_p
    logdet = d * math.log(s2_p / s2_q)
    return 0.5 * (trace + quad - d + logdet)


def random_net(rng, dims, activations=None, scale=1.0):
    """Weights/biases/activation lists for a random MLP with the given dims."""
    if activations is None:
        activations = ["tanh"] * (len(dims) - 2) + ["identity"]
    weights = [scale * rng.standard_normal((dims[i + 1], dims[i]))
               for i in range(len(dims) - 1)]
    biases = [scale * rng.standard_normal(dims[i + 1]) for i in range(len(dims) - 1)]
    return weights, biases, activations
