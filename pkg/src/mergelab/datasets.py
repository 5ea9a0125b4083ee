"""Synthetic multi-task suites and the reference training loops.

A suite holds T classification tasks over a shared input dimension. Each
task is the same C-cluster Gaussian mixture pushed through its own partial
rotation and translation, so tasks are related but not identical: close
enough that fine-tuning updates transfer, far enough apart that no single
model aces all of them. The pretraining pool mixes a small number of
samples from every task, which leaves plenty of headroom for fine-tuning.

All randomness flows through numpy SeedSequence spawning: the same seed
yields byte-identical suites, checkpoints, and logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .adaptive import AdamState, adam_step
from .artifacts import read_csv, write_csv, write_manifest
from .nn import Batch, LayerSpec, ParamSet, accuracy, loss_and_grad


@dataclass(frozen=True)
class TaskSpec:
    """The generative description of one task: an orthogonal rotation and a
    translation applied to the shared class means."""

    rotation: np.ndarray
    shift: np.ndarray


@dataclass
class TaskData:
    train: Batch
    test: Batch
    calib_pool: Batch
    means: np.ndarray  # class means in this task's coordinates, (C, d)


@dataclass
class SyntheticSuite:
    dim: int
    n_classes: int
    noise: float
    sep: float
    seed: int
    tasks: list
    pretrain: Batch

    @property
    def n_tasks(self):
        return len(self.tasks)


def _orthogonal(rng, d):
    # QR with the sign fix makes the factor unique, hence reproducible
    # across BLAS builds that flip column signs.
    m = rng.standard_normal((d, d))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def _partial_rotation(rng, d, angle):
    """Random rotation with principal angles on the order of `angle` radians.

    exp of a scaled random skew-symmetric matrix: angle 0 is the identity,
    large angles approach a generic orthogonal matrix. Scaling the generator
    by 1/sqrt(d) keeps the top principal angle near `angle` regardless of d.
    """
    if angle == 0.0:
        return np.eye(d)
    m = rng.standard_normal((d, d))
    skew = (m - m.T) / (2.0 * math.sqrt(d))
    return expm(angle * skew)


def _base_means(rng, n_classes, dim, target_sep):
    means = rng.standard_normal((n_classes, dim))
    dists = [
        float(np.linalg.norm(means[i] - means[j]))
        for i in range(n_classes)
        for j in range(i + 1, n_classes)
    ]
    return means * (target_sep / min(dists))


def _sample_task(rng, means, noise, n):
    n_classes, dim = means.shape
    labels = rng.integers(0, n_classes, size=n)
    inputs = means[labels] + noise * rng.standard_normal((n, dim))
    return Batch(inputs=inputs, labels=labels)


def gen_suite(
    n_tasks=8,
    n_classes=4,
    dim=16,
    n_train=2000,
    n_test=1000,
    n_calib=512,
    n_pretrain_per_task=64,
    seed=0,
    sep=6.0,
    noise=1.0,
    task_spread=0.25,
):
    """Generate a deterministic multi-task suite.

    Class means are scaled so the minimum pairwise separation is exactly
    sep * noise, which pins the Bayes error of every task near zero while
    keeping the clusters overlapping enough that training matters.

    task_spread sets the rotation angle (radians) between any task's frame
    and the shared one. Small angles give related tasks whose fine-tuning
    updates transfer to each other; large angles give nearly independent
    tasks where merging degenerates to interference.
    """
    if n_tasks < 2:
        raise ValueError("a merging suite needs at least two tasks")
    root = np.random.SeedSequence(seed)
    base_ss, pre_ss, *task_ss = root.spawn(2 + n_tasks)
    base_rng = np.random.default_rng(base_ss)
    base_means = _base_means(base_rng, n_classes, dim, sep * noise)

    tasks = []
    pre_parts = []
    for t in range(n_tasks):
        # One child stream per split: resizing one split (say a wider
        # calibration pool) leaves every other split byte-identical.
        spec_ss, train_ss, test_ss, calib_ss, pool_ss = task_ss[t].spawn(5)
        rng = np.random.default_rng(spec_ss)
        spec = TaskSpec(
            rotation=_partial_rotation(rng, dim, task_spread),
            shift=0.5 * sep * noise * rng.standard_normal(dim),
        )
        means = base_means @ spec.rotation.T + spec.shift
        train = _sample_task(np.random.default_rng(train_ss), means, noise, n_train)
        test = _sample_task(np.random.default_rng(test_ss), means, noise, n_test)
        calib = _sample_task(np.random.default_rng(calib_ss), means, noise, n_calib)
        pre_parts.append(
            _sample_task(np.random.default_rng(pool_ss), means, noise, n_pretrain_per_task)
        )
        tasks.append(TaskData(train=train, test=test, calib_pool=calib, means=means))

    pre_x = np.concatenate([p.inputs for p in pre_parts])
    pre_y = np.concatenate([p.labels for p in pre_parts])
    order = np.random.default_rng(pre_ss).permutation(pre_x.shape[0])
    pretrain = Batch(inputs=pre_x[order], labels=pre_y[order])

    return SyntheticSuite(
        dim=dim,
        n_classes=n_classes,
        noise=noise,
        sep=sep,
        seed=seed,
        tasks=tasks,
        pretrain=pretrain,
    )


def default_specs(dim, n_classes, hidden=(64, 64)):
    """The reference architecture: relu hidden layers, raw logit output."""
    dims = [dim, *hidden]
    specs = [LayerSpec(dims[i], dims[i + 1], "relu") for i in range(len(dims) - 1)]
    specs.append(LayerSpec(dims[-1], n_classes, "identity"))
    return specs


def init_params(specs, seed=0):
    """He-scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = []
    biases = []
    for spec in specs:
        scale = math.sqrt(2.0 / spec.in_dim)
        weights.append(scale * rng.standard_normal((spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return ParamSet(weights=weights, biases=biases)


def train_network(theta, specs, data: Batch, epochs, seed=0, lr=1e-3, batch_size=64):
    """Minibatch Adam on softmax cross-entropy; returns (params, loss log).

    The log has one (epoch, mean loss) entry per epoch, averaged over the
    minibatches seen in that epoch.
    """
    if data.labels is None:
        raise ValueError("training needs labeled data")
    params = [g.copy() for g in theta.groups()]
    state = AdamState.init_like(params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = len(data)
    log = []
    current = theta.copy()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            mb = Batch(inputs=data.inputs[sel], labels=data.labels[sel])
            loss, grad = loss_and_grad(current, specs, mb, "ce")
            params, state = adam_step(state, params, list(grad.groups()))
            current = _params_from_groups(params, specs)
            total += loss
            batches += 1
        log.append((epoch, total / batches))
    return current, log


def _params_from_groups(groups, specs):
    weights = [groups[2 * l] for l in range(len(specs))]
    biases = [groups[2 * l + 1] for l in range(len(specs))]
    return ParamSet(weights=weights, biases=biases)


def pretrain(suite: SyntheticSuite, specs=None, epochs=3, seed=0):
    """Train the shared starting point on the mixed low-sample pool.

    The pass count is deliberately small: the shared checkpoint should be
    generically useful (above chance on every task) yet leave each task
    plenty of headroom for fine-tuning. Long pretraining on the mixed pool
    drives per-task accuracy high enough that the later stages have nothing
    left to demonstrate."""
    if specs is None:
        specs = default_specs(suite.dim, suite.n_classes)
    theta_init = init_params(specs, seed=seed)
    return train_network(theta_init, specs, suite.pretrain, epochs, seed=seed + 1)


def finetune_task(theta0: ParamSet, specs, task: TaskData, epochs=30, seed=0):
    """Continue training from the shared starting point on one task."""
    return train_network(theta0, specs, task.train, epochs, seed=seed)


def sample_calibration(suite: SyntheticSuite, k=16, seed=0):
    """Unlabeled calibration batches, k inputs per task, sampled without
    replacement from each task's held-out pool."""
    batches = []
    for t, task in enumerate(suite.tasks):
        pool = task.calib_pool.inputs
        if k > pool.shape[0]:
            raise ValueError(f"task {t}: requested {k} of {pool.shape[0]} calibration inputs")
        rng = np.random.default_rng(np.random.SeedSequence((seed, t)))
        sel = rng.choice(pool.shape[0], size=k, replace=False)
        batches.append(Batch(inputs=pool[sel], labels=None))
    return batches


def test_accuracy(theta, specs, suite, task_index):
    return accuracy(theta, specs, suite.tasks[task_index].test)


# --- on-disk format -----------------------------------------------------------
#
# One meta.json plus one CSV per split (one row per sample: features...,
# label) and a digest manifest. repr-rendered floats round-trip exactly, so
# save -> load -> save reproduces every byte.


def _write_samples(path, batch: Batch, dim):
    header = [f"f{i}" for i in range(dim)] + ["label"]
    rows = [[*batch.inputs[i], int(batch.labels[i])] for i in range(len(batch))]
    write_csv(path, "dataset-v1", header, rows)


def _read_samples(path):
    _, header, rows = read_csv(path)
    if not header or header[-1] != "label":
        raise ValueError(f"{path}: expected feature columns then a label column")
    inputs = np.array([[float(c) for c in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows])
    return Batch(inputs=inputs, labels=labels)


def save_suite(suite: SyntheticSuite, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "suite-v1",
        "dim": suite.dim,
        "n_classes": suite.n_classes,
        "noise": suite.noise,
        "sep": suite.sep,
        "seed": suite.seed,
        "n_tasks": suite.n_tasks,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_samples(out / "pretrain.csv", suite.pretrain, suite.dim)
    for t, task in enumerate(suite.tasks):
        write_csv(
            out / f"task{t}_means.csv",
            "means-v1",
            ["class"] + [f"f{i}" for i in range(suite.dim)],
            [[c, *task.means[c]] for c in range(suite.n_classes)],
        )
        for split in ("train", "test", "calib_pool"):
            _write_samples(out / f"task{t}_{split}.csv", getattr(task, split), suite.dim)
    write_manifest(out)
    return out


def load_suite(in_dir) -> SyntheticSuite:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("format") != "suite-v1":
        raise ValueError("unrecognized suite directory")
    tasks = []
    for t in range(meta["n_tasks"]):
        parts = {
            split: _read_samples(src / f"task{t}_{split}.csv")
            for split in ("train", "test", "calib_pool")
        }
        _, _, mean_rows = read_csv(src / f"task{t}_means.csv")
        means = np.array([[float(c) for c in row[1:]] for row in mean_rows])
        tasks.append(TaskData(means=means, **parts))
    return SyntheticSuite(
        dim=meta["dim"],
        n_classes=meta["n_classes"],
        noise=meta["noise"],
        sep=meta["sep"],
        seed=meta["seed"],
        tasks=tasks,
        pretrain=_read_samples(src / "pretrain.csv"),
    )
