"""Task-vector algebra.

A task vector is the ParamSet-shaped delta theta_t - theta_0 between a
fine-tuned checkpoint and the shared pretrained checkpoint. The merged model
is the group-wise affine combination

    theta^g = theta_0^g + sum_t lam[t, g] * tau_t^g

where a "group" is one weight matrix or one bias vector (so a network with
n layers has L = 2n groups). Because the parameterization is affine in lam,
the exact gradient of any scalar loss with respect to lam is the group-wise
inner product of the parameter gradient with each task vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet


def compute_task_vector(theta_0: ParamSet, theta_t: ParamSet) -> ParamSet:
    """Element-wise difference theta_t - theta_0 (shapes must match)."""
    return theta_t - theta_0


@dataclass
class MergeCoefficients:
    """T x L matrix of per-task, per-group scaling coefficients."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("coefficient values must be 2-d (tasks, groups)")
        if not np.isfinite(self.values).all():
            raise ValueError("coefficient values must be finite")

    @property
    def n_tasks(self):
        return self.values.shape[0]

    @property
    def n_groups(self):
        return self.values.shape[1]

    @classmethod
    def zeros(cls, n_tasks, n_groups):
        return cls(np.zeros((n_tasks, n_groups)))

    @classmethod
    def constant(cls, value, n_tasks, n_groups):
        return cls(np.full((n_tasks, n_groups), float(value)))

    def to_json_obj(self):
        return {
            "tasks": self.n_tasks,
            "groups": self.n_groups,
            "values": [[float(v) for v in row] for row in self.values],
        }

    @classmethod
    def from_json_obj(cls, obj):
        values = np.array(obj["values"], dtype=np.float64)
        if values.shape != (obj["tasks"], obj["groups"]):
            raise ValueError("coefficient matrix shape disagrees with declared dims")
        return cls(values)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_obj(), f)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_obj(json.load(f))


def params_digest(net: ParamSet) -> str:
    """sha256 over the raw group bytes; stable id for provenance records."""
    h = hashlib.sha256()
    for g in net.groups():
        h.update(np.ascontiguousarray(g).tobytes())
    return h.hexdigest()


@dataclass
class MergedModel:
    """A merged ParamSet together with enough provenance to re-derive it."""

    params: ParamSet
    provenance: dict = field(default_factory=dict)


def _check_merge_inputs(theta_0, taus, lam_values):
    if len(taus) == 0:
        raise ValueError("need at least one task vector")
    for t, tau in enumerate(taus):
        if not theta_0.same_shape(tau):
            raise ValueError(f"task vector {t} shape does not match theta_0")
    lam_values = np.asarray(lam_values, dtype=np.float64)
    if lam_values.shape != (len(taus), theta_0.n_groups):
        raise ValueError(
            f"coefficient shape {lam_values.shape} != "
            f"(tasks={len(taus)}, groups={theta_0.n_groups})"
        )
    return lam_values


def merge_params(theta_0: ParamSet, taus, lam_values) -> ParamSet:
    """Group-wise affine combination theta_0 + sum_t lam[t, g] * tau_t^g.

    lam_values is a raw (T, L) array; this is the hot path used inside
    optimization loops. construct_merged wraps it with provenance.
    """
    lam_values = _check_merge_inputs(theta_0, taus, lam_values)
    groups = [g.copy() for g in theta_0.groups()]
    for t, tau in enumerate(taus):
        tg = tau.groups()
        for g in range(len(groups)):
            c = lam_values[t, g]
            if c != 0.0:
                groups[g] += c * tg[g]
    return ParamSet(groups[0::2], groups[1::2])


def construct_merged(theta_0: ParamSet, taus, lam: MergeCoefficients) -> MergedModel:
    """Merge with a provenance record (input digests + coefficient snapshot)."""
    params = merge_params(theta_0, taus, lam.values)
    provenance = {
        "theta_0": params_digest(theta_0),
        "tasks": [params_digest(tau) for tau in taus],
        "coefficients": lam.to_json_obj(),
    }
    return MergedModel(params=params, provenance=provenance)


def grad_wrt_lambda(theta_0: ParamSet, taus, lam: MergeCoefficients, loss_grad: ParamSet):
    """Exact d(loss)/d(lam) given the parameter gradient at theta_lam.

    Entry (t, g) is the inner product of the group-g parameter gradient with
    task vector t's group g. Exact because the merge is affine in lam.
    Returns a raw (T, L) array.
    """
    _check_merge_inputs(theta_0, taus, lam.values)
    if not loss_grad.same_shape(theta_0):
        raise ValueError("loss gradient shape does not match theta_0")
    out = np.empty((len(taus), theta_0.n_groups))
    ggroups = loss_grad.groups()
    for t, tau in enumerate(taus):
        for g, tg in enumerate(tau.groups()):
            out[t, g] = float(np.vdot(ggroups[g], tg))
    return out


def l2_penalty(lam_values, omega):
    """Optional penalty omega * ||lam||^2 and its gradient 2 * omega * lam."""
    lam_values = np.asarray(lam_values, dtype=np.float64)
    if omega == 0.0:
        return 0.0, np.zeros_like(lam_values)
    value = float(omega * np.sum(lam_values * lam_values))
    return value, 2.0 * omega * lam_values
