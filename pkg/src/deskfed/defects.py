"""Defect injection for client models and their ground-truth marks.

Three defect kinds, composable on one client:
  data_contamination  pixel += g * degree during local training
  label_shuffle       batch labels permuted during local training
  comm_loss           last-two-layer params += g * degree on upload
with g ~ N(0,1). Training-time kinds apply contamination first, then the
shuffle; comm_loss hits the finished upload. All draws come from substreams
derived from (plan.seed, round, client), so clean clients never consume
randomness and stay bit-identical to a defect-free run.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nets import Batch, FlatParams, layer_slices
from .seeding import derive_rng

KINDS = ("data_contamination", "comm_loss", "label_shuffle")


@dataclass(frozen=True)
class DefectPlan:
    """Which clients are defective this episode, how badly, and in what way."""

    defective_clients: frozenset
    degree: float
    kinds: tuple
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "defective_clients",
                           frozenset(int(c) for c in self.defective_clients))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if not 0.0 <= self.degree <= 1.0:
            raise ValueError(f"degree must lie in [0,1], got {self.degree}")
        unknown = [k for k in self.kinds if k not in KINDS]
        if unknown:
            raise ValueError(f"unknown defect kinds {unknown}")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError("duplicate defect kinds")
        if self.defective_clients and not self.kinds:
            raise ValueError("kinds must be non-empty when any client is defective")

    @property
    def m(self) -> int:
        return len(self.defective_clients)

    def is_defective(self, client_id: int) -> bool:
        return int(client_id) in self.defective_clients


@dataclass(frozen=True)
class QualityMark:
    """Ground-truth defect degree (or a model's prediction of it)."""

    value: float

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"mark must be finite and >= 0, got {self.value}")


def sample_plan(num_clients: int, m: int, degree: float, kinds, seed: int,
                episode: int = 0) -> DefectPlan:
    """Draw M defective clients for one episode."""
    if not 0 <= m <= num_clients:
        raise ValueError(f"m={m} infeasible for {num_clients} clients")
    rng = derive_rng(seed, "plan", episode)
    chosen = rng.choice(num_clients, size=m, replace=False) if m else []
    return DefectPlan(frozenset(int(c) for c in chosen), degree, tuple(kinds), seed)


def defect_rng(plan: DefectPlan, round_idx: int, client_id: int,
               stage: str) -> np.random.Generator:
    return derive_rng(plan.seed, "defect", stage, round_idx, client_id)


def contaminate_batch(batch: Batch, degree: float,
                      rng: np.random.Generator) -> Batch:
    """Add g*degree to every pixel, then clip back into [0,1]."""
    if degree == 0.0:
        return batch
    noise = rng.normal(0.0, 1.0, batch.inputs.shape) * degree
    return Batch(np.clip(batch.inputs + noise, 0.0, 1.0), batch.labels)


def perturb_comm(params: FlatParams, degree: float,
                 rng: np.random.Generator) -> FlatParams:
    """Add g*degree to every parameter of the final two layers."""
    if len(params.manifest) < 2:
        raise ValueError("comm defect needs a manifest with >= 2 layers")
    if degree == 0.0:
        return params
    values = params.values.copy()
    for w_sl, b_sl in layer_slices(params.manifest)[-2:]:
        values[w_sl] += rng.normal(0.0, 1.0, w_sl.stop - w_sl.start) * degree
        values[b_sl] += rng.normal(0.0, 1.0, b_sl.stop - b_sl.start) * degree
    return FlatParams(values, params.manifest)


def shuffle_labels(batch: Batch, rng: np.random.Generator) -> Batch:
    """Uniformly permute the batch's labels; inputs untouched."""
    if len(batch) < 2:
        warnings.warn("batch too small to shuffle; labels left as-is")
        return batch
    perm = rng.permutation(len(batch))
    return Batch(batch.inputs, batch.labels[perm])


def ground_truth_mark(client_id: int, plan: DefectPlan) -> QualityMark:
    return QualityMark(plan.degree if plan.is_defective(client_id) else 0.0)


def apply_training_defects(batch: Batch, plan: DefectPlan, round_idx: int,
                           client_id: int) -> Batch:
    """Contamination then label shuffle, for defective clients only."""
    if not plan.is_defective(client_id):
        return batch
    if "data_contamination" in plan.kinds:
        batch = contaminate_batch(
            batch, plan.degree, defect_rng(plan, round_idx, client_id, "pixels"))
    if "label_shuffle" in plan.kinds:
        batch = shuffle_labels(
            batch, defect_rng(plan, round_idx, client_id, "labels"))
    return batch


def apply_comm_defect(params: FlatParams, plan: DefectPlan, round_idx: int,
                      client_id: int) -> FlatParams:
    """Last-two-layer noise on the uploaded parameters of defective clients."""
    if not plan.is_defective(client_id) or "comm_loss" not in plan.kinds:
        return params
    return perturb_comm(
        params, plan.degree, defect_rng(plan, round_idx, client_id, "comm"))
