"""Federated round engine: local SGD, weighted aggregation, evaluation.

One round: sample K of the N clients, train each locally from the current
global parameters, apply any upload defects, ask a weight strategy for the
aggregation weights, aggregate, evaluate, broadcast. The strategy sees the
uploads, the local losses, and (for the rule-based oracle) the true defect
flags through a RoundContext.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datasets import Dataset
from .defects import DefectPlan, apply_comm_defect, apply_training_defects
from .nets import Batch, FlatParams, forward_array, loss_and_grad, sgd_step
from .seeding import derive_rng

log = logging.getLogger(__name__)

SIMPLEX_SUM_TOL = 1e-9
SIMPLEX_ENTRY_TOL = 1e-12


def check_simplex(weights: np.ndarray, k: int | None = None) -> np.ndarray:
    """Validate an aggregation weight vector; returns it as float64."""
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if k is not None and weights.size != k:
        raise ValueError(f"expected {k} weights, got {weights.size}")
    if abs(weights.sum() - 1.0) > SIMPLEX_SUM_TOL:
        raise ValueError(f"weights sum to {weights.sum()!r}, not 1")
    if weights.min() < -SIMPLEX_ENTRY_TOL or weights.max() > 1.0 + SIMPLEX_ENTRY_TOL:
        raise ValueError("weight entries outside [0, 1]")
    return weights


@dataclass
class ClientState:
    """One client: its slice of the training data and its current model."""

    id: int
    local_data: np.ndarray
    params: FlatParams
    last_local_loss: float = float("nan")

    def __post_init__(self):
        self.local_data = np.asarray(self.local_data, dtype=np.int64)
        if self.local_data.size == 0:
            raise ValueError(f"client {self.id} has no local data")


@dataclass
class RoundContext:
    """What a weight strategy may look at before choosing weights."""

    round_idx: int
    selected_ids: list
    uploads: list
    local_losses: np.ndarray
    defect_flags: np.ndarray
    server_params: FlatParams


@dataclass
class RoundResult:
    global_params: FlatParams
    selected_ids: list
    weights: np.ndarray
    global_accuracy: float
    fedavg_shadow_accuracy: float
    uploads: list = field(default_factory=list)
    local_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    defect_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def __post_init__(self):
        self.weights = check_simplex(self.weights)
        for name, acc in (("global", self.global_accuracy),
                          ("shadow", self.fedavg_shadow_accuracy)):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"{name} accuracy {acc} outside [0,1]")


WeightStrategy = Callable[[RoundContext], np.ndarray]


def local_train(client: ClientState, global_params: FlatParams,
                dataset: Dataset, epochs: int, batch_size: int, lr: float,
                rng: np.random.Generator,
                defect_hook: Callable[[Batch], Batch] | None = None,
                ) -> tuple[FlatParams, float]:
    """SGD from a copy of the global model on the client's shard.

    Returns the trained parameters and the final-epoch mean batch loss.
    epochs=0 skips training and reports the evaluation loss instead.
    Clients holding fewer than batch_size rows take one full-batch step
    per epoch.
    """
    idx = client.local_data
    if idx.size == 0:
        raise ValueError(f"client {client.id} has no local data")
    params = global_params.copy()
    if epochs == 0:
        batch = Batch(dataset.inputs[idx], dataset.labels[idx])
        loss, _ = loss_and_grad(params, batch)
        client.last_local_loss = loss
        return params, loss
    step = batch_size if idx.size >= batch_size else idx.size
    mean_loss = 0.0
    for _ in range(epochs):
        order = idx[rng.permutation(idx.size)]
        losses = []
        for start in range(0, order.size, step):
            rows = order[start:start + step]
            batch = Batch(dataset.inputs[rows], dataset.labels[rows])
            if defect_hook is not None:
                batch = defect_hook(batch)
            loss, grads = loss_and_grad(params, batch)
            params = sgd_step(params, grads, lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
    client.last_local_loss = mean_loss
    return params, mean_loss


def aggregate(params_list: Sequence[FlatParams], weights) -> FlatParams:
    """Weighted elementwise sum of K same-shape parameter vectors."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    weights = check_simplex(weights, len(params_list))
    manifest = params_list[0].manifest
    for p in params_list[1:]:
        if p.manifest != manifest:
            raise ValueError("cannot aggregate models with different manifests")
    stacked = np.stack([p.values for p in params_list])
    return FlatParams(weights @ stacked, manifest)


def fedavg_weights(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("need at least one model")
    return np.full(k, 1.0 / k)


def rule_based_weights(defect_flags) -> np.ndarray:
    """Oracle weights: 1/(K-M) on clean models, 0 on defective ones."""
    flags = np.asarray(defect_flags, dtype=bool)
    clean = ~flags
    if not clean.any():
        log.warning("all %d models flagged defective; falling back to uniform",
                    flags.size)
        return fedavg_weights(flags.size)
    weights = np.zeros(flags.size)
    weights[clean] = 1.0 / clean.sum()
    return weights


def evaluate(params: FlatParams, dataset: Dataset, indices=None) -> float:
    """Fraction of argmax-correct predictions on a dataset slice."""
    if indices is None:
        inputs, labels = dataset.inputs, dataset.labels
    else:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("evaluation slice is empty")
        inputs, labels = dataset.inputs[idx], dataset.labels[idx]
    pred = forward_array(params, inputs).argmax(axis=1)
    return float((pred == labels).mean())


def select_clients(num_clients: int, k: int, rng: np.random.Generator) -> list:
    if not 1 <= k <= num_clients:
        raise ValueError(f"cannot select {k} of {num_clients} clients")
    return sorted(int(c) for c in rng.choice(num_clients, size=k, replace=False))


def run_round(clients: Sequence[ClientState], server_params: FlatParams,
              dataset: Dataset, eval_dataset: Dataset, k: int,
              weight_fn: WeightStrategy, plan: DefectPlan, round_idx: int,
              train_seed: int, select_rng: np.random.Generator,
              epochs: int = 1, batch_size: int = 32, lr: float = 0.05,
              ) -> RoundResult:
    """One full federated round; see module docstring for the sequence."""
    selected = select_clients(len(clients), k, select_rng)
    uploads, losses, flags = [], [], []
    for cid in selected:
        client = clients[cid]
        # batch order depends only on (train_seed, round, client), so clean
        # clients are bit-identical whether or not others are defective
        train_rng = derive_rng(train_seed, "local", round_idx, cid)
        hook = None
        if plan.is_defective(cid):
            hook = lambda b, c=cid: apply_training_defects(b, plan, round_idx, c)
        trained, loss = local_train(client, server_params, dataset,
                                    epochs, batch_size, lr, train_rng, hook)
        uploads.append(apply_comm_defect(trained, plan, round_idx, cid))
        losses.append(loss)
        flags.append(plan.is_defective(cid))
    losses = np.asarray(losses)
    flags = np.asarray(flags, dtype=bool)

    ctx = RoundContext(round_idx, selected, uploads, losses, flags, server_params)
    weights = check_simplex(weight_fn(ctx), k)
    new_global = aggregate(uploads, weights)
    accuracy = evaluate(new_global, eval_dataset)

    uniform = fedavg_weights(k)
    if np.array_equal(weights, uniform):
        shadow = accuracy
    else:
        shadow = evaluate(aggregate(uploads, uniform), eval_dataset)

    result = RoundResult(new_global, selected, weights, accuracy, shadow,
                         uploads, losses, flags)
    for client in clients:
        client.params = new_global.copy()
    return result
