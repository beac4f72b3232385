"""Simulated federated pretraining: per-user clients, weighted averaging and the batch-norm policy"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

from robust_bci.config import settings
from robust_bci.errors import DimensionError, ValidationError
from robust_bci.models.network import BatchNormStats, ModelConfig, ModelParams
from robust_bci.models.training import ClientUpdate, FedConfig, RoundLog, TrainConfig
from robust_bci.models.trial import TrialSet
from robust_bci.numerics.tensor import Tensor
from robust_bci.services.alignment import apply_alignment, fit_alignment
from robust_bci.services.network import init_params, predict
from robust_bci.services.training import train
from robust_bci.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def partition_by_user(ts: TrialSet) -> Dict[int, TrialSet]:
    """Trials grouped by user (ascending ids), stored order kept within each user."""
    if len(ts) == 0:
        raise ValidationError("Cannot partition an empty trial set")
    return {u: ts.subset(np.flatnonzero(ts.users == u), name=f"{ts.name}-user{u}") for u in ts.user_ids()}


def local_train_config(fed: FedConfig, client_id: int, round_idx: int) -> TrainConfig:
    seed_key = client_id if fed.client_seeding == "per_client" else 0
    return fed.train.model_copy(update={
        "epochs": fed.local_epochs,
        "seed": derive_seed(fed.seed, "client", seed_key, round_idx),
    })


def client_round(global_params: ModelParams, local: TrialSet, fed: FedConfig, cfg_model: ModelConfig,
                 client_id: Optional[int] = None, round_idx: int = 0,
                 bn_stats: Optional[Dict[str, BatchNormStats]] = None) -> ClientUpdate:
    """Refine the global model on one client's (already aligned) data.

    ``bn_stats`` replaces the global running statistics with the client's own ones.
    """
    if len(local) == 0:
        raise ValidationError("Client has no local trials")
    if client_id is None:
        client_id = int(local.users[0])
    start = global_params.copy()
    if bn_stats is not None:
        start.bn_stats = {k: v.copy() for k, v in bn_stats.items()}
    history = []
    params = train(start, cfg_model, local, local_train_config(fed, client_id, round_idx), history=history)
    local_loss = history[-1].loss if history else float("nan")
    logger.debug(f"Client {client_id} round {round_idx}: {len(local)} trials, loss={local_loss:.4f}")
    return ClientUpdate(client_id=client_id, params=params, n_samples=len(local), local_loss=local_loss)


class FederatedClient:
    """A source user: owns and aligns its trials, and only ever hands out ClientUpdates"""

    def __init__(self, client_id: int, data: TrialSet, cfg_model: ModelConfig, fed: FedConfig,
                 align: bool = True):
        self.client_id = client_id
        self._cfg_model = cfg_model
        self._fed = fed
        self._data = apply_alignment(fit_alignment(data), data) if align else data
        self._bn_stats: Optional[Dict[str, BatchNormStats]] = None

    @property
    def n_samples(self) -> int:
        return len(self._data)

    def train_round(self, global_params: ModelParams, round_idx: int) -> ClientUpdate:
        keep_local_bn = self._fed.bn_policy == "exclude_bn_stats"
        update = client_round(global_params, self._data, self._fed, self._cfg_model, self.client_id, round_idx,
                              bn_stats=self._bn_stats if keep_local_bn else None)
        if keep_local_bn:
            self._bn_stats = {k: v.copy() for k, v in update.params.bn_stats.items()}
        return update


def _weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float], dtype) -> np.ndarray:
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for array, weight in zip(arrays, weights):
        acc += weight * np.asarray(array, dtype=np.float64)
    return acc.astype(dtype)


def aggregate(updates: List[ClientUpdate], bn_policy: str = "exclude_bn_stats",
              global_params: Optional[ModelParams] = None) -> ModelParams:
    """Sample-weighted average of client parameters, reduced in ascending client order.

    Under ``exclude_bn_stats`` running statistics are not averaged: the result keeps
    ``global_params``' statistics (or identity placeholders) bit for bit.
    """
    if not updates:
        raise ValidationError("Cannot aggregate zero client updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"Duplicate client ids in updates: {ids}")

    reference = ordered[0].params
    names = reference.names()
    for u in ordered[1:]:
        if u.params.names() != names:
            raise DimensionError(f"Client {u.client_id} sent tensors {u.params.names()}, expected {names}")
        for name in names:
            if u.params.weights[name].shape != reference.weights[name].shape:
                raise DimensionError(f"Client {u.client_id} tensor '{name}' has shape "
                                     f"{u.params.weights[name].shape}, expected {reference.weights[name].shape}")

    total = float(sum(u.n_samples for u in ordered))
    weights = [u.n_samples / total for u in ordered]
    averaged = {
        name: Tensor.wrap(_weighted_mean([u.params.weights[name].data for u in ordered], weights,
                                         reference.weights[name].dtype))
        for name in names
    }

    if bn_policy == "include_all":
        bn_stats = {
            layer: BatchNormStats(
                running_mean=_weighted_mean([u.params.bn_stats[layer].running_mean for u in ordered], weights, np.float32),
                running_var=_weighted_mean([u.params.bn_stats[layer].running_var for u in ordered], weights, np.float32),
                momentum=reference.bn_stats[layer].momentum,
            )
            for layer in reference.bn_stats
        }
    elif bn_policy == "exclude_bn_stats":
        if global_params is not None:
            bn_stats = {k: v.copy() for k, v in global_params.bn_stats.items()}
        else:
            bn_stats = {
                layer: BatchNormStats(np.zeros_like(s.running_mean), np.ones_like(s.running_var), s.momentum)
                for layer, s in reference.bn_stats.items()
            }
    else:
        raise ValidationError(f"Unknown bn_policy '{bn_policy}'")
    return ModelParams(weights=averaged, bn_stats=bn_stats)


def federated_pretrain(source: TrialSet, fed: FedConfig, cfg_model: ModelConfig,
                       align_clients: bool = True, round_log: Optional[List[RoundLog]] = None,
                       probe: Optional[TrialSet] = None, workers: Optional[int] = None) -> ModelParams:
    """Rounds of seeded client selection, local training and aggregation.

    The returned global model is flagged to evaluate with batch statistics.
    """
    workers = workers or settings.WORKERS
    partitions = partition_by_user(source)
    clients = {u: FederatedClient(u, part, cfg_model, fed, align=align_clients) for u, part in partitions.items()}
    user_ids = sorted(clients)
    n_select = max(1, math.ceil(fed.client_fraction * len(user_ids) - 1e-9))
    selector = np.random.default_rng(derive_seed(fed.seed, "select"))
    global_params = init_params(cfg_model, derive_seed(fed.seed, "init"))
    logger.info(f"Federated pretraining: {len(user_ids)} clients, {n_select} per round, {fed.rounds} rounds, "
                f"bn_policy={fed.bn_policy}")

    for round_idx in range(1, fed.rounds + 1):
        selected = sorted(int(u) for u in selector.choice(user_ids, size=n_select, replace=False))
        if workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(lambda u: clients[u].train_round(global_params, round_idx), selected))
        else:
            updates = [clients[u].train_round(global_params, round_idx) for u in selected]
        global_params = aggregate(updates, fed.bn_policy, global_params)

        entry = RoundLog(round=round_idx, selected_clients=selected,
                         local_loss={u.client_id: u.local_loss for u in updates})
        if probe is not None:
            flagged = global_params.copy()
            flagged.bn_mode_override = "batch"
            entry.global_metric = float(100.0 * np.mean(predict(flagged, cfg_model, probe.signals) == probe.labels))
        if round_log is not None:
            round_log.append(entry)
        logger.info(f"Round {round_idx}/{fed.rounds}: clients={selected}"
                    + (f", probe accuracy={entry.global_metric:.1f}%" if entry.global_metric is not None else ""))

    global_params.bn_mode_override = "batch"
    return global_params
