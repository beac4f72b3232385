"""Training loops: clean, adversarial (min-max) and source-augmented objectives, plus seed ensembles"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Union

import numpy as np

from robust_bci.config import settings
from robust_bci.errors import ValidationError
from robust_bci.models.network import Checkpoint, ModelConfig, ModelParams
from robust_bci.models.training import EnsembleModel, EpochMetrics, TrainConfig
from robust_bci.models.trial import TrialSet
from robust_bci.numerics import ops
from robust_bci.numerics.tensor import GradTape, Tensor
from robust_bci.services.adversarial import pgd_attack_batch
from robust_bci.services.alignment import reject_held_out
from robust_bci.services.network import (
    check_compatible,
    cross_entropy,
    forward,
    init_params,
    predict_proba,
    zero_based,
)
from robust_bci.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


class Adam:
    """Bias-corrected adaptive-moment optimizer over named parameters"""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]) -> None:
        """Update ``params.weights`` in place (each entry is replaced by a new tensor)."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g64 = np.asarray(g, dtype=np.float64)
            m = self._m.get(name, np.zeros_like(g64))
            v = self._v.get(name, np.zeros_like(g64))
            m = self.beta1 * m + (1.0 - self.beta1) * g64
            v = self.beta2 * v + (1.0 - self.beta2) * g64 * g64
            self._m[name], self._v[name] = m, v
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            current = params.weights[name]
            params.weights[name] = Tensor.wrap((current.data.astype(np.float64) - update).astype(current.dtype))


def augment_scale(ts: TrialSet, beta: float, seed: int) -> TrialSet:
    """Originals followed by one scaled copy each, ``X * (1 + s * beta)`` with a seeded sign ``s``."""
    reject_held_out(ts, "Augmentation")
    if beta < 0:
        raise ValidationError(f"beta must be non-negative, got {beta}")
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=len(ts))
    factors = (1.0 + signs * beta).astype(np.float32)
    scaled = ts.signals * factors[:, None, None]
    return TrialSet(
        signals=np.concatenate([ts.signals, scaled], axis=0),
        labels=np.concatenate([ts.labels, ts.labels]),
        users=np.concatenate([ts.users, ts.users]),
        n_classes=ts.n_classes,
        n_users=ts.n_users,
        name=f"{ts.name}-scaled",
        sample_rate_hz=ts.sample_rate_hz,
    )


def _check_shapes(ts: TrialSet, cfg_model: ModelConfig, what: str) -> None:
    if ts.shape != (cfg_model.c, cfg_model.t):
        raise ValidationError(f"{what} trials have shape {ts.shape}, model expects ({cfg_model.c}, {cfg_model.t})")
    if ts.n_classes > cfg_model.K:
        raise ValidationError(f"{what} has {ts.n_classes} classes, model has {cfg_model.K}")


def _source_batches(source: TrialSet, batch_size: int, seed: int):
    """Endless stream of shuffled source index batches."""
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(len(source))
        for start in range(0, len(perm), batch_size):
            yield perm[start:start + batch_size]


def train(params: ModelParams, cfg_model: ModelConfig, train_set: TrialSet, cfg: TrainConfig,
          perturbed_source: Optional[TrialSet] = None,
          history: Optional[List[EpochMetrics]] = None) -> ModelParams:
    """Mini-batch Adam training; returns new params and leaves ``params`` untouched.

    ``adv`` replaces each batch by its PGD counterpart before the step;
    ``adv_plus_source`` and ``ce_plus_source`` add a clean source batch per step and
    minimise the sum of both losses. Epoch length follows the target set.
    """
    reject_held_out(train_set, "Training")
    reject_held_out(perturbed_source, "Training")
    if cfg.uses_source != (perturbed_source is not None):
        raise ValidationError(f"Objective '{cfg.objective}' "
                              f"{'requires' if cfg.uses_source else 'does not take'} a source set")
    if len(train_set) == 0:
        raise ValidationError("Cannot train on an empty trial set")
    check_compatible(params, cfg_model)
    _check_shapes(train_set, cfg_model, "Training")
    if perturbed_source is not None:
        _check_shapes(perturbed_source, cfg_model, "Source")

    params = params.copy()
    if cfg.augmentation == "scale":
        train_set = augment_scale(train_set, cfg.beta, derive_seed(cfg.seed, "augment"))

    names = params.names()
    optimizer = Adam.from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    source_stream = None
    if perturbed_source is not None:
        source_stream = _source_batches(perturbed_source, cfg.batch_size, derive_seed(cfg.seed, "source"))

    n = len(train_set)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            step += 1
            idx = perm[start:start + cfg.batch_size]
            xb, yb = train_set.signals[idx], train_set.labels[idx]
            if cfg.adversarial:
                attack = cfg.attack.model_copy(update={"seed": derive_seed(cfg.seed, cfg.attack.seed, "pgd", step)})
                xb = pgd_attack_batch(params, cfg_model, xb, yb, attack)

            tape = GradTape()
            with tape:
                logits = forward(params, cfg_model, xb, mode="train", dropout_seed=derive_seed(cfg.seed, "dropout", step))
                loss = cross_entropy(logits, yb)
                if source_stream is not None:
                    sidx = next(source_stream)
                    source_logits = forward(params, cfg_model, perturbed_source.signals[sidx], mode="train",
                                            dropout_seed=derive_seed(cfg.seed, "dropout-source", step))
                    loss = ops.add(loss, cross_entropy(source_logits, perturbed_source.labels[sidx]))
            grads = tape.gradient(loss, [params.weights[name] for name in names])
            optimizer.step(params, {name: g.data for name, g in zip(names, grads)})

            total_loss += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) + 1 == yb))
            seen += len(idx)

        metrics = EpochMetrics(epoch=epoch, loss=total_loss / seen, accuracy=100.0 * correct / seen)
        if history is not None:
            history.append(metrics)
        logger.debug(f"Epoch {epoch}/{cfg.epochs} ({cfg.objective}): loss={metrics.loss:.4f} "
                     f"acc={metrics.accuracy:.1f}%")
    if cfg.epochs:
        logger.info(f"Trained {cfg.epochs} epochs ({cfg.objective}, seed {cfg.seed}) on {n} trials")
    return params


def fine_tune(checkpoint: Union[Checkpoint, ModelParams], calibration: TrialSet, cfg: TrainConfig,
              cfg_model: Optional[ModelConfig] = None, perturbed_source: Optional[TrialSet] = None,
              history: Optional[List[EpochMetrics]] = None) -> ModelParams:
    """Continue training every layer of a source model on the calibration set."""
    if isinstance(checkpoint, Checkpoint):
        params, cfg_model = checkpoint.params, checkpoint.config
    else:
        params = checkpoint
    if cfg_model is None:
        raise ValidationError("fine_tune needs the model config of bare params")
    _check_shapes(calibration, cfg_model, "Calibration")
    return train(params, cfg_model, calibration, cfg, perturbed_source=perturbed_source, history=history)


def train_ensemble(n_members: int, base_seed: int, params: Optional[ModelParams], cfg_model: ModelConfig,
                   train_set: TrialSet, cfg: TrainConfig, perturbed_source: Optional[TrialSet] = None,
                   workers: Optional[int] = None) -> EnsembleModel:
    """Member ``i`` is trained with seed ``base_seed + i``.

    Starting from ``params`` when given (fine-tuning), else from a fresh
    initialisation per member. Augmentation is redrawn per member.
    """
    if n_members < 1:
        raise ValidationError(f"n_members must be at least 1, got {n_members}")
    workers = workers or settings.WORKERS

    def member(i: int) -> ModelParams:
        seed = base_seed + i
        start = params if params is not None else init_params(cfg_model, seed)
        return train(start, cfg_model, train_set, cfg.model_copy(update={"seed": seed}),
                     perturbed_source=perturbed_source)

    if workers > 1 and n_members > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trained = list(pool.map(member, range(n_members)))
    else:
        trained = [member(i) for i in range(n_members)]
    logger.info(f"Trained an ensemble of {n_members} members (seeds {base_seed}..{base_seed + n_members - 1})")
    return EnsembleModel(members=[(p, cfg_model) for p in trained])


def aggregate_probabilities(ens: EnsembleModel, signals: np.ndarray) -> np.ndarray:
    """Mean of member softmax outputs, float64 ``[N, K]``."""
    total = None
    for params, cfg in ens.members:
        proba = predict_proba(params, cfg, signals)
        total = proba if total is None else total + proba
    return total / len(ens)


def ensemble_predict(ens: EnsembleModel, signals: np.ndarray) -> np.ndarray:
    """One-based labels; ties broken toward the lowest class index."""
    return np.argmax(aggregate_probabilities(ens, signals), axis=1) + 1


def ensemble_input_gradient(ens: EnsembleModel, signals: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of ``-log(mean member softmax)[label]`` with respect to the input batch."""
    tape = GradTape()
    x = Tensor.wrap(np.array(signals, dtype=np.float32))
    with tape:
        probs = [ops.softmax(forward(p, c, x, mode="eval")) for p, c in ens.members]
        loss = ops.nll_from_probs(ops.mean_of(probs), zero_based(labels, ens.config.K))
    return tape.gradient(loss, [x])[0].data
