"""Benign, adversarial and noisy accuracy of a trained classifier"""
import logging
from typing import Protocol, Union

import numpy as np

from robust_bci.config import settings
from robust_bci.errors import ValidationError
from robust_bci.models.attack import AttackConfig, NoiseConfig
from robust_bci.models.network import ModelConfig, ModelParams
from robust_bci.models.report import AccuracyRow, EvalGridConfig
from robust_bci.models.training import EnsembleModel
from robust_bci.models.trial import TrialSet
from robust_bci.scoring import AccuracyScorer
from robust_bci.services.adversarial import model_input_gradient, noisy_batch, projected_gradient_ascent
from robust_bci.services.network import predict
from robust_bci.services.training import ensemble_input_gradient, ensemble_predict
from robust_bci.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


class Classifier(Protocol):
    """Anything that labels trials and exposes its loss gradient for white-box attacks"""

    def predict(self, signals: np.ndarray) -> np.ndarray: ...

    def input_gradient(self, signals: np.ndarray, labels: np.ndarray) -> np.ndarray: ...


class SingleModel:
    def __init__(self, params: ModelParams, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    def predict(self, signals: np.ndarray) -> np.ndarray:
        return predict(self.params, self.cfg, signals)

    def input_gradient(self, signals: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return model_input_gradient(self.params, self.cfg, signals, labels)


class EnsembleClassifier:
    """Attacked through the mean of member softmax outputs"""

    def __init__(self, ensemble: EnsembleModel):
        self.ensemble = ensemble

    def predict(self, signals: np.ndarray) -> np.ndarray:
        return ensemble_predict(self.ensemble, signals)

    def input_gradient(self, signals: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return ensemble_input_gradient(self.ensemble, signals, labels)


def as_classifier(model: Union[Classifier, EnsembleModel, tuple]) -> Classifier:
    if isinstance(model, EnsembleModel):
        return EnsembleClassifier(model)
    if isinstance(model, tuple):
        return SingleModel(*model)
    return model


def _accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float(100.0 * np.mean(np.asarray(predicted) == labels))


def adversarial_signals(model: Classifier, test: TrialSet, atk: AttackConfig) -> np.ndarray:
    """White-box PGD against ``model``, chunked; chunk ``i`` uses a seed derived from ``atk.seed``."""
    batch = settings.EVAL_BATCH_SIZE
    chunks = []
    for i, start in enumerate(range(0, len(test), batch)):
        x = test.signals[start:start + batch]
        y = test.labels[start:start + batch]
        chunk_atk = atk.model_copy(update={"seed": derive_seed(atk.seed, "chunk", i)})
        chunks.append(projected_gradient_ascent(x, lambda x_adv: model.input_gradient(x_adv, y), chunk_atk))
    return np.concatenate(chunks, axis=0)


def evaluate_model(model, test: TrialSet, grid: EvalGridConfig, seed: int) -> AccuracyRow:
    """Accuracy (percent) on benign, PGD (per epsilon) and noisy (per eta) test trials.

    Noisy accuracy per eta is the mean over ``grid.noise_draws`` independent draws.
    """
    if len(test) == 0:
        raise ValidationError("Cannot evaluate on an empty test set")
    model = as_classifier(model)
    labels = test.labels
    benign = _accuracy(model.predict(test.signals), labels)

    adversarial = {}
    for eps in grid.epsilons:
        atk = AttackConfig(epsilon=eps, steps=grid.attack_steps, random_start=grid.random_start,
                           seed=derive_seed(seed, "attack", eps))
        adversarial[f"{eps:g}"] = _accuracy(model.predict(adversarial_signals(model, test, atk)), labels)

    noisy = {}
    for eta in grid.etas:
        draws = [
            _accuracy(model.predict(noisy_batch(test.signals, NoiseConfig(eta=eta, seed=derive_seed(seed, "noise", eta, d)))),
                      labels)
            for d in range(grid.noise_draws)
        ]
        noisy[f"{eta:g}"] = float(np.mean(draws))

    row = AccuracyScorer().score_row(benign, adversarial, noisy)
    logger.info(f"Benign {row.benign:.2f} | Adversarial {row.adversarial_mean:.2f} | "
                f"Noisy {row.noisy_mean:.2f} | Avg {row.avg:.2f} on {len(test)} trials")
    return row
