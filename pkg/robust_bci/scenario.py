"""End-to-end scenario orchestration: source handling, calibration, training and evaluation per cell"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from robust_bci.config import settings
from robust_bci.errors import ValidationError
from robust_bci.models.network import Checkpoint, ModelConfig
from robust_bci.models.report import SOURCE_FREE_SCENARIOS, CellResult, EvalReport, ScenarioConfig
from robust_bci.models.training import EnsembleModel, TrainConfig
from robust_bci.models.trial import TrialSet
from robust_bci.scoring import AccuracyScorer
from robust_bci.services.alignment import HeldOutTrials, align_per_user, apply_alignment, fit_alignment
from robust_bci.services.evaluation import evaluate_model
from robust_bci.services.federated import federated_pretrain
from robust_bci.services.network import init_params
from robust_bci.services.preprocessing import split_calibration
from robust_bci.services.privacy import apply_perturbations, generate_user_perturbations
from robust_bci.services.storage import load_checkpoint, load_trialset
from robust_bci.services.synthetic import generate_synthetic
from robust_bci.services.training import fine_tune, train, train_ensemble
from robust_bci.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

ADVERSARIAL_METHODS = ("abat", "abat_e", "ar", "are")
AUGMENTED_METHODS = ("ar", "are")


def split_source_target(full: TrialSet, target_user: Optional[int] = None) -> Tuple[TrialSet, TrialSet]:
    """Hold one user out as the target; everyone else is source."""
    users = full.user_ids()
    target_user = users[-1] if target_user is None else target_user
    if target_user not in users:
        raise ValidationError(f"Target user {target_user} not present (users: {users})")
    is_target = full.users == target_user
    source = full.subset(np.flatnonzero(~is_target), name=f"{full.name}-source")
    target = full.subset(np.flatnonzero(is_target), name=f"{full.name}-target{target_user}")
    return source, target


def training_recipe(cfg: ScenarioConfig, seed: int) -> TrainConfig:
    """TrainConfig for the configured method: objective, augmentation and seed."""
    adversarial = cfg.method in ADVERSARIAL_METHODS
    if cfg.scenario in SOURCE_FREE_SCENARIOS:
        objective = "adv" if adversarial else "ce"
    else:
        objective = "adv_plus_source" if adversarial else "ce_plus_source"
    augmentation = "scale" if cfg.method in AUGMENTED_METHODS else "none"
    return cfg.train.model_copy(update={"objective": objective, "augmentation": augmentation, "seed": seed})


class ScenarioRunner:
    """Runs every (calibration fraction, repeat) cell of one scenario/method configuration"""

    def __init__(self, cfg: ScenarioConfig, workers: Optional[int] = None):
        self.cfg = cfg
        self.workers = workers or settings.WORKERS
        self.scorer = AccuracyScorer()
        self._source: Optional[TrialSet] = None
        self._target: Optional[TrialSet] = None
        self._model_cfg: Optional[ModelConfig] = None

    def load_data(self) -> Tuple[TrialSet, TrialSet]:
        if self.cfg.source_path is not None:
            source, target = load_trialset(self.cfg.source_path), load_trialset(self.cfg.target_path)
        else:
            source, target = split_source_target(generate_synthetic(self.cfg.synth), self.cfg.target_user)
        if source.shape != target.shape:
            raise ValidationError(f"Source trials {source.shape} and target trials {target.shape} differ in shape")
        logger.info(f"Source: {len(source)} trials from {len(source.user_ids())} users; target: {len(target)} trials")
        return source, target

    def model_config(self, source: TrialSet, target: TrialSet) -> ModelConfig:
        return ModelConfig(c=target.n_channels, t=target.n_timepoints,
                           K=max(source.n_classes, target.n_classes), **self.cfg.model)

    def cell_seed(self, fraction: float, repeat: int) -> int:
        return derive_seed(self.cfg.master_seed, self.cfg.scenario, self.cfg.method, fraction, repeat)

    # --- Source side, shared by all cells of one repeat ---

    def prepare_source(self, source: TrialSet, repeat: int) -> Union[Checkpoint, TrialSet]:
        """A pretrained source model (source-free scenarios) or the source set the target trains with."""
        cfg = self.cfg
        seed = derive_seed(cfg.master_seed, cfg.scenario, "source", repeat)
        if cfg.scenario in SOURCE_FREE_SCENARIOS and cfg.checkpoint_path is not None:
            checkpoint = load_checkpoint(cfg.checkpoint_path)
            if (checkpoint.config.c, checkpoint.config.t) != source.shape:
                raise ValidationError(f"Checkpoint expects ({checkpoint.config.c}, {checkpoint.config.t}) trials, "
                                      f"data has {source.shape}")
            return checkpoint

        if cfg.scenario == "federated_source_free":
            fed = cfg.fed.model_copy(update={"seed": seed})
            params = federated_pretrain(source, fed, self._model_cfg, align_clients=True, workers=1)
            return Checkpoint(params=params, config=self._model_cfg)

        aligned, _ = align_per_user(source)
        if cfg.scenario == "centralized_source_free":
            pretrain_cfg = cfg.pretrain.model_copy(update={"seed": seed})
            params = train(init_params(self._model_cfg, derive_seed(seed, "init")), self._model_cfg, aligned,
                           pretrain_cfg)
            return Checkpoint(params=params, config=self._model_cfg)
        if cfg.scenario == "source_perturbation":
            perturbation = generate_user_perturbations(aligned, cfg.privacy.rho, derive_seed(cfg.privacy.seed, seed),
                                                       cfg.privacy.band_hz, cfg.privacy.n_components)
            return apply_perturbations(aligned, perturbation)
        return aligned

    # --- One cell ---

    def run_cell(self, prepared: Union[Checkpoint, TrialSet], target: TrialSet, fraction: float,
                 repeat: int) -> CellResult:
        cfg = self.cfg
        seed = self.cell_seed(fraction, repeat)
        calibration, test = split_calibration(target, fraction)
        state = fit_alignment(calibration)
        calibration = apply_alignment(state, calibration)
        test = HeldOutTrials(test).align(state)

        train_cfg = training_recipe(cfg, seed)
        model_cfg = prepared.config if isinstance(prepared, Checkpoint) else self._model_cfg
        model: Union[EnsembleModel, tuple]
        if isinstance(prepared, Checkpoint):
            if cfg.is_ensemble:
                model = train_ensemble(cfg.ensemble_size, seed, prepared.params, model_cfg, calibration, train_cfg,
                                       workers=1)
            else:
                model = (fine_tune(prepared, calibration, train_cfg), model_cfg)
        else:
            if cfg.is_ensemble:
                model = train_ensemble(cfg.ensemble_size, seed, None, model_cfg, calibration, train_cfg,
                                       perturbed_source=prepared, workers=1)
            else:
                params = train(init_params(model_cfg, derive_seed(seed, "init")), model_cfg, calibration, train_cfg,
                               perturbed_source=prepared)
                model = (params, model_cfg)

        row = evaluate_model(model, test, cfg.grid, derive_seed(seed, "eval"))
        return CellResult(fraction=fraction, repeat=repeat, seed=seed, **row.model_dump())

    def _safe_cell(self, prepared, target: TrialSet, fraction: float, repeat: int) -> CellResult:
        if isinstance(prepared, Exception):
            return self._failed(fraction, repeat, prepared)
        try:
            return self.run_cell(prepared, target, fraction, repeat)
        except Exception as e:
            logger.exception(f"Cell fraction={fraction} repeat={repeat} failed")
            return self._failed(fraction, repeat, e)

    def _failed(self, fraction: float, repeat: int, error: Exception) -> CellResult:
        return CellResult(fraction=fraction, repeat=repeat, seed=self.cell_seed(fraction, repeat), failed=True,
                          error=f"{type(error).__name__}: {error}")

    def run(self) -> EvalReport:
        cfg = self.cfg
        source, target = self.load_data()
        self._model_cfg = self.model_config(source, target)
        logger.info(f"Running {cfg.scenario}/{cfg.method}: fractions={cfg.calibration_fractions}, "
                    f"repeats={cfg.repeats}, workers={self.workers}")

        prepared: Dict[int, Union[Checkpoint, TrialSet, Exception]] = {}
        for repeat in range(cfg.repeats):
            try:
                prepared[repeat] = self.prepare_source(source, repeat)
            except Exception as e:
                logger.exception(f"Source preparation for repeat {repeat} failed")
                prepared[repeat] = e

        cells = [(f, r) for f in cfg.calibration_fractions for r in range(cfg.repeats)]
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results: List[CellResult] = list(pool.map(
                    lambda fr: self._safe_cell(prepared[fr[1]], target, fr[0], fr[1]), cells))
        else:
            results = [self._safe_cell(prepared[r], target, f, r) for f, r in cells]

        report = EvalReport(scenario=cfg.scenario, method=cfg.method, master_seed=cfg.master_seed,
                            epsilons=cfg.grid.epsilons, etas=cfg.grid.etas, cells=results)
        report = self.scorer.fill_summaries(report)
        overall = report.overall
        if overall.n_failed:
            logger.warning(f"{overall.n_failed} of {len(results)} cells failed and are excluded from the means")
        if overall.avg is not None:
            logger.info(f"Overall: Benign {overall.benign:.2f} | Adversarial {overall.adversarial:.2f} | "
                        f"Noisy {overall.noisy:.2f} | Avg {overall.avg:.2f}")
        return report


def run_scenario(cfg: ScenarioConfig, workers: Optional[int] = None) -> EvalReport:
    return ScenarioRunner(cfg, workers=workers).run()
