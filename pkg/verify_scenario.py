import json
from robust_bci.config import settings
from robust_bci.models.report import EvalGridConfig, ScenarioConfig
from robust_bci.models.training import TrainConfig
from robust_bci.models.trial import SynthSpec
from robust_bci.scenario import run_scenario

# Small, fast configuration
cfg = ScenarioConfig(
    scenario="centralized_source_free",
    method="are",
    calibration_fractions=[0.5],
    repeats=1,
    master_seed=settings.MASTER_SEED,
    synth=SynthSpec.preset("desk", U=3, trials_per_class_per_user=8, t=128),
    model={"temporal_kernel_len": 16, "pool2": 4},
    pretrain=TrainConfig(epochs=2),
    train=TrainConfig(epochs=2),
    grid=EvalGridConfig(attack_steps=3, noise_draws=1),
    ensemble_size=2,
)

# Run scenario
report = run_scenario(cfg)

# Print results
print(json.dumps(report.overall.model_dump(), indent=2))
