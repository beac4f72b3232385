"""Command-line entry point: datagen, pretrain, perturb, run, report"""
import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from robust_bci.config import settings
from robust_bci.models.network import ModelConfig
from robust_bci.models.privacy import PrivacyConfig
from robust_bci.models.report import ScenarioConfig
from robust_bci.models.training import FedConfig, TrainConfig
from robust_bci.models.trial import PRESETS, SynthSpec
from robust_bci.scenario import run_scenario
from robust_bci.services.alignment import align_per_user
from robust_bci.services.federated import federated_pretrain
from robust_bci.services.network import init_params
from robust_bci.services.privacy import apply_perturbations, generate_user_perturbations, privacy_audit
from robust_bci.services.reporting import RENDERERS, load_report, render_all, render_report
from robust_bci.services.storage import load_trialset, save_checkpoint, save_json, save_trialset
from robust_bci.services.synthetic import generate_synthetic
from robust_bci.services.training import train
from robust_bci.utils.json_encoder import json_dumps
from robust_bci.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def _fractions(value: str) -> List[float]:
    return [float(v) for v in value.split(",") if v.strip()]


class JsonArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as the same one-line JSON object as every other failure"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "UsageError", "message": message}) + "\n")
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog="robust_bci", description="Robust, privacy-preserving EEG decoding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="Write a synthetic multi-user trial set")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials-per-class", type=int, default=None)
    p.add_argument("--out", required=True, help="Trial file to write (.eegt)")

    p = sub.add_parser("pretrain", help="Train a source model (centralized or federated)")
    p.add_argument("--data", required=True, help="Source trial file")
    p.add_argument("--out", required=True, help="Checkpoint to write (.eegm)")
    p.add_argument("--federated", action="store_true")
    p.add_argument("--epochs", type=int, default=None, help="Centralized epochs / local epochs when federated")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("perturb", help="Write the user-wise perturbed source set")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audit", action="store_true", help="Also run the user-ID probe on clean and perturbed data")

    p = sub.add_parser("run", help="Run a full scenario and write report.{json,csv,md}")
    p.add_argument("--config", default=None, help="ScenarioConfig JSON file")
    p.add_argument("--scenario", default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--fractions", type=_fractions, default=None, help="Comma-separated calibration fractions")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="Master seed")
    p.add_argument("--out", default=None, help="Output directory (defaults to OUTPUT_DIR)")

    p = sub.add_parser("report", help="Re-render a saved report")
    p.add_argument("--input", required=True, help="report.json or the directory holding it")
    p.add_argument("--format", choices=sorted(RENDERERS), default="markdown")
    p.add_argument("--out", default=None, help="Output file or directory; stdout when omitted")
    return parser


def cmd_datagen(args) -> dict:
    overrides = {"seed": args.seed}
    if args.trials_per_class:
        overrides["trials_per_class_per_user"] = args.trials_per_class
    spec = SynthSpec.preset(args.preset, **overrides)
    ts = generate_synthetic(spec)
    path = save_trialset(ts, args.out, generator_spec=spec)
    return {"path": str(path), "n_trials": len(ts)}


def cmd_pretrain(args) -> dict:
    source = load_trialset(args.data)
    cfg_model = ModelConfig(c=source.n_channels, t=source.n_timepoints, K=source.n_classes)
    out = Path(args.out)
    if args.federated:
        fed = FedConfig(seed=args.seed)
        fed = fed.model_copy(update={k: v for k, v in {"rounds": args.rounds, "local_epochs": args.epochs}.items()
                                     if v is not None})
        round_log = []
        params = federated_pretrain(source, fed, cfg_model, round_log=round_log)
        log_path = save_json([dataclasses.asdict(r) for r in round_log], out.with_suffix(".rounds.json"))
    else:
        cfg = TrainConfig(seed=args.seed)
        if args.epochs is not None:
            cfg = cfg.model_copy(update={"epochs": args.epochs})
        aligned, _ = align_per_user(source)
        history = []
        params = train(init_params(cfg_model, derive_seed(args.seed, "init")), cfg_model, aligned, cfg, history=history)
        log_path = save_json([dataclasses.asdict(h) for h in history], out.with_suffix(".metrics.json"))
    path = save_checkpoint(params, cfg_model, out)
    return {"checkpoint": str(path), "log": str(log_path)}


def cmd_perturb(args) -> dict:
    source = load_trialset(args.data)
    aligned, _ = align_per_user(source)
    perturbation = generate_user_perturbations(aligned, args.rho, args.seed)
    perturbed = apply_perturbations(aligned, perturbation)
    path = save_trialset(perturbed, args.out, extra={"perturbed": True, "rho": args.rho, "aligned": True})
    result = {"path": str(path), "n_users": len(perturbation.deltas), "bound": perturbation.bound}
    if args.audit:
        audit = privacy_audit(aligned, PrivacyConfig(rho=args.rho, seed=args.seed))
        result["audit"] = dataclasses.asdict(audit)
    return result


def cmd_run(args) -> dict:
    cfg = ScenarioConfig.model_validate_json(Path(args.config).read_text()) if args.config else ScenarioConfig()
    overrides = {
        "scenario": args.scenario,
        "method": args.method,
        "calibration_fractions": args.fractions,
        "repeats": args.repeats,
        "master_seed": args.seed,
    }
    data = cfg.model_dump()
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ScenarioConfig.model_validate(data)
    logger.info("Scenario configuration:")
    logger.info(json_dumps(cfg.model_dump(), indent=2))

    report = run_scenario(cfg)
    out_dir = Path(args.out or settings.OUTPUT_DIR)
    paths = render_all(report, out_dir)
    return {"outputs": [str(p) for p in paths], "overall": report.overall.model_dump()}


def cmd_report(args) -> dict:
    report = load_report(args.input)
    if args.out is None:
        sys.stdout.write(RENDERERS[args.format](report))
        return {}
    return {"path": str(render_report(report, args.format, args.out))}


COMMANDS = {
    "datagen": cmd_datagen,
    "pretrain": cmd_pretrain,
    "perturb": cmd_perturb,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL, format='%(message)s')

    logger.info("Using configuration:")
    logger.info(json.dumps(settings.model_dump(), indent=2))
    try:
        result = COMMANDS[args.command](args)
    except Exception as e:
        logger.error(f"Error during '{args.command}': {e}")
        if logger.isEnabledFor(logging.DEBUG):
            traceback.print_exc()
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1
    if result:
        logger.info(json_dumps(result, indent=2))
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
