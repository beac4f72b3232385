from __future__ import annotations

import json

import pytest

from robust_bci.__main__ import build_parser, main
from robust_bci.models.report import EvalReport, ScenarioConfig
from robust_bci.models.trial import SynthSpec
from robust_bci.scoring import AccuracyScorer
from robust_bci.services.reporting import load_report, render_report
from robust_bci.services.storage import load_checkpoint, load_manifest, load_trialset


@pytest.fixture
def desk_file(tmp_path):
    path = tmp_path / "desk.eegt"
    assert main(["datagen", "--preset", "desk", "--trials-per-class", "1", "--seed", "2", "--out", str(path)]) == 0
    return path


@pytest.fixture
def saved_report(tmp_path):
    report = AccuracyScorer().fill_summaries(EvalReport(scenario="no_privacy", method="ce", master_seed=0,
                                                        epsilons=[0.01], etas=[1.0]))
    render_report(report, "json", tmp_path)
    return tmp_path / "report.json"


def test_datagen(desk_file):
    ts = load_trialset(desk_file)
    assert len(ts) == 28 and ts.shape == (8, 512)
    manifest = load_manifest(desk_file)
    assert manifest.name == "desk" and manifest.generator_spec["seed"] == 2


def test_perturb_marks_the_manifest(tmp_path, desk_file):
    out = tmp_path / "perturbed.eegt"
    assert main(["perturb", "--data", str(desk_file), "--out", str(out), "--rho", "0.2"]) == 0
    extra = load_manifest(out).extra
    assert extra["perturbed"] is True and extra["rho"] == 0.2
    assert len(load_trialset(out)) == 28


def test_centralized_pretrain(tmp_path, desk_file):
    out = tmp_path / "central.eegm"
    assert main(["pretrain", "--data", str(desk_file), "--out", str(out), "--epochs", "1"]) == 0
    checkpoint = load_checkpoint(out)
    assert (checkpoint.config.c, checkpoint.config.t, checkpoint.config.K) == (8, 512, 4)
    assert checkpoint.params.bn_mode_override is None
    assert len(json.loads(out.with_suffix(".metrics.json").read_text())) == 1


def test_federated_pretrain(tmp_path, desk_file):
    out = tmp_path / "federated.eegm"
    args = ["pretrain", "--data", str(desk_file), "--out", str(out), "--federated", "--epochs", "1", "--rounds", "1"]
    assert main(args) == 0
    assert load_checkpoint(out).params.bn_mode_override == "batch"
    rounds = json.loads(out.with_suffix(".rounds.json").read_text())
    assert [r["round"] for r in rounds] == [1]
    assert rounds[0]["selected_clients"] == [1, 2, 3, 4, 5, 6, 7]


def test_report_to_stdout(saved_report, capsys):
    assert main(["report", "--input", str(saved_report)]) == 0
    assert "| overall |" in capsys.readouterr().out


def test_report_to_file(tmp_path, saved_report):
    out = tmp_path / "table.csv"
    assert main(["report", "--input", str(saved_report.parent), "--format", "csv", "--out", str(out)]) == 0
    assert out.read_text().startswith("fraction,repeat,seed,benign")


def test_errors_exit_with_json(tmp_path, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "missing.eegt"), "--out", str(tmp_path / "m.eegm")]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "FileNotFoundError"


def test_run_from_config_file(tmp_path, tiny_model_overrides):
    cfg = ScenarioConfig(
        scenario="no_privacy",
        method="ce",
        calibration_fractions=[0.5],
        repeats=1,
        synth=SynthSpec(c=4, t=32, K=2, U=3, trials_per_class_per_user=10, seed=1),
        model=tiny_model_overrides,
        train={"epochs": 1, "batch_size": 8},
        grid={"epsilons": [0.03], "etas": [1.0], "noise_draws": 1, "attack_steps": 2},
    )
    config = tmp_path / "scenario.json"
    config.write_text(cfg.model_dump_json())
    out = tmp_path / "results"
    assert main(["run", "--config", str(config), "--seed", "4", "--out", str(out)]) == 0
    report = load_report(out)
    assert report.master_seed == 4 and report.scenario == "no_privacy"
    assert sorted(p.name for p in out.iterdir()) == ["report.csv", "report.json", "report.md"]


def test_parser_rejects_unknown_preset(capsys):
    with pytest.raises(SystemExit) as exit_info:
        build_parser().parse_args(["datagen", "--preset", "nope", "--out", "x.eegt"])
    assert exit_info.value.code == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "UsageError" and "nope" in error["message"]


def test_missing_command_is_reported_as_json(capsys):
    with pytest.raises(SystemExit):
        main([])
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "UsageError"
