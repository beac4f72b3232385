"""Render evaluation reports as JSON, CSV or a markdown table"""
import csv
import io
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

from robust_bci.errors import ValidationError
from robust_bci.models.report import EvalReport, SummaryRow
from robust_bci.utils.json_encoder import json_dumps

logger = logging.getLogger(__name__)

ReportFormat = Literal["json", "csv", "markdown"]
EXTENSIONS = {"json": "json", "csv": "csv", "markdown": "md"}


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.2f}"


def to_json(report: EvalReport) -> str:
    return json_dumps(report.model_dump(), indent=2, sort_keys=True)


def to_csv(report: EvalReport) -> str:
    """One row per cell, then one mean row per fraction and a final overall row."""
    eps_keys = [f"{e:g}" for e in report.epsilons]
    eta_keys = [f"{e:g}" for e in report.etas]
    header = (["fraction", "repeat", "seed", "benign"] + [f"adv_{k}" for k in eps_keys] + ["adversarial"]
              + [f"noisy_{k}" for k in eta_keys] + ["noisy", "avg", "failed", "error"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for cell in report.cells:
        writer.writerow(
            [cell.fraction, cell.repeat, cell.seed, _fmt(cell.benign)]
            + [_fmt(cell.adversarial.get(k)) for k in eps_keys] + [_fmt(cell.adversarial_mean)]
            + [_fmt(cell.noisy.get(k)) for k in eta_keys] + [_fmt(cell.noisy_mean)]
            + [_fmt(cell.avg), int(cell.failed), cell.error or ""]
        )
    blanks_adv = [""] * len(eps_keys)
    blanks_noisy = [""] * len(eta_keys)
    summaries: List[SummaryRow] = list(report.per_fraction) + [report.overall]
    for row in summaries:
        writer.writerow(
            ["all" if row.fraction is None else row.fraction, "mean", "", _fmt(row.benign)]
            + blanks_adv + [_fmt(row.adversarial)] + blanks_noisy + [_fmt(row.noisy)]
            + [_fmt(row.avg), row.n_failed, ""]
        )
    return buf.getvalue()


def to_markdown(report: EvalReport) -> str:
    lines = [
        f"### {report.scenario} / {report.method} (master seed {report.master_seed})",
        "",
        "| Calibration | Benign | Adversarial | Noisy | Avg | Cells | Failed |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in list(report.per_fraction) + [report.overall]:
        label = "overall" if row.fraction is None else f"{row.fraction:.0%}"
        lines.append(f"| {label} | {_fmt(row.benign)} | {_fmt(row.adversarial)} | {_fmt(row.noisy)} | "
                     f"{_fmt(row.avg)} | {row.n_cells} | {row.n_failed} |")
    return "\n".join(lines) + "\n"


RENDERERS = {"json": to_json, "csv": to_csv, "markdown": to_markdown}


def render_report(report: EvalReport, fmt: ReportFormat, path: Union[str, os.PathLike]) -> Path:
    """Write ``report`` to ``path``; a directory gets ``report.<ext>`` inside it."""
    if fmt not in RENDERERS:
        raise ValidationError(f"Unknown report format '{fmt}'; choose from {sorted(RENDERERS)}")
    path = Path(path)
    if path.is_dir() or not path.suffix:
        path = path / f"report.{EXTENSIONS[fmt]}"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(RENDERERS[fmt](report))
    except OSError as e:
        logger.error(f"Failed to write {fmt} report to {path}: {e}")
        raise
    logger.info(f"Wrote {fmt} report to {path}")
    return path


def render_all(report: EvalReport, out_dir: Union[str, os.PathLike]) -> List[Path]:
    return [render_report(report, fmt, out_dir) for fmt in RENDERERS]


def load_report(path: Union[str, os.PathLike]) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return EvalReport.model_validate_json(path.read_text())
