"""Accuracy aggregation for evaluation reports"""
from typing import Dict, List, Optional, Sequence

import numpy as np

from robust_bci.models.report import AccuracyRow, CellResult, EvalReport, SummaryRow


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


class AccuracyScorer:
    """Derives the Benign / Adversarial / Noisy / Avg columns"""

    def score_row(self, benign: float, adversarial: Dict[str, float], noisy: Dict[str, float]) -> AccuracyRow:
        """Adversarial is the mean over epsilons, Noisy the mean over etas, Avg the mean of the three"""
        adversarial_mean = _mean(list(adversarial.values()))
        noisy_mean = _mean(list(noisy.values()))
        return AccuracyRow(
            benign=benign,
            adversarial=adversarial,
            noisy=noisy,
            adversarial_mean=adversarial_mean,
            noisy_mean=noisy_mean,
            avg=_mean([benign, adversarial_mean, noisy_mean]),
        )

    def summarize(self, cells: List[CellResult], fraction: Optional[float] = None) -> SummaryRow:
        """Column means over successful cells; failed cells are counted, not averaged"""
        ok = [c for c in cells if not c.failed]
        benign = _mean([c.benign for c in ok])
        adversarial = _mean([c.adversarial_mean for c in ok])
        noisy = _mean([c.noisy_mean for c in ok])
        avg = _mean([benign, adversarial, noisy]) if ok else None
        return SummaryRow(
            fraction=fraction,
            benign=benign,
            adversarial=adversarial,
            noisy=noisy,
            avg=avg,
            n_cells=len(ok),
            n_failed=len(cells) - len(ok),
        )

    def fill_summaries(self, report: EvalReport) -> EvalReport:
        fractions = sorted({c.fraction for c in report.cells})
        report.per_fraction = [self.summarize([c for c in report.cells if c.fraction == f], f) for f in fractions]
        report.overall = self.summarize(report.cells)
        return report
