"""Specification-compliance scoring over scheduled grids.

Band margins, first-crossing months, the worst-case summary, the
support-at-expiry indicator, and pointwise coverage indicators. All
operations are pure functions of prediction rows.
"""

from __future__ import annotations

from dataclasses import dataclass

from stablab.lmm import PredictionRow

__all__ = [
    "DecisionSummary",
    "band_margins",
    "first_crossing",
    "support_at_expiry",
    "coverage_indicator",
    "summarize_decision",
]


@dataclass(frozen=True)
class DecisionSummary:
    """Per-dataset compliance summary for one analysis method."""

    method_label: str
    lot_margins: dict            # lot -> tuple of (month, band margin)
    first_crossing_month: dict   # lot -> month or None
    worst_case_month: float | None
    support_at_t_star: bool
    t_star: float
    lsl: float


def band_margins(predictions, lsl: float) -> dict:
    """Signed margins LCL - LSL per lot over the (sorted) grid."""
    out: dict = {}
    for row in predictions:
        out.setdefault(row.lot_id, []).append((row.month, row.lcl - lsl))
    return {lot: tuple(sorted(series)) for lot, series in out.items()}


def first_crossing(margins) -> float | None:
    """Earliest month with a negative margin; None when never negative.

    Nonmonotone series are permitted; the first negative month is returned
    even if later months recover.
    """
    for month, margin in margins:
        if margin < 0:
            return month
    return None


def support_at_expiry(rows_at_t_star, lsl: float) -> bool:
    """True iff every lot's LCL at the proposed expiry is at or above LSL."""
    rows = list(rows_at_t_star)
    if not rows:
        raise ValueError("no prediction rows at the expiry month")
    return all(row.lcl >= lsl for row in rows)


def coverage_indicator(row: PredictionRow, true_mu: float) -> bool:
    """True iff the lower confidence limit covers the true conditional mean."""
    return row.lcl <= true_mu


def summarize_decision(method_label: str, predictions, lsl: float,
                       t_star: float) -> DecisionSummary:
    """DecisionSummary from prediction rows covering the grid plus t_star."""
    margins = band_margins(predictions, lsl)
    crossings = {lot: first_crossing(series) for lot, series in margins.items()}
    crossed = [m for m in crossings.values() if m is not None]
    worst = min(crossed) if crossed else None
    at_star = [r for r in predictions if r.month == t_star]
    return DecisionSummary(
        method_label=method_label,
        lot_margins=margins,
        first_crossing_month=crossings,
        worst_case_month=worst,
        support_at_t_star=support_at_expiry(at_star, lsl),
        t_star=t_star,
        lsl=lsl,
    )
