import pytest

from stablab.decision import (
    band_margins,
    coverage_indicator,
    first_crossing,
    summarize_decision,
    support_at_expiry,
)
from stablab.lmm import PredictionRow


def row(lot, month, lcl, pred=None):
    pred = lcl + 0.5 if pred is None else pred
    return PredictionRow(lot_id=lot, month=month, pred=pred, se_pred=0.3,
                         ddf=50.0, lcl=lcl, kind="conditional")


def test_band_margin_values():
    rows = [row("A", 0.0, 91.0), row("A", 12.0, 90.0)]
    margins = band_margins(rows, 90.0)
    assert margins["A"] == ((0.0, 1.0), (12.0, 0.0))


def test_first_crossing_definitions():
    assert first_crossing([(0, 1.0), (12, 0.5), (24, -0.1), (36, 0.2)]) == 24
    assert first_crossing([(0, 1.0), (12, 0.5)]) is None
    assert first_crossing([(0, -0.5), (12, 1.0)]) == 0
    assert first_crossing([]) is None


def test_zero_margin_is_compliant():
    rows = [row("A", 48.0, 90.0)]
    assert support_at_expiry(rows, 90.0)
    assert not support_at_expiry([row("A", 48.0, 90.0 - 1e-9)], 90.0)
    with pytest.raises(ValueError):
        support_at_expiry([], 90.0)


def test_coverage_indicator_boundary():
    assert coverage_indicator(row("A", 48.0, 89.0), 89.0)
    assert coverage_indicator(row("A", 48.0, 88.9), 89.0)
    assert not coverage_indicator(row("A", 48.0, 89.1), 89.0)


def test_summarize_decision_worst_case():
    rows = [
        row("A", 0.0, 92.0), row("A", 24.0, 89.5), row("A", 48.0, 90.5),
        row("B", 0.0, 92.0), row("B", 24.0, 91.0), row("B", 48.0, 89.9),
    ]
    summary = summarize_decision("CONTAIN", rows, lsl=90.0, t_star=48.0)
    assert summary.first_crossing_month["A"] == 24.0
    assert summary.first_crossing_month["B"] == 48.0
    assert summary.worst_case_month == 24.0
    assert not summary.support_at_t_star
    assert summary.worst_case_month <= min(
        m for m in summary.first_crossing_month.values() if m is not None)


def test_lcl_monotone_in_ddf():
    from stablab.numcore import t_quantile
    pred, se = 95.0, 0.4
    lcls = [pred - t_quantile(0.95, nu) * se for nu in (1.0, 5.0, 20.0, 100.0)]
    assert all(a < b for a, b in zip(lcls, lcls[1:]))
    # larger ddf -> larger lcl -> weakly later first crossing
    for lsl in (94.0, 94.4, 94.8):
        crossings = []
        for lcl in lcls:
            crossings.append(first_crossing([(0.0, lcl - lsl), (12.0, lcl - lsl)]))
        months = [c if c is not None else float("inf") for c in crossings]
        assert all(a <= b for a, b in zip(months, months[1:]))


def test_support_monotone_in_lsl():
    rows = [row("A", 48.0, 91.0), row("B", 48.0, 90.4)]
    assert support_at_expiry(rows, 90.0)
    assert support_at_expiry(rows, 90.4)
    assert not support_at_expiry(rows, 90.5)
