import io
import math

import numpy as np
import pytest

from stablab.data import DataError, StabilityDataset, dataset_to_csv, parse_dataset, read_table, write_table


def _csv_70() -> str:
    lines = ["lot,month,value"]
    rng = np.random.default_rng(7)
    for i in range(10):
        for m in (0, 3, 6, 9, 12, 24, 36):
            lines.append(f"L{i:02d},{m},{100 + rng.standard_normal():.6f}")
    return "\n".join(lines) + "\n"


def test_parse_balanced_70_rows():
    ds = parse_dataset(_csv_70(), lsl=90.0)
    assert ds.n == 70
    assert len(ds.lot_levels) == 10
    assert ds.lsl == 90.0
    assert ds.scheduled_months() == (0.0, 3.0, 6.0, 9.0, 12.0, 24.0, 36.0)


def test_parse_single_lot_rejected():
    text = "lot,month,value\nA,0,1\nA,3,2\nA,6,3\n"
    with pytest.raises(DataError, match="fewer than 2 lots"):
        parse_dataset(text)


def test_parse_duplicate_rejected():
    text = "lot,month,value\nA,0,1\nA,3,2\nB,0,1\nB,3,2\nA,3,9\n"
    with pytest.raises(DataError, match="duplicate"):
        parse_dataset(text)


def test_parse_malformed_numeric():
    text = "lot,month,value\nA,0,1\nA,three,2\nB,0,1\n"
    with pytest.raises(DataError, match="malformed numeric"):
        parse_dataset(text)


def test_parse_needs_three_months():
    text = "lot,month,value\nA,0,1\nA,3,2\nB,0,1\nB,3,2\n"
    with pytest.raises(DataError, match="3 distinct months"):
        parse_dataset(text)


def test_parse_negative_month_rejected():
    text = "lot,month,value\nA,-1,1\nA,3,2\nA,6,0\nB,0,1\n"
    with pytest.raises(DataError):
        parse_dataset(text)


def test_parse_bad_header():
    with pytest.raises(DataError, match="header"):
        parse_dataset("batch,month,value\nA,0,1\n")


def test_parse_order_insensitive():
    base = _csv_70()
    header, *rows = base.strip().split("\n")
    rng = np.random.default_rng(3)
    shuffled = [header] + [rows[i] for i in rng.permutation(len(rows))]
    a = parse_dataset(base, lsl=90.0)
    b = parse_dataset("\n".join(shuffled) + "\n", lsl=90.0)
    assert a == b


def test_round_trip_bit_faithful():
    rng = np.random.default_rng(11)
    months = np.tile([0.0, 3.0, 7.5], 2)
    values = rng.standard_normal(6) * 1e3 + 0.1 + 0.2
    ds = StabilityDataset(("A", "A", "A", "B", "B", "B"), months, values, lsl=1.25)
    again = parse_dataset(dataset_to_csv(ds), lsl=1.25)
    assert again == ds
    assert again.values.tobytes() == ds.values.tobytes()


def test_write_table_empty_header_only(tmp_path):
    path = tmp_path / "t.csv"
    write_table([], path, fields=["a", "b"])
    assert path.read_text() == "a,b\n"


def test_write_table_single_row(tmp_path):
    path = tmp_path / "t.csv"
    write_table([{"lot": "A", "lcl": 99.5}], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "lot,lcl"
    assert len(lines) == 2


def test_write_table_heterogeneous_rejected():
    buf = io.StringIO()
    with pytest.raises(DataError):
        write_table([{"a": 1}, {"b": 2}], buf)


def test_table_round_trip_values():
    rng = np.random.default_rng(5)
    exponents = rng.integers(-8, 8, 20).astype(float)
    rows = [{"x": float(v), "name": f"r{i}"}
            for i, v in enumerate(rng.standard_normal(20) * 10.0 ** exponents)]
    buf = io.StringIO()
    write_table(rows, buf)
    back = read_table(buf.getvalue())
    for orig, rec in zip(rows, back):
        assert rec["x"] == orig["x"]
        assert rec["name"] == orig["name"]


def test_dataset_normalized_ordering():
    ds = StabilityDataset(("B", "A", "A", "B", "A", "B"),
                          np.array([3.0, 6.0, 0.0, 0.0, 3.0, 6.0]),
                          np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
    assert ds.lots == ("A", "A", "A", "B", "B", "B")
    assert list(ds.months) == [0.0, 3.0, 6.0, 0.0, 3.0, 6.0]
    assert math.isnan(ds.lsl)
