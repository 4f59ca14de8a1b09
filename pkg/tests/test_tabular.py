import numpy as np
import pytest
from numpy.testing import assert_array_equal

from tabldm.tabular import (
    CATEGORICAL, NUMERIC, TARGET_COLUMN, Column, Table,
    column_stats, load_csv, save_csv,
)


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def test_eleven_distinct_numeric_column(tmp_path):
    p = tmp_path / "a.csv"
    write_csv(p, ["x"], [[v] for v in range(1, 12)])
    t = load_csv(p)
    assert t.columns[0].kind == NUMERIC
    assert_array_equal(t.values[:, 0], np.arange(1.0, 12.0))


def test_binary_string_column_is_categorical(tmp_path):
    p = tmp_path / "b.csv"
    write_csv(p, ["flag"], [["0"], ["1"], ["1"], ["0"]])
    t = load_csv(p)
    col = t.columns[0]
    assert col.kind == CATEGORICAL
    assert col.vocab == ("0", "1")
    assert_array_equal(t.values[:, 0], [0.0, 1.0, 1.0, 0.0])


def test_ten_distinct_numbers_still_categorical(tmp_path):
    p = tmp_path / "c.csv"
    write_csv(p, ["x"], [[v] for v in range(10)] * 2)
    t = load_csv(p)
    assert t.columns[0].kind == CATEGORICAL
    assert len(t.columns[0].vocab) == 10


def test_empty_string_is_missing_and_target_detected(tmp_path):
    p = tmp_path / "d.csv"
    rows = [[i if i != 3 else "", "a" if i % 2 else "b"] for i in range(12)]
    write_csv(p, ["x", TARGET_COLUMN], rows)
    t = load_csv(p)
    assert t.target == 1
    assert t.missing[3, 0]
    assert np.isnan(t.values[3, 0])
    assert not t.missing[2, 0]
    assert t.columns[1].kind == CATEGORICAL


def test_round_trip_preserves_everything(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(30, 2))
    vals[4, 0] = np.nan
    codes = rng.integers(0, 3, size=30).astype(float)
    codes[7] = np.nan
    table = Table(
        [Column("x0", NUMERIC), Column("x1", NUMERIC),
         Column("lab", CATEGORICAL, ("lo", "mid", "hi"))],
        np.column_stack([vals, codes]),
        target=2,
    )
    p = tmp_path / "rt.csv"
    save_csv(table, p)
    back = load_csv(p)
    assert back.target == 2
    assert [c.kind for c in back.columns] == [NUMERIC, NUMERIC, CATEGORICAL]
    assert_array_equal(back.missing, table.missing)
    obs = ~table.missing
    assert np.allclose(back.values[obs[:, 0], 0], table.values[obs[:, 0], 0])
    # categorical codes differ only by vocabulary ordering; compare labels
    for i in range(30):
        assert back.cell_label(i, 2) == table.cell_label(i, 2)
    # second save is byte-identical
    p2 = tmp_path / "rt2.csv"
    save_csv(back, p2)
    save_csv(back, tmp_path / "rt3.csv")
    assert (tmp_path / "rt2.csv").read_bytes() == (tmp_path / "rt3.csv").read_bytes()


def test_ragged_row_rejected(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match="row 3"):
        load_csv(p)


def test_nan_literal_counts_as_missing(tmp_path):
    p = tmp_path / "n.csv"
    write_csv(p, ["x"], [[v] for v in range(11)] + [["nan"]])
    t = load_csv(p)
    assert t.columns[0].kind == NUMERIC
    assert t.missing[11, 0]


def test_table_row_and_column_subsets():
    table = Table(
        [Column("a", NUMERIC), Column("b", NUMERIC), Column("y", CATEGORICAL, ("p", "q"))],
        np.array([[1.0, 2.0, 0.0], [3.0, 4.0, 1.0], [5.0, 6.0, 0.0]]),
        target=2,
    )
    sub = table.take_rows([2, 0])
    assert_array_equal(sub.values[:, 0], [5.0, 1.0])
    assert sub.target == 2
    cols = table.take_columns([2, 0], target=0)
    assert cols.target == 0
    assert cols.columns[1].name == "a"
    assert table.feature_indices() == [0, 1]


def test_column_stats_skips_missing_and_floors_std():
    table = Table(
        [Column("a", NUMERIC), Column("c", NUMERIC)],
        np.array([[1.0, 5.0], [3.0, 5.0], [np.nan, 5.0]]),
    )
    mean, std = column_stats(table)
    assert mean[0] == 2.0
    assert std[0] == 1.0  # std of {1,3}
    assert mean[1] == 5.0
    assert std[1] == 1.0  # degenerate column floored


def test_mask_and_values_stay_consistent():
    t = Table([Column("a", NUMERIC)], np.array([[1.0], [2.0]]),
              missing=np.array([[True], [False]]))
    assert np.isnan(t.values[0, 0])
    assert t.values[1, 0] == 2.0
