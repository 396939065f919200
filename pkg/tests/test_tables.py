import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predmarket.errors import ConflictError, ValidationError
from predmarket.tables import (
    CSVRowError,
    ForecastTable,
    forecasts_text,
    load_forecast_csv,
    parse_forecasts,
    parse_realizations,
    realizations_text,
    write_forecast_csv,
)

HEADER = "timestamp,seller,horizon,q0.1,q0.5,q0.9\n"


def test_complete_two_seller_file():
    table = parse_forecasts(HEADER + "0,a,1,1,2,3\n0,b,1,2,3,4\n1,a,1,1,2,3\n1,b,1,0,0,0\n")
    assert table.sellers == ("a", "b") and table.levels == (0.1, 0.5, 0.9)
    for t in (0, 1):
        assert table.alpha(t).tolist() == [0.0, 0.0]


def test_gap_means_missing():
    table = parse_forecasts(HEADER + "0,a,1,1,2,3\n0,b,1,2,3,4\n1,a,1,1,2,3\n")
    assert table.alpha(1).tolist() == [0.0, 1.0]
    assert list(table.submissions(1)) == ["a"]


def test_crossing_quantiles_report_line_number():
    with pytest.raises(CSVRowError) as err:
        parse_forecasts(HEADER + "0,a,1,1,2,3\n0,b,1,2.0,1.0,3.0\n", path="f.csv")
    assert err.value.line == 3
    assert "f.csv:3" in str(err.value)


@pytest.mark.parametrize(
    "body,line",
    [
        ("0,a,1,1,2\n", 2),
        ("0,a,1,1,x,3\n", 2),
        ("zero,a,1,1,2,3\n", 2),
        ("0,a,1,1,2,3\n0,,1,1,2,3\n", 3),
        ("0,a,0,1,2,3\n", 2),
        ("0,a,1,1,nan,3\n", 2),
        ("1,a,1,1,2,3\n0,a,1,1,2,3\n", 3),
    ],
)
def test_malformed_rows(body, line):
    with pytest.raises(CSVRowError) as err:
        parse_forecasts(HEADER + body)
    assert err.value.line == line


def test_duplicate_row_is_a_conflict():
    with pytest.raises(ConflictError, match=":3"):
        parse_forecasts(HEADER + "0,a,1,1,2,3\n0,a,1,1,2,3\n")


def test_header_checks():
    with pytest.raises(CSVRowError):
        parse_forecasts("")
    with pytest.raises(CSVRowError):
        parse_forecasts("time,seller,horizon,q0.5\n")
    with pytest.raises(CSVRowError):
        parse_forecasts("timestamp,seller,horizon,q0.9,q0.1\n")
    with pytest.raises(CSVRowError):
        parse_forecasts(HEADER, levels=(0.1, 0.5))


def test_incomplete_horizons_rejected():
    head = "timestamp,seller,horizon,q0.5\n"
    with pytest.raises(ValidationError, match="horizon"):
        parse_forecasts(head + "0,a,1,1\n0,a,2,1\n1,a,1,1\n")
    table = parse_forecasts(head + "0,a,1,1\n0,a,2,2\n")
    assert table.horizons == 2
    assert table.submissions(0)["a"].tolist() == [[1.0], [2.0]]


def test_realizations():
    real = parse_realizations("timestamp,y\n0,1.5\n2,-3\n")
    assert real == {0: 1.5, 2: -3.0}
    with pytest.raises(ConflictError):
        parse_realizations("timestamp,y\n0,1\n0,2\n")
    with pytest.raises(CSVRowError):
        parse_realizations("timestamp,y\n0,abc\n")


def test_files_round_trip(tmp_path):
    f, r = tmp_path / "f.csv", tmp_path / "r.csv"
    values = {(0, "a", 1): (0.1, 0.2, 0.30000000000000004), (1, "b", 1): (-1e-300, 0.0, 7e22)}
    table = ForecastTable((0.1, 0.5, 0.9), ("a", "b"), 1, values, {0: 1 / 3, 1: 2.5})
    write_forecast_csv(table, f, r)
    assert load_forecast_csv(f, r) == table


quantile_rows = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=2).map(sorted)


@st.composite
def tables(draw):
    n_sellers = draw(st.integers(1, 3))
    horizons = draw(st.integers(1, 2))
    sellers = tuple(f"s{i}" for i in range(n_sellers))
    values, real = {}, {}
    for t in range(draw(st.integers(1, 6))):
        real[t] = draw(st.floats(-1e6, 1e6, allow_nan=False))
        for s in sellers:
            if t > 0 and not draw(st.booleans()):
                continue
            for h in range(1, horizons + 1):
                values[(t, s, h)] = tuple(draw(quantile_rows))
    return ForecastTable((0.25, 0.75), sellers, horizons, values, real)


@settings(max_examples=60)
@given(tables())
def test_text_round_trip_is_exact(table):
    back = parse_forecasts(forecasts_text(table))
    back.realizations = parse_realizations(realizations_text(table))
    assert back == table
    for key, q in table.values.items():
        assert all(a == b for a, b in zip(back.values[key], q))


def test_table_alpha_matches_submissions():
    table = parse_forecasts(HEADER + "0,a,1,1,2,3\n0,c,1,1,2,3\n1,b,1,1,2,3\n")
    assert table.sellers == ("a", "c", "b")
    np.testing.assert_array_equal(table.alpha(1), [1.0, 1.0, 0.0])
