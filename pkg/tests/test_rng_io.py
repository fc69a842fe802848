import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from lyapgap import _io, _rng


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 64 - 1), st.integers(0, 10 ** 9),
       st.integers(1, 20), st.integers(0, 19))
def test_random_access_matches_sequential(seed, stream, start, count, offset):
    offset = min(offset, count - 1)
    block = _rng.symmetric_uniform(seed, stream, start, count, 9)
    single = _rng.symmetric_uniform(seed, stream, start + offset, 1, 9)
    assert np.array_equal(block[offset], single[0])


def test_streams_differ_and_range():
    a = _rng.symmetric_uniform(1, 0, 1, 1000, 16)
    b = _rng.symmetric_uniform(1, 1, 1, 1000, 16)
    assert not np.array_equal(a, b)
    assert a.min() >= -1.0 and a.max() < 1.0


def test_uniform_distribution_ks():
    x = _rng.symmetric_uniform(7, _rng.stream_key("ks"), 1, 5000, 16).ravel()
    assert stats.kstest(x, stats.uniform(loc=-1, scale=2).cdf).pvalue > 1e-4


def test_normal_distribution_ks():
    x = _rng.standard_normal(7, 3, 1, 5000, 16).ravel()
    assert stats.kstest(x, "norm").pvalue > 1e-4


def test_haar_orthogonal():
    Q = _rng.haar_orthogonal(0, 1, 1, 50, 4)
    assert np.abs(Q @ np.swapaxes(Q, 1, 2) - np.eye(4)).max() < 1e-13


def test_stream_key_stable():
    assert _rng.stream_key("a", 1) == _rng.stream_key("a", 1)
    assert _rng.stream_key("a", 1) != _rng.stream_key("a", 2)


def test_raw_words_validation():
    with pytest.raises(ValueError):
        _rng.raw_words(0, 0, 0, 1, width=3)
    with pytest.raises(ValueError):
        _rng.raw_words(0, 0, -1, 1)


@given(st.floats(allow_nan=False))
def test_float_round_trip(x):
    assert _io.parse_float(_io.fmt_float(x)) == x


def test_nonfinite_json():
    text = _io.dumps_json({"a": math.inf, "b": [1.5, -math.inf], "c": math.nan})
    back = _io.loads_json(text)
    assert back["a"] == math.inf and back["b"][1] == -math.inf and math.isnan(back["c"])


def test_json_sorted_and_deterministic():
    a = _io.dumps_json({"b": 0.1, "a": np.float64(1 / 3)})
    b = _io.dumps_json({"a": 1 / 3, "b": 0.1})
    assert a == b and a.index('"a"') < a.index('"b"')
    assert "0.33333333333333331" in a


def test_csv_round_trip():
    text = _io.write_csv({"seed": 3, "config_hash": "abc"}, ["n", "x"], [[1, 0.1], [2, 1 / 3]])
    header, cols, rows = _io.read_csv(text)
    assert header == {"seed": "3", "config_hash": "abc"}
    assert cols == ["n", "x"]
    assert _io.parse_float(rows[1][1]) == 1 / 3


def test_config_hash_key_order_insensitive():
    assert _io.config_hash({"a": 1, "b": [1, 2]}) == _io.config_hash({"b": [1, 2], "a": 1})
    assert _io.config_hash({"a": 1}) != _io.config_hash({"a": 2})
