import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kanbeats.metrics import mae, metric_report, smape


def test_hand_values():
    assert abs(mae([2, 4], [1, 3]) - 1.0) <= 1e-12
    assert abs(mae([0, 10], [5, 5]) - 5.0) <= 1e-12
    assert abs(smape([1], [3]) - 1.0) <= 1e-12
    expected = 0.5 * (10 / 105 + 10 / 95)
    assert abs(smape([100, 100], [110, 90]) - expected) <= 1e-12
    assert abs(smape([100, 100], [110, 90]) - 0.1002506265664160) <= 1e-12


def test_smape_zero_terms():
    assert smape([0, 0], [0, 0]) == 0.0
    assert smape([0, 2], [0, 2]) == 0.0
    assert abs(smape([0, 1], [0, 3]) - 0.5) <= 1e-15
    assert smape([0], [5]) == 2.0


def test_errors():
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        smape([1, 2], [1])


def test_report_pools_and_splits():
    actual = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = np.array([[1.0, 3.0], [3.0, 2.0]])
    rep = metric_report(actual, pred, labels=["d1", "d2"])
    assert rep.n_windows == 2
    assert rep.mae == mae(actual, pred)
    assert rep.smape == smape(actual, pred)
    assert [w["window"] for w in rep.per_window] == ["d1", "d2"]
    assert rep.per_window[1]["mae"] == 1.0
    assert rep.to_dict(4)["mae"] == 0.75


@settings(max_examples=1000, deadline=None)
@given(st.data())
def test_invariances(data):
    # subnormals are excluded: scaling them underflows to 0 and changes the pair
    n = data.draw(st.integers(1, 40))
    y = data.draw(arrays(np.float64, n, elements=st.floats(-1e4, 1e4, allow_subnormal=False)))
    yh = data.draw(arrays(np.float64, n, elements=st.floats(-1e4, 1e4, allow_subnormal=False)))
    c = data.draw(st.floats(-1e3, 1e3))
    k = data.draw(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
    base = mae(y, yh)
    assert abs(mae(y + c, yh + c) - base) <= 1e-9 * (1 + abs(c) + np.abs(y).max())
    assert abs(mae(k * y, k * yh) - abs(k) * base) <= 1e-12 * abs(k) * (1 + base + np.abs(y).max())
    s = smape(y, yh)
    assert abs(smape(k * y, k * yh) - s) <= 1e-12
    assert 0.0 <= s <= 2.0
    assert smape(y, yh) == smape(yh, y)
    assert mae(y, y) == 0.0
