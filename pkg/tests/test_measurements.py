import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phaseid import load_fixture
from phaseid.feeder import reduce_network
from phaseid.measurements import (SUBSTATION_PREFIX, MeasurementError, MeasurementSet,
                                  difference_series, format_measurements, parse_measurements,
                                  reference_voltages, refer_to_primary)

VB, SB = 7200.0, 1e6


def random_set(rng, T=10, M=3, ids=None):
    ids = ids or tuple(f"L{k}" for k in range(M))
    return MeasurementSet(ids, 1 + 0.01 * rng.normal(size=(T, M)), rng.normal(size=(T, M)) * 0.01,
                          rng.normal(size=(T, M)) * 0.01, 1 + 0.01 * rng.normal(size=(T, 3)))


def csv_rows(times, loads, sub=(7200.0, 7200.0, 7200.0)):
    lines = ["time,load_id,v,p,q"]
    for t in times:
        for ph, val in zip("abc", sub):
            lines.append(f"{t},{SUBSTATION_PREFIX}{ph},{val},,")
        for lid, (v, p, q) in loads.items():
            lines.append(f"{t},{lid},{v},{p},{q}")
    return "\n".join(lines) + "\n"


HOURS = [f"2024-01-01T{h:02d}:00:00" for h in range(6)]


def test_parse_converts_to_per_unit():
    ms = parse_measurements(csv_rows(HOURS, {"L1": (7128.0, -20.0, -5.0)}), VB, SB)
    assert ms.T == 6 and ms.load_ids == ("L1",)
    assert ms.v[0, 0] == pytest.approx(0.99)
    assert ms.p[0, 0] == pytest.approx(-0.02) and ms.q[0, 0] == pytest.approx(-0.005)
    assert np.allclose(ms.v0, 1.0)


def test_consumption_sign_flip():
    text = csv_rows(HOURS, {"L1": (7128.0, 20.0, 5.0)})
    ms = parse_measurements(text, VB, SB, consumption_positive=True)
    assert ms.p[0, 0] == pytest.approx(-0.02)


@pytest.mark.parametrize("text, message", [
    ("t,id,v,p,q\n", "header"),
    ("time,load_id,v,p,q\n2024-01-01T00:00:00,L1,x,1,1\n", "line 2"),
    ("time,load_id,v,p,q\nyesterday,L1,1,1,1\n", "timestamp"),
    ("time,load_id,v,p,q\n2024-01-01T00:00:00,L1,1,1\n", "5 columns"),
    ("time,load_id,v,p,q\n2024-01-01T00:00:00,__substation__d,1,,\n", "substation channel"),
    ("time,load_id,v,p,q\n2024-01-01T00:00:00,L1,nan,1,1\n", "finite"),
])
def test_malformed_input(text, message):
    with pytest.raises(MeasurementError, match=message):
        parse_measurements(text, VB, SB)


def test_incomplete_timestamp_dropped_and_segmented():
    text = csv_rows(HOURS, {"L1": (7128.0, -20.0, -5.0), "L2": (7100.0, -1.0, 0.0)})
    # remove L2 at the third hour
    text = "\n".join(l for l in text.splitlines() if not l.startswith(f"{HOURS[2]},L2")) + "\n"
    ms = parse_measurements(text, VB, SB)
    assert ms.T == 5
    assert list(ms.segment) == [0, 0, 1, 1, 1]
    ds = difference_series(ms, ("single", "single"))
    assert ds.T == 3   # 1 + 2 differences, none across the gap


def test_topology_change_starts_epoch():
    text = csv_rows(HOURS, {"L1": (7128.0, -20.0, -5.0)})
    ms = parse_measurements(text, VB, SB, topology_changes=[HOURS[3]])
    assert list(ms.epoch) == [0, 0, 0, 1, 1, 1]
    ds = difference_series(ms, ("single",))
    assert list(ds.epoch) == [0, 0, 1, 1]


def test_csv_round_trip(rng):
    ms = random_set(rng)
    back = parse_measurements(format_measurements(ms, VB, SB), VB, SB)
    for name in ("v", "p", "q", "v0"):
        assert np.allclose(getattr(back, name), getattr(ms, name), rtol=1e-14)


def test_pair_voltages_from_balanced_angles():
    ms = MeasurementSet(("a",), np.ones((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), np.ones((2, 3)))
    assert np.allclose(ms.pair_voltages(), np.sqrt(3.0))
    ref = reference_voltages(ms, ("two",))
    assert ref.shape == (2, 1, 3) and np.allclose(ref, np.sqrt(3.0))


def test_constant_series_differences_to_zero():
    T = 5
    ms = MeasurementSet(("a", "b"), np.full((T, 2), 1.01), np.full((T, 2), -0.1),
                        np.full((T, 2), 0.02), np.full((T, 3), 1.02))
    ds = difference_series(ms, ("single", "two"))
    for arr in (ds.v, ds.p, ds.q, ds.vref):
        assert not np.any(arr)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.integers(0, 2**32 - 1))
def test_differencing_removes_offsets(c, seed):
    rng = np.random.default_rng(seed)
    ms = random_set(rng)
    shifted = MeasurementSet(ms.load_ids, ms.v + c, ms.p, ms.q, ms.v0)
    a = difference_series(ms, ("single",) * 3)
    b = difference_series(shifted, ("single",) * 3)
    assert np.allclose(a.v, b.v, atol=1e-14, rtol=0)


def test_long_series_spot_check(rng):
    ms = random_set(rng, T=2160)
    ds = difference_series(ms, ("single",) * 3)
    assert ds.T == 2159
    for t in rng.integers(0, 2159, size=3):
        assert np.array_equal(ds.v[t], ms.v[t + 1] - ms.v[t])
        assert np.array_equal(ds.p[t], ms.p[t + 1] - ms.p[t])


def test_short_segment_rejected(rng):
    ms = random_set(rng, T=4)
    ms = MeasurementSet(ms.load_ids, ms.v, ms.p, ms.q, ms.v0, segment=np.array([0, 0, 0, 1]))
    with pytest.raises(MeasurementError, match="fewer than 2"):
        difference_series(ms, ("single",) * 3)


def test_refer_to_primary_only_touches_secondary_loads(rng):
    red = reduce_network(load_fixture("feeder_4load"))
    ms = random_set(rng, M=len(red.loads), ids=red.load_ids)
    out = refer_to_primary(ms, red)
    for c, ld in enumerate(red.loads):
        same = np.array_equal(out.v[:, c], ms.v[:, c])
        assert same == (not ld.is_secondary)


def test_refer_to_primary_rejects_unknown_load(rng):
    red = reduce_network(load_fixture("feeder_2node"))
    with pytest.raises(MeasurementError, match="not in the feeder"):
        refer_to_primary(random_set(rng, M=1, ids=("ghost",)), red)
