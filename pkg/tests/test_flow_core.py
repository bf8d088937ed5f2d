import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stmoe.errors import ConfigError, DataError, DegenerateScaleError, TrajectoryError
from stmoe.flow_core import (CALENDAR_SCHEMA, ExternalField, ExternalSchema, FlowSeries, FlowSnapshot, GridSpec,
                             NormStats, compute_inflow_outflow, encode_external, flows_from_trajectories,
                             minmax_apply, minmax_fit, minmax_invert, read_trajectories_csv)

from oracles import brute_force_flows

BOUNDS = (0.0, 4.0, 10.0, 14.0)
GRID = GridSpec(4, 4, BOUNDS)


def random_trajectories(rng, n, max_len=8, n_t=3):
    trajs = {}
    for k in range(n):
        m = int(rng.integers(0, max_len + 1))
        ts = np.sort(rng.integers(0, n_t, size=m))
        lat = rng.uniform(-0.5, 4.5, size=m)
        lon = rng.uniform(9.5, 14.5, size=m)
        trajs[f"traj{k}"] = [(int(a), float(b), float(c)) for a, b, c in zip(ts, lat, lon)]
    return trajs


def test_empty_set_gives_zeros():
    s = compute_inflow_outflow({}, GRID, 0)
    assert not s.inflow.any() and not s.outflow.any()


def test_same_region_is_not_a_crossing():
    s = compute_inflow_outflow({"a": [(0, 0.2, 10.2), (0, 0.7, 10.9)]}, GRID, 0)
    assert not s.inflow.any() and not s.outflow.any()


def test_single_crossing():
    s = compute_inflow_outflow({"a": [(0, 0.5, 10.5), (0, 0.5, 11.5)]}, GRID, 0)
    assert s.outflow[0, 0] == 1 and s.inflow[0, 1] == 1
    assert s.inflow.sum() == 1 and s.outflow.sum() == 1


def test_transition_belongs_to_earlier_interval():
    trajs = {"a": [(2, 0.5, 10.5), (3, 0.5, 11.5)]}
    assert compute_inflow_outflow(trajs, GRID, 2).inflow[0, 1] == 1
    assert compute_inflow_outflow(trajs, GRID, 3).inflow.sum() == 0


def test_boundary_point_goes_to_larger_index():
    assert GRID.locate(1.0, 10.0) == 4
    assert GRID.locate(0.999999, 10.0) == 0
    assert GRID.locate(4.0, 12.0) == -1  # upper edge is outside (half-open)


def test_outside_points_count_as_no_region():
    s = compute_inflow_outflow({"a": [(0, -1.0, 10.5), (0, 0.5, 10.5), (0, 9.0, 10.5)]}, GRID, 0)
    assert s.inflow[0, 0] == 1 and s.outflow[0, 0] == 1
    assert s.inflow.sum() == 1 and s.outflow.sum() == 1


def test_matches_brute_force(rng):
    trajs = random_trajectories(rng, 200)
    for t in range(3):
        s = compute_inflow_outflow(trajs, GRID, t)
        inflow, outflow = brute_force_flows(trajs, BOUNDS, 4, 4, t)
        np.testing.assert_array_equal(s.inflow, inflow)
        np.testing.assert_array_equal(s.outflow, outflow)


@given(st.integers(0, 2**32 - 1))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    trajs = random_trajectories(rng, 12)
    keys = list(trajs)
    perm = rng.permutation(len(keys))
    relabeled = {f"x{perm[n]}": trajs[k] for n, k in enumerate(keys)}
    a = compute_inflow_outflow(trajs, GRID, 1)
    b = compute_inflow_outflow(relabeled, GRID, 1)
    np.testing.assert_array_equal(a.inflow, b.inflow)
    np.testing.assert_array_equal(a.outflow, b.outflow)


@given(st.integers(0, 2**32 - 1))
def test_total_inflow_equals_entering_transitions(seed):
    rng = np.random.default_rng(seed)
    trajs = random_trajectories(rng, int(rng.integers(0, 21)))
    inflow, _ = brute_force_flows(trajs, BOUNDS, 4, 4, 0)
    assert compute_inflow_outflow(trajs, GRID, 0).inflow.sum() == inflow.sum()


def test_errors():
    with pytest.raises(ConfigError):
        compute_inflow_outflow({}, GRID, -1)
    with pytest.raises(ConfigError):
        GridSpec(0, 4)
    with pytest.raises(ConfigError):
        GridSpec(2, 2, (1.0, 1.0, 0.0, 1.0))
    with pytest.raises(TrajectoryError, match="bad"):
        compute_inflow_outflow({"bad": [(0, float("nan"), 10.0), (0, 1.0, 10.0)]}, GRID, 0)


def test_csv_reader(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("traj_id,t,lat,lon\na,0,0.5,10.5\na,0,0.5,11.5\nb,1,1.5,10.5\n")
    trajs = read_trajectories_csv(p)
    assert trajs["a"] == [(0, 0.5, 10.5), (0, 0.5, 11.5)]
    series = flows_from_trajectories(trajs, GRID, 0, 2)
    assert series.flows.shape == (2, 2, 4, 4)
    assert series.flows[0, 0, 0, 1] == 1
    p.write_text("a,0,0.5\n")
    with pytest.raises(DataError):
        read_trajectories_csv(p)


def test_series_from_snapshots_requires_consecutive():
    z = np.zeros((4, 4))
    with pytest.raises(DataError):
        FlowSeries.from_snapshots([FlowSnapshot(z, z, 0), FlowSnapshot(z, z, 2)], GRID)


# --- scaling

def test_minmax_fit_examples():
    flows = np.zeros((101, 2, 1, 1))
    flows[:, 0, 0, 0] = np.arange(101)
    flows[:, 1, 0, 0] = np.arange(101) * 2 + 5
    s = minmax_fit(flows)
    assert s.min.tolist() == [0, 5] and s.max.tolist() == [100, 205]
    with pytest.raises(DegenerateScaleError):
        minmax_fit(np.ones((4, 2, 2, 2)))


def test_minmax_fit_uses_training_prefix_only():
    flows = np.zeros((10, 2, 1, 1))
    flows[:, :, 0, 0] = np.arange(10)[:, None]
    s = minmax_fit(flows, n_train=5)
    assert s.max.tolist() == [4, 4]


def test_minmax_apply_examples():
    s = NormStats(np.array([2.0, 0.0]), np.array([10.0, 4.0]))
    x = np.array([[2.0, 10.0, 6.0], [0.0, 4.0, 2.0]])[:, :, None]
    y = minmax_apply(x, s)
    np.testing.assert_allclose(y[:, :, 0], [[-1, 1, 0], [-1, 1, 0]])
    s01 = NormStats(s.min, s.max, (0.0, 1.0))
    np.testing.assert_allclose(minmax_apply(x, s01)[:, :, 0], [[0, 1, 0.5], [0, 1, 0.5]])


def test_minmax_extrapolates_linearly():
    s = NormStats(np.array([0.0]), np.array([10.0]))
    assert minmax_apply(np.array([[[20.0]]]), s).item() == pytest.approx(3.0)


def test_round_trip_1000_tensors(rng):
    for _ in range(1000):
        n_ch = int(rng.integers(1, 4))
        lo = rng.normal(size=n_ch) * 50
        hi = lo + rng.uniform(0.1, 500, size=n_ch)
        s = NormStats(lo, hi, tuple(sorted(rng.uniform(-3, 3, size=2) + [0, 1e-3])))
        x = rng.uniform(-100, 600, size=(int(rng.integers(1, 4)), n_ch, 3, 2))
        back = minmax_invert(minmax_apply(x, s), s)
        np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-9 * np.abs(x).max())


# --- external factors

def test_encode_external_examples():
    v = encode_external({"DayOfWeek": "Monday", "Weekend": False}, CALENDAR_SCHEMA).values
    np.testing.assert_array_equal(v, [1, 0, 0, 0, 0, 0, 0, 1, 0])
    v = encode_external({"DayOfWeek": "Sunday", "Weekend": True}, CALENDAR_SCHEMA).values
    np.testing.assert_array_equal(v[7:], [0, 1])
    temp = ExternalSchema((ExternalField("Temperature", "continuous", range=(-10.0, 30.0)),))
    assert encode_external({"Temperature": 10.0}, temp).values.tolist() == [0.5]


def test_encode_external_errors():
    with pytest.raises(DataError, match="Monday"):
        encode_external({"DayOfWeek": "Funday", "Weekend": False}, CALENDAR_SCHEMA)
    temp = ExternalSchema((ExternalField("Temperature", "continuous", range=(0.0, 1.0)),))
    with pytest.warns(UserWarning, match="clamped"):
        assert encode_external({"Temperature": 3.0}, temp).values.tolist() == [1.0]


@given(st.sampled_from(["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"]),
       st.booleans(), st.floats(-50, 50))
def test_encoding_invariants(day, weekend, temp):
    schema = ExternalSchema(CALENDAR_SCHEMA.fields + (ExternalField("T", "continuous", range=(-20.0, 40.0)),))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        v = encode_external({"DayOfWeek": day, "Weekend": weekend, "T": temp}, schema).values
    assert v[:7].sum() == 1 and v[7:9].sum() == 1
    assert 0 <= v[9] <= 1
