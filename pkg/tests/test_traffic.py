"""Task generation, splitting, station geometry, and workload forecasting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leosim.config import ConstellationConfig, LinkConfig, PredictorConfig, TrafficConfig
from leosim.constellation import Constellation
from leosim.traffic import (
    EwmaPredictor,
    InsufficientHistoryError,
    Station,
    Task,
    WorkloadHistory,
    generate_batch,
    load_stations_csv,
    make_predictor,
    make_stations,
    nearest_source,
    split_task,
    write_stations_csv,
)


def world(planes=4, per_plane=4, seed=0):
    return Constellation(
        ConstellationConfig(planes=planes, per_plane=per_plane, altitude_m=1200e3),
        LinkConfig(elevation_mask_deg=0), seed)


# -- splitting ----------------------------------------------------------------


def task_of(size_q: int) -> Task:
    return Task(id=0, origin=0, source_sat=0, size_q=size_q, arrival_time=0.0, batch=0)


def test_split_exact_byte_conservation():
    subs = split_task(task_of(1000), np.array([0.5, 0.3, 0.2]))
    assert [s.size for s in subs] == [500, 300, 200]
    assert sum(s.size for s in subs) == 1000


def test_split_largest_remainder_rounding():
    # thirds of 100: floor gives 33 each, the remainder goes to the lowest index
    subs = split_task(task_of(100), np.array([1 / 3, 1 / 3, 1 / 3]))
    assert [s.size for s in subs] == [34, 33, 33]


@settings(max_examples=60, deadline=None)
@given(
    size=st.integers(min_value=1, max_value=10**9),
    weights=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6),
)
def test_split_sums_to_size_property(size, weights):
    ratios = np.array(weights) / np.sum(weights)
    subs = split_task(task_of(size), ratios)
    assert sum(s.size for s in subs) == size
    assert all(s.size >= 0 for s in subs)
    # sub-task index k runs 1..K
    assert [s.index for s in subs] == list(range(1, len(ratios) + 1))


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_task(task_of(10), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        split_task(task_of(10), np.array([-0.5, 1.5]))


# -- stations and sources -------------------------------------------------------


def test_make_stations_deterministic_and_bounded():
    a = make_stations(25, seed=4)
    b = make_stations(25, seed=4)
    assert [(s.lat_deg, s.lon_deg) for s in a] == [(s.lat_deg, s.lon_deg) for s in b]
    assert all(-90 <= s.lat_deg <= 90 and -180 <= s.lon_deg < 180 for s in a)
    assert [(s.lat_deg, s.lon_deg) for s in make_stations(25, seed=5)] != \
        [(s.lat_deg, s.lon_deg) for s in a]


def test_stations_csv_round_trip(tmp_path):
    stations = make_stations(9, seed=1)
    path = tmp_path / "stations.csv"
    write_stations_csv(stations, path)
    header = path.read_text().splitlines()[0]
    assert header == "station_id,lat_deg,lon_deg"
    back = load_stations_csv(path)
    for s, t in zip(stations, back):
        assert t.station_id == s.station_id
        assert t.lat_deg == pytest.approx(s.lat_deg, rel=1e-9)
        assert t.lon_deg == pytest.approx(s.lon_deg, rel=1e-9)


def test_nearest_source_matches_brute_force():
    w = world(5, 5)
    st_ = Station(station_id=0, lat_deg=12.0, lon_deg=-30.0)
    got = nearest_source(st_, w)
    vis = w.visible_sats(st_.lat_deg, st_.lon_deg)
    assert vis
    want = min(vis, key=lambda t: (t[1], t[0]))[0]
    assert got == want


# -- batch generation -----------------------------------------------------------


def test_generate_batch_sizes_and_determinism():
    w = world(8, 8)
    cfg = TrafficConfig(tasks_per_batch=5, batches=3, size_mb_min=100, size_mb_max=600)
    stations = make_stations(4, seed=0)
    a = generate_batch(stations, w, batch_index=1, seed=7, cfg=cfg)
    b = generate_batch(stations, w, batch_index=1, seed=7, cfg=cfg)
    assert [(t.id, t.size_q, t.source_sat) for t in a] == \
        [(t.id, t.size_q, t.source_sat) for t in b]
    assert len(a) == 20
    for t in a:
        assert 100 * 10**6 <= t.size_q <= 600 * 10**6
        assert t.batch == 1
    # a different batch index draws a different stream
    c = generate_batch(stations, w, batch_index=2, seed=7, cfg=cfg)
    assert [t.size_q for t in c] != [t.size_q for t in a]


def test_generate_batch_index_range_checked():
    w = world()
    cfg = TrafficConfig(tasks_per_batch=2, batches=2)
    stations = make_stations(2, seed=0)
    with pytest.raises(ValueError):
        generate_batch(stations, w, batch_index=2, seed=0, cfg=cfg)


# -- forecasting ------------------------------------------------------------------


def test_ewma_closed_form():
    pred = EwmaPredictor(alpha=0.5, min_history=3)
    hist = [10.0, 20.0, 40.0]
    # f seeds at the first sample then folds in each later one
    f = hist[0]
    for x in hist[1:]:
        f = 0.5 * x + 0.5 * f
    assert pred.predict(hist) == pytest.approx(f, rel=1e-12)


def test_ewma_requires_history_and_valid_alpha():
    pred = EwmaPredictor(alpha=0.5, min_history=4)
    with pytest.raises(InsufficientHistoryError):
        pred.predict([1.0, 2.0])
    with pytest.raises(ValueError):
        EwmaPredictor(alpha=0.0, min_history=1)
    with pytest.raises(ValueError):
        EwmaPredictor(alpha=1.5, min_history=1)


def test_rnn_predictor_available_and_nonnegative():
    pred = make_predictor(PredictorConfig(kind="rnn", min_history=2), seed=0)
    out = pred.predict([5e6, 8e6, 2e6, 9e6])
    assert np.isfinite(out)
    assert out >= 0.0


def test_workload_history_aggregates_per_source():
    hist = WorkloadHistory()
    tasks = [
        Task(id=0, origin=0, source_sat=3, size_q=100, arrival_time=0.0, batch=0),
        Task(id=1, origin=1, source_sat=3, size_q=50, arrival_time=0.0, batch=0),
        Task(id=2, origin=2, source_sat=7, size_q=70, arrival_time=0.0, batch=0),
    ]
    hist.record_batch(tasks, sources=[3, 7, 9])
    assert hist.bytes_series[3] == [150.0]
    assert hist.bytes_series[7] == [70.0]
    # a source with no tasks still logs a zero so forecasts stay aligned
    assert hist.bytes_series[9] == [0.0]


def test_workload_forecast_uses_predictor():
    hist = WorkloadHistory()
    for total in [100.0, 200.0, 400.0]:
        hist.record(5, total, count=2)
    pred = EwmaPredictor(alpha=0.5, min_history=3)
    fc = hist.forecast(5, pred)
    assert fc.predicted_bytes == pytest.approx(pred.predict([100.0, 200.0, 400.0]))
    assert fc.predicted_task_count == 2
    with pytest.raises(ValueError):
        type(fc)(region_id=0, horizon=1.0, predicted_bytes=-1.0, predicted_task_count=0)
