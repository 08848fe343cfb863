import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoam.analytics import p_d
from twoam.checker import write_trace_csv
from twoam.simnet import ConfigError, Deterministic, Exponential, UniformAsync
from twoam.workload import (
    ClientQueue,
    WorkloadConfig,
    drive_client,
    occupancy,
    run_abstract,
    run_experiment,
)


@pytest.mark.parametrize(
    "kw",
    [dict(clients=1, rate=1, ops_per_client=1), dict(clients=2, rate=0, ops_per_client=1),
     dict(clients=2, rate=1), dict(clients=2, rate=1, ops_per_client=1, writer_id=2),
     dict(clients=2, rate=1, ops_per_client=1, keys=0)],
)
def test_bad_workload_rejected(kw):
    with pytest.raises(ConfigError):
        WorkloadConfig(**kw)


def test_arrival_count_over_horizon():
    # lam = 50/s over 100 s: the count is Poisson(5000)
    q = ClientQueue(0, False)
    gen = drive_client(q, random.Random(11), 50.0)
    count = 0
    while next(gen) <= 100.0:
        count += 1
    assert abs(count - 5000) <= 3 * math.sqrt(5000)


def test_accepted_plus_rejected_matches_poisson_count():
    wl = WorkloadConfig(clients=2, rate=50, horizon=100.0)
    tr = run_experiment(wl, UniformAsync(50), "2AM", 3, seed=12)
    for acc, rej in zip(tr.meta["accepted"], tr.meta["rejected"]):
        assert abs(acc + rej - 5000) <= 3 * math.sqrt(5000)
        assert rej > 0


def test_busy_client_rejects_arrivals():
    # 0.5 s per op, arrivals every ~10 ms; arrivals stop once the third op is
    # accepted, so about two services' worth (~100) are rejected
    wl = WorkloadConfig(clients=2, rate=100, ops_per_client=3)
    tr = run_experiment(wl, Deterministic(0.25), "2AM", 3, seed=0, processing=0.0)
    assert tr.meta["accepted"] == [3, 3]
    assert all(60 < r < 140 for r in tr.meta["rejected"])
    lat = tr.response - tr.invoke
    assert np.allclose(lat, 0.5)


def test_default_parameters_trace_shape():
    wl = WorkloadConfig(clients=5, rate=50, ops_per_client=300)
    tr = run_experiment(wl, UniformAsync(50), "2AM", 5, seed=1)
    tr.validate()
    assert sorted(set(tr.client_id.tolist())) == [0, 1, 2, 3, 4]
    assert not (~tr.is_write[tr.client_id == 0]).any()  # writer issues only writes
    assert tr.is_write[tr.client_id == 0].sum() == 300
    assert not tr.is_write[tr.client_id != 0].any()
    assert (tr.response > tr.invoke).all()


def test_zero_ops_gives_empty_trace():
    wl = WorkloadConfig(clients=3, rate=10, ops_per_client=0)
    tr = run_experiment(wl, UniformAsync(10), "2AM", 3, seed=0)
    assert len(tr) == 0


def test_keys_are_uniform():
    wl = WorkloadConfig(clients=3, rate=50, ops_per_client=2000, keys=5)
    tr = run_experiment(wl, UniformAsync(10), "2AM", 3, seed=2)
    counts = np.bincount(tr.key, minlength=5)
    expected = len(tr) / 5
    # chi-square with 4 degrees of freedom, 0.999 quantile is 18.47
    assert ((counts - expected) ** 2 / expected).sum() < 18.47
    tr.validate()


def _csv(tr):
    import io

    buf = io.StringIO()
    write_trace_csv(tr, buf)
    return buf.getvalue()


@pytest.mark.parametrize("protocol", ["2AM", "ABD"])
def test_same_seed_same_trace(protocol):
    wl = WorkloadConfig(clients=4, rate=50, ops_per_client=300, keys=2)
    a = run_experiment(wl, Exponential(20, 20), protocol, 4, seed=9)
    b = run_experiment(wl, Exponential(20, 20), protocol, 4, seed=9)
    c = run_experiment(wl, Exponential(20, 20), protocol, 4, seed=10)
    assert _csv(a) == _csv(b)
    assert _csv(a) != _csv(c)


def test_recorded_event_log_is_deterministic():
    wl = WorkloadConfig(clients=3, rate=50, ops_per_client=50)
    a = run_experiment(wl, UniformAsync(20), "2AM", 3, seed=4, record=True)
    b = run_experiment(wl, UniformAsync(20), "2AM", 3, seed=4, record=True)
    assert a.meta["fired"] == b.meta["fired"]
    assert len(a.meta["fired"]) == a.meta["events"]


@settings(max_examples=25, deadline=None)
@given(
    st.integers(2, 5),
    st.integers(2, 6),
    st.sampled_from(["2AM", "ABD"]),
    st.integers(0, 10**6),
    st.integers(1, 3),
)
def test_every_trace_is_well_formed(n, N, protocol, seed, keys):
    wl = WorkloadConfig(clients=N, rate=30, ops_per_client=40, keys=keys)
    tr = run_experiment(wl, UniformAsync(30), protocol, n, seed=seed)
    tr.validate()
    assert len(tr) == N * 40


def test_abstract_replay_matches_queueing_model():
    lam = mu = 10.0
    horizon = 2e5
    wl = WorkloadConfig(clients=3, rate=lam, service_rate=mu, horizon=horizon)
    tr = run_abstract(wl, seed=3)
    for frac in occupancy(tr, horizon):
        assert abs(frac - lam / (mu + lam)) < 0.01
    # D: reads of client 2 finishing in [w_st, r_st] for reads r of client 1
    # that start inside a write w
    w = tr.is_write
    wst, wft = tr.invoke[w], tr.response[w]
    rst = tr.invoke[tr.client_id == 1]
    other_ft = np.sort(tr.response[tr.client_id == 2])
    i = np.searchsorted(wst, rst, side="right") - 1
    inside = (i >= 0) & (rst <= wft[np.clip(i, 0, None)])
    d = np.searchsorted(other_ft, rst[inside], side="right") - np.searchsorted(
        other_ft, wst[i[inside]], side="left"
    )
    assert len(d) > 4 * 10**5
    for k in range(4):
        assert abs((d == k).mean() - p_d(k, lam, mu)) < 0.005


def test_abstract_replay_reads_return_last_completed_write():
    wl = WorkloadConfig(clients=3, rate=10, service_rate=10, horizon=500.0, keys=2)
    tr = run_abstract(wl, seed=1)
    tr.validate()
    for i in np.nonzero(~tr.is_write)[0][:500]:
        m = tr.is_write & (tr.key == tr.key[i]) & (tr.response < tr.invoke[i])
        assert tr.version[i] == m.sum()


def test_abstract_needs_service_rate():
    with pytest.raises(ConfigError):
        run_abstract(WorkloadConfig(clients=2, rate=1, horizon=10))
