import pytest
from gmpy2 import mpq
from hypothesis import given, settings

from cm4fq import ConfigError, LengthLaw, Scenario, TrafficSource, fluid_approx, run
from cm4fq.scenario_io import resolve_scenario
from cm4fq.sim import POST, PRE, SourceKind
from strategies import scenarios

L = 1000
M = 10**6
FIXED = LengthLaw.fixed(L)


def fig2(sources, **kw):
    kw.setdefault("horizon", mpq(1, 10))
    return Scenario(matrix=[[1, 1], [1, 1], [0, 1]], rates=[mpq(5, 2) * M, M], weights=[1, 1, 1],
                    sources=sources, **kw)


# -- traffic description ---------------------------------------------------------

def test_length_laws():
    assert LengthLaw.fixed(7).maximum == 7
    u = LengthLaw.uniform(800, 1000)
    assert (u.maximum, u.mean) == (1000, 900)
    c = LengthLaw.cycle([750, 1000, 250])
    assert (c.maximum, c.mean) == (1000, mpq(2000, 3))
    with pytest.raises(ConfigError):
        LengthLaw.uniform(5, 4)
    with pytest.raises(ConfigError):
        LengthLaw.fixed(0)
    with pytest.raises(ConfigError):
        LengthLaw.cycle([])


def test_source_validation_and_refill_windows():
    with pytest.raises(ConfigError):
        TrafficSource.deterministic([(-1, 5)]).validate()
    with pytest.raises(ConfigError):
        TrafficSource.onoff([(2, 1)], FIXED).validate()
    with pytest.raises(ConfigError):
        TrafficSource.iid(0, FIXED).validate()
    on = TrafficSource.onoff([(1, 2), (5, None)], FIXED)
    assert [on.refills_at(t) for t in (0, 1, 2, 4, 100)] == [False, True, False, False, True]
    assert TrafficSource.backlogged(FIXED, start=3).refills_at(3)
    assert not TrafficSource.deterministic([(0, 5)]).refills_at(0)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario(matrix=[[1]], rates=[1, 2], weights=[1], sources=[[]], horizon=1)
    with pytest.raises(ConfigError):
        Scenario(matrix=[[1]], rates=[0], weights=[1], sources=[[]], horizon=1)
    with pytest.raises(ConfigError):
        Scenario(matrix=[[1]], rates=[1], weights=[1], sources=[[]], horizon=-1)
    with pytest.raises(ConfigError):
        Scenario(matrix=[[1]], rates=[1], weights=[1], sources=[[TrafficSource.backlogged(FIXED)]],
                 horizon=1, l_max=10)
    with pytest.raises(ConfigError):
        Scenario(matrix=[[1]], rates=[1], weights=[1], sources=[[]], horizon=1, snapshots="never")
    with pytest.raises(ConfigError):
        Scenario(matrix=[[1]], rates=[1], weights=[1], sources=[[]], horizon=1, user_names=["x", "y"])
    sc = fig2([[TrafficSource.backlogged(FIXED)]] * 3)
    assert sc.l_max == L and sc.effective_delta == 3 * L and sc.lambda0 == L
    assert sc.user_index("c") == 2 and sc.user_index("1") == 1 and sc.server_index("s2") == 1
    with pytest.raises(ConfigError):
        sc.user_index("z")


# -- event loop -------------------------------------------------------------------

def test_zero_horizon_gives_empty_trace():
    trace = run(fig2([[TrafficSource.backlogged(FIXED)]] * 3, horizon=0))
    assert trace.dispatches == []


def test_example2_last_initial_b_packet_at_9_6_ms():
    trace = run(resolve_scenario("example2"))
    initial_b = [r for r in trace.dispatches if r.user == 1 and r.packet.arrival_time == 0]
    assert len(initial_b) == 13
    assert initial_b[-1].time == mpq(96, 10000) and initial_b[-1].server == 0
    assert trace.work(1, 0, mpq(2, 100)) == 13 * L
    assert trace.work(1, 0, mpq(96, 10000)) == 12 * L  # the window end is excluded


def test_simultaneous_events_order():
    trace = run(fig2([[TrafficSource.backlogged(FIXED)]] * 3))
    first = trace.dispatches[:2]
    assert [(r.time, r.server, r.user) for r in first] == [(0, 0, 0), (0, 1, 1)]
    # a completion and an arrival at the same instant: the arrival is queued first
    sc = Scenario(matrix=[[1], [1]], rates=[1000], weights=[1, 1],
                  sources=[[TrafficSource.deterministic([(0, 1000)])],
                           [TrafficSource.deterministic([(1, 1000)])]], horizon=3)
    trace = run(sc)
    assert [(r.time, r.user) for r in trace.dispatches] == [(0, 0), (1, 1)]


def test_backlogged_user_never_leaves_backlog():
    trace = run(fig2([[TrafficSource.backlogged(FIXED)], [TrafficSource.backlogged(FIXED, start=mpq(1, 50))],
                      [TrafficSource.backlogged(FIXED)]]))
    for time, _, backlog in trace.backlog:
        assert {0, 2} <= backlog
        if time >= mpq(1, 50):
            assert 1 in backlog


def test_iid_source_rate_and_seed_dependence():
    law = LengthLaw.uniform(800, 1000)
    sc = Scenario(matrix=[[1]], rates=[10 * M], weights=[1], sources=[[TrafficSource.iid(2000, law)]],
                  horizon=2, seed=7)
    a, b = run(sc), run(sc)
    assert [(r.time, r.packet.length) for r in a.dispatches] == [(r.time, r.packet.length) for r in b.dispatches]
    assert 3600 < len(a.dispatches) < 4400
    assert all(800 <= r.packet.length <= 1000 and r.packet.length.denominator == 1 for r in a.dispatches)
    sc.seed = 8
    c = run(sc)
    assert [r.time for r in c.dispatches] != [r.time for r in a.dispatches]


def test_sample_mode_keeps_boundaries_and_ticks():
    sc = resolve_scenario("example6")
    sc.snapshots, sc.sample_period = "sample", mpq(1, 100)
    trace = run(sc)
    times = {s.time for s in trace.snapshots if s.phase == POST}
    assert {mpq(j, 100) for j in range(1, 20)} <= times
    assert trace.state_before(mpq(4, 100)).backlogged == {0, 1, 2, 3}
    with pytest.raises(LookupError):
        trace.state_before(mpq(41, 1000) + mpq(1, 10**7))


def test_event_mode_states_and_steady_intervals():
    trace = run(resolve_scenario("example2"))
    intervals = trace.steady_intervals()
    assert intervals[0][0] == 0 and intervals[-1][1] == trace.horizon
    # intervals are ordered and disjoint; a set that only lasts between two event instants is skipped
    assert all(a[0] < a[1] <= b[0] for a, b in zip(intervals, intervals[1:]))
    assert [(a, b) for a, b, _ in intervals[:2]] == [(0, mpq(92, 10000)), (mpq(1, 100), mpq(2, 100))]
    assert any(s == {2} for _, _, s in intervals)  # a and b idle between their batches
    pre = trace.state_before(mpq(2, 100))
    assert pre.phase == PRE and pre.backlogged == {0, 1, 2}
    assert trace.backlog_at(mpq(2, 100), PRE) == {0, 1, 2}


def test_fluid_approx_identity_and_splitting():
    sc = fig2([[TrafficSource.deterministic([(0, 2500)])], [TrafficSource.backlogged(FIXED)],
               [TrafficSource.backlogged(FIXED)]], delta=2000, l_max=2500)
    same = fluid_approx(fig2([[TrafficSource.backlogged(FIXED)]] * 3, delta=2000), L)
    assert [(r.time, r.user) for r in run(same).dispatches] == \
        [(r.time, r.user) for r in run(fig2([[TrafficSource.backlogged(FIXED)]] * 3, delta=2000)).dispatches]
    small = fluid_approx(sc, 1000)
    assert small.sources[0][0].arrivals == ((0, 500), (0, 1000), (0, 1000))
    assert small.delta == 800 and small.l_max == 1000
    iid = Scenario(matrix=[[1]], rates=[M], weights=[1], horizon=1,
                   sources=[[TrafficSource.iid(100, LengthLaw.uniform(800, 1000))]])
    fluid = fluid_approx(iid, 10)
    assert fluid.sources[0][0].rate == 9000 and fluid.sources[0][0].kind is SourceKind.IID
    with pytest.raises(ConfigError):
        fluid_approx(sc, 0)


def test_example3_fluid_rates():
    sc = resolve_scenario("example3")
    trace = run(fluid_approx(sc, sc.fluid_packet_length))
    t0 = mpq(1, 10)
    b_before = trace.work(1, mpq(1, 100), t0) / (t0 - mpq(1, 100))
    assert abs(b_before / (mpq(5, 2) * M) - 1) < mpq(2, 100)
    span = trace.horizon - mpq(11, 100)
    rates = [trace.work(i, mpq(11, 100), trace.horizon) / span for i in range(3)]
    for got, want in zip(rates, [mpq(5, 4) * M, mpq(5, 4) * M, M]):
        assert abs(got / want - 1) < mpq(2, 100)


@settings(max_examples=30, deadline=None)
@given(scenarios())
def test_trace_accounting(sc):
    trace = run(sc)
    times = [r.time for r in trace.dispatches]
    assert times == sorted(times)
    assert all(r.time < sc.horizon for r in trace.dispatches)
    total = sum(trace.work(i, 0, sc.horizon) for i in range(sc.matrix.n_users))
    served = sum(trace.busy_time(k) * sc.rates[k] for k in range(sc.matrix.n_servers))
    assert 0 <= total - served <= sc.matrix.n_servers * sc.l_max
    # W jumps only at dispatches, by the dispatched length
    for snap in trace.snapshots:
        for i in range(sc.matrix.n_users):
            assert snap.work[i] == trace.work(i, 0, snap.time, include_start=True) + (
                trace.work(i, snap.time, snap.time + mpq(1, 10**12)) if snap.phase == POST else 0)
    again = run(sc)
    assert [(r.time, r.server, r.user, r.packet.length) for r in again.dispatches] == \
        [(r.time, r.server, r.user, r.packet.length) for r in trace.dispatches]
