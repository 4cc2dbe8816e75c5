import random
from fractions import Fraction

import pytest
from gmpy2 import mpq

from cm4fq import LengthLaw, Scenario, TrafficSource, run
from cm4fq.metrics import steady_state_reports
from cm4fq.midrr import MiDrr
from cm4fq.model import Packet
from cm4fq.scenario_io import resolve_scenario
from cm4fq.sim import make_state
from oracles import CyclicDrr, frac, reference_schedule

M = 10**6
L = 1000


def midrr_trace(sc, quanta=None):
    return run(sc, MiDrr(make_state(sc), quanta or sc.quanta))


def period_of(records, start, horizon, shift):
    """True when the dispatch pattern after ``start`` repeats with the given time shift."""
    pattern = {(r.time, r.server, r.user, r.packet.length) for r in records}
    return all(
        (r.time + shift, r.server, r.user, r.packet.length) in pattern
        for r in records if start <= r.time and r.time + shift < horizon
    )


def test_example7_unfair_rates_and_three_round_period():
    sc = resolve_scenario("example7_midrr")
    trace = midrr_trace(sc)
    t0 = mpq(1, 100)
    span = sc.horizon - t0
    a = trace.work(0, t0, sc.horizon) / span
    b = trace.work(1, t0, sc.horizon) / span
    assert abs(a / (mpq(4, 3) * M) - 1) < mpq(1, 100)
    assert abs(b / (mpq(2, 3) * M) - 1) < mpq(1, 100)
    assert period_of(trace.dispatches, t0, sc.horizon, mpq(3, 1000))
    assert not period_of(trace.dispatches, t0, sc.horizon, mpq(1, 1000))


def test_example7_fair_scheduler_on_same_input():
    sc = resolve_scenario("example7_midrr")
    trace = run(sc)
    for i in range(2):
        assert abs(trace.work(i, 0, sc.horizon) / sc.horizon - M) <= 2 * L
    assert all(r.passed for r in steady_state_reports(trace))


def test_single_user_gets_whole_server():
    sc = Scenario(matrix=[[1]], rates=[M], weights=[1], sources=[[TrafficSource.backlogged(LengthLaw.fixed(L))]],
                  horizon=1)
    trace = midrr_trace(sc, [L])
    assert trace.work(0, 0, 1) == M


def test_symmetric_fixed_lengths_are_shared_fairly():
    law = LengthLaw.fixed(L)
    sc = Scenario(matrix=[[1, 1], [1, 1], [1, 1]], rates=[M, 2 * M], weights=[1, 1, 1],
                  sources=[[TrafficSource.backlogged(law)] for _ in range(3)], horizon=1)
    trace = midrr_trace(sc, [L] * 3)
    for i in range(3):
        assert abs(trace.work(i, 0, 1) - M) <= 2 * L


def test_service_raises_flags_on_other_servers():
    sc = Scenario(matrix=[[1, 1, 0], [1, 1, 1]], rates=[1, 1, 1], weights=[1, 1],
                  sources=[[TrafficSource.backlogged(LengthLaw.fixed(1))]] * 2, horizon=1)
    drr = MiDrr(make_state(sc), [1, 1])
    for i in range(2):
        for j in range(2):
            drr.on_arrival(Packet(i, mpq(1), mpq(0), j), mpq(0))
    assert drr.select_and_dispatch(0, mpq(0)).user == 0
    assert drr.flags[0] == [0, 1, 0] and drr.flags[1] == [0, 0, 0]
    # server 2 finds user a flagged: it clears the flag and passes a over without a quantum
    assert drr.select_and_dispatch(1, mpq(0)).user == 1
    assert drr.flags[0][1] == 0 and drr.deficit[0][1] == 0
    assert drr.flags[1] == [1, 0, 1]


def test_rejects_bad_quanta():
    sc = resolve_scenario("example7_midrr")
    with pytest.raises(ValueError):
        MiDrr(make_state(sc), [L])
    with pytest.raises(ValueError):
        MiDrr(make_state(sc), [L, 0])


def test_single_server_matches_classic_drr():
    rng = random.Random(11)
    for _ in range(60):
        n = rng.randint(1, 4)
        arrivals = [(Fraction(rng.randint(0, 40), 1000), i, rng.randint(1, 10))
                    for i in range(n) for _ in range(rng.randint(0, 12))]
        quanta = [rng.randint(3, 15) for _ in range(n)]
        sources = [[TrafficSource.deterministic([(t, l) for t, u, l in arrivals if u == i])] for i in range(n)]
        sc = Scenario(matrix=[[1]] * n, rates=[10000], weights=[1] * n, sources=sources, horizon=1)
        mine = [(frac(r.time), r.user, frac(r.packet.length)) for r in midrr_trace(sc, quanta).dispatches]
        assert mine == reference_schedule(arrivals, 10000, CyclicDrr(quanta))
