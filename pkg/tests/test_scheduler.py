from bisect import bisect_right

import pytest
from gmpy2 import mpq
from hypothesis import given, settings

from cm4fq import LengthLaw, Scenario, TrafficSource
from cm4fq.metrics import (
    check_steady_state,
    check_tag_dominance,
    check_work_identity,
    check_worst_case,
    continuous_backlog,
    steady_state_reports,
)
from cm4fq.model import INFINITE, EligibilityMatrix, Packet, SystemState
from cm4fq.scenario_io import resolve_scenario
from cm4fq.scheduler import Scheduler, Variant, default_delta
from cm4fq.sim import POST, run
from strategies import scenarios

L = 1000
FIG2 = EligibilityMatrix([[1, 1], [1, 1], [0, 1]])


def make(matrix=FIG2, rates=(1000, 1000), weights=None, delta=2 * L, variant=Variant.FULL):
    weights = weights or [1] * matrix.n_users
    return Scheduler(SystemState.initial(matrix, rates, weights, delta), variant)


def fill(sched, user, count=3, length=L, t=0):
    for j in range(count):
        sched.on_arrival(Packet(user, mpq(length), mpq(t), j), mpq(t))


# -- en-queue ---------------------------------------------------------------------

def test_first_arrival_keeps_zero_tag_and_reports_idle_servers():
    s = make()
    free = s.on_arrival(Packet(2, mpq(L), mpq(0), 0), mpq(0))
    assert free == [1]
    assert s.state.users[2].tag == 0


def test_returning_user_is_lifted_to_highest_eligible_level():
    s = make()
    s.state.servers[0].level, s.state.servers[1].level = mpq(5000), mpq(3000)
    s.state.clock = mpq(1, 10)
    s.on_arrival(Packet(0, mpq(L), mpq(1, 10), 0), mpq(1, 10))
    assert s.state.users[0].tag == 5000
    # a second packet to the now backlogged user leaves the tag alone
    s.state.servers[0].level = mpq(9000)
    s.on_arrival(Packet(0, mpq(L), mpq(1, 10), 1), mpq(1, 10))
    assert s.state.users[0].tag == 5000 and len(s.state.users[0].queue) == 2


def test_activation_places_infinite_server_delta_above_the_rest():
    s = make()
    s.state.servers[0].level, s.state.servers[1].level = INFINITE, mpq(7000)
    s.on_arrival(Packet(0, mpq(L), mpq(0), 0), mpq(0))
    assert s.state.servers[0].level == 7000 + 2 * L
    assert s.state.users[0].tag == 9000


def test_activation_after_full_drain_restarts_at_zero():
    s = make()
    s.state.servers[0].level = s.state.servers[1].level = INFINITE
    s.state.users[0].tag = mpq(12345)
    s.on_arrival(Packet(0, mpq(L), mpq(0), 0), mpq(0))
    assert [v.level for v in s.state.servers] == [0, 0]
    assert s.state.users[0].tag == 12345


def test_activation_is_noop_when_all_levels_finite():
    s = make()
    s.activate_servers(0)
    assert [v.level for v in s.state.servers] == [0, 0]


def test_arrival_before_clock_is_rejected():
    s = make()
    s.state.clock = mpq(1)
    with pytest.raises(ValueError):
        s.on_arrival(Packet(0, mpq(L), mpq(0), 0), mpq(0))
    with pytest.raises(ValueError):
        s.on_arrival(Packet(0, mpq(L), mpq(2), 0), mpq(3))


# -- de-queue ---------------------------------------------------------------------

def test_tie_goes_to_lowest_index():
    s = make(EligibilityMatrix([[1], [1]]), rates=[1000])
    fill(s, 1)
    fill(s, 0)
    s.state.users[0].tag = s.state.users[1].tag = mpq(3)
    assert s.select_and_dispatch(0, mpq(0)).user == 0


def test_fig2_first_dispatches():
    s = make()
    for i in range(3):
        fill(s, i)
    r1 = s.select_and_dispatch(0, mpq(0))
    r2 = s.select_and_dispatch(1, mpq(0))
    assert (r1.user, r2.user) == (0, 1)
    assert r1.tag_after - r1.tag_before == L
    assert r1.completion_time == 1


def test_tag_grows_by_length_over_weight():
    s = make(EligibilityMatrix([[1]]), rates=[10], weights=[4])
    fill(s, 0, length=6)
    rec = s.select_and_dispatch(0, mpq(0))
    assert rec.tag_after - rec.tag_before == mpq(6, 4)
    assert rec.completion_time == mpq(6, 10)


def test_empty_server_goes_infinite_and_busy_server_is_rejected():
    s = make()
    assert s.select_and_dispatch(0, mpq(0)) is None
    assert s.state.servers[0].level is INFINITE
    fill(s, 2)
    s.select_and_dispatch(1, mpq(0))
    with pytest.raises(RuntimeError):
        s.select_and_dispatch(1, mpq(0))


# -- work-level update ------------------------------------------------------------

def regulation_setup(variant):
    m = EligibilityMatrix([[1, 0], [0, 1], [1, 0]])
    s = make(m, rates=[1, 1], delta=1, variant=variant)
    fill(s, 0, length=5)
    fill(s, 1, length=5)
    st = s.state
    st.users[0].tag, st.users[1].tag = mpq(10), mpq(0)
    st.users[2].tag = mpq(12)  # idle user above the threshold is shifted too
    st.servers[0].level, st.servers[1].level = mpq(10), mpq(0)
    return s


def test_gap_regulation_shifts_tags_and_levels_above_threshold():
    s = regulation_setup(Variant.FULL)
    s.select_and_dispatch(0, mpq(0))
    st = s.state
    # d = min{15} - max{0} - 1 = 14
    assert [u.tag for u in st.users] == [1, 0, -2]
    assert [u.bonus for u in st.users] == [14, 0, 14]
    assert [v.level for v in st.servers] == [1, 0]
    assert [v.bonus for v in st.servers] == [14, 0]


def test_reduced_variant_skips_regulation():
    s = regulation_setup(Variant.REDUCED)
    s.select_and_dispatch(0, mpq(0))
    st = s.state
    assert [u.tag for u in st.users] == [15, 0, 12]
    assert [v.level for v in st.servers] == [15, 0]
    assert all(u.bonus == 0 for u in st.users)


def test_sfq_variant_uses_start_tag_of_chosen_user():
    for variant, expected in ((Variant.SFQ_BASED, 0), (Variant.REDUCED, 3)):
        s = make(EligibilityMatrix([[1], [1]]), rates=[1], variant=variant)
        fill(s, 0, length=5)
        fill(s, 1, length=5)
        s.state.users[1].tag = mpq(3)
        s.select_and_dispatch(0, mpq(0))
        assert s.state.servers[0].level == expected


def test_phase_one_recomputes_every_eligible_server():
    s = make()
    fill(s, 0, count=1)
    fill(s, 2, count=2)
    s.select_and_dispatch(0, mpq(0))
    # a leaves the backlog: s1 has no one left, s2 sees only c
    assert s.state.servers[0].level is INFINITE
    assert s.state.servers[1].level == 0


@pytest.mark.parametrize("k, lmax, phi, expected", [(4, 1000, 1, 5000), (1, 1, 1, 2), (2, 1000, 4, 750)])
def test_default_delta(k, lmax, phi, expected):
    assert default_delta(k, [phi, phi + 1], lmax) == expected


def test_example6_gap_never_exceeds_delta():
    trace = run(resolve_scenario("example6"))
    assert trace.max_gap() <= 2 * L


def test_example5_full_gap_is_two_packets_and_sfq_five():
    sc = resolve_scenario("example5_sfq")
    sc.variant = Variant.FULL
    assert run(sc).max_gap() <= 2 * L
    sc.variant = Variant.SFQ_BASED
    assert run(sc).max_gap() == 5 * L


# -- trace properties on random systems ----------------------------------------

def idle_while_backlogged(trace):
    """(time, server) pairs where a free server had an eligible backlogged user after events settled."""
    sc = trace.scenario
    busy = {k: [] for k in range(sc.matrix.n_servers)}
    for rec in trace.dispatches:
        busy[rec.server].append((rec.time, rec.completion_time))
    starts = {k: [a for a, _ in v] for k, v in busy.items()}
    out = []
    for snap in trace.snapshots:
        if snap.phase != POST or snap.time >= sc.horizon:
            continue
        for k in range(sc.matrix.n_servers):
            pos = bisect_right(starts[k], snap.time) - 1
            if pos >= 0 and busy[k][pos][1] > snap.time:
                continue
            if any(i in snap.backlogged for i in sc.matrix.users_of[k]):
                out.append((snap.time, k))
    return out


@settings(max_examples=40, deadline=None)
@given(scenarios(variant="full"))
def test_full_variant_invariants(sc):
    trace = run(sc)
    assert check_tag_dominance(trace).passed
    assert all(r.passed for r in check_work_identity(trace))
    assert idle_while_backlogged(trace) == []
    failed = [r.describe() for r in steady_state_reports(trace) if not r.passed]
    for i in sorted(continuous_backlog(trace, 0, trace.horizon)):
        failed += [r.describe() for r in check_worst_case(trace, None, None, i, 0, trace.horizon) if not r.passed]
    assert failed == []


@settings(max_examples=30, deadline=None)
@given(scenarios(variant="reduced"))
def test_reduced_variant_invariants(sc):
    trace = run(sc)
    assert check_tag_dominance(trace).passed
    assert all(r.passed for r in check_work_identity(trace))
    assert idle_while_backlogged(trace) == []


def test_steady_state_single_user_single_server():
    sc = Scenario(matrix=[[1]], rates=[1000], weights=[1], sources=[[TrafficSource.backlogged(LengthLaw.fixed(10))]],
                  horizon=1)
    trace = run(sc)
    rep = check_steady_state(trace, None, 0, 0, 1)
    assert rep.passed and trace.work(0, 0, 1) == 1000
