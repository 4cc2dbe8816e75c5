"""Hypothesis strategies for small random scenarios."""
from fractions import Fraction

from hypothesis import strategies as st

from cm4fq import LengthLaw, Scenario, TrafficSource


def coverage_matrix(draw, n, k):
    rows = draw(st.lists(st.lists(st.integers(0, 1), min_size=k, max_size=k), min_size=n, max_size=n))
    for i, row in enumerate(rows):
        if not any(row):
            row[i % k] = 1
    for j in range(k):
        if not any(row[j] for row in rows):
            rows[j % n][j] = 1
    return rows


@st.composite
def user_sources(draw, horizon):
    law = LengthLaw.uniform(1, draw(st.integers(1, 10)))
    kind = draw(st.sampled_from(["backlogged", "late", "bursts", "onoff"]))
    if kind == "backlogged":
        return [TrafficSource.backlogged(law)]
    if kind == "late":
        return [TrafficSource.backlogged(law, start=Fraction(draw(st.integers(1, 50)), 100) * horizon)]
    if kind == "onoff":
        a = Fraction(draw(st.integers(0, 40)), 100) * horizon
        b = a + Fraction(draw(st.integers(1, 40)), 100) * horizon
        return [TrafficSource.onoff([(a, b)], law)]
    times = draw(st.lists(st.integers(0, 90), min_size=1, max_size=6))
    lengths = draw(st.lists(st.integers(1, 10), min_size=len(times), max_size=len(times)))
    count = draw(st.integers(1, 5))
    packets = [(Fraction(t, 100) * horizon, l) for t, l in zip(times, lengths) for _ in range(count)]
    return [TrafficSource.deterministic(packets)]


@st.composite
def scenarios(draw, max_users=4, max_servers=3, variant="full", single_server=False, all_backlogged=False):
    n = draw(st.integers(1, max_users))
    k = 1 if single_server else draw(st.integers(1, max_servers))
    rows = [[1]] * n if single_server else coverage_matrix(draw, n, k)
    horizon = Fraction(2)
    rates = draw(st.lists(st.integers(50, 300), min_size=k, max_size=k))
    weights = draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))
    if all_backlogged:
        sources = [[TrafficSource.backlogged(LengthLaw.uniform(1, draw(st.integers(1, 10))))] for _ in range(n)]
    else:
        sources = [draw(user_sources(horizon)) for _ in range(n)]
    return Scenario(matrix=rows, rates=rates, weights=weights, sources=sources, horizon=horizon,
                    variant=variant, seed=draw(st.integers(0, 1000)), l_max=10)
