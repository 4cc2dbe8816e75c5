"""Allocated-work statistics and runtime checks of the throughput and work-level bounds.

All quantities are exact rationals read from a :class:`~cm4fq.sim.Trace`.
Work levels equal to ``INFINITE`` never take part in a bound; a cluster whose
servers all have infinite levels at the reference instant is skipped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from gmpy2 import mpq

from .fluid import Foc, compute_foc, fair_rates
from .model import INFINITE, rational
from .scheduler import Variant
from .sim import Trace

__all__ = [
    "BoundReport",
    "HypothesisError",
    "allocated_work",
    "steady_intervals",
    "union_backlog",
    "continuous_backlog",
    "initial_offset",
    "initial_offset_upper",
    "check_steady_state",
    "check_worst_case",
    "work_level_gap",
    "check_level_gap",
    "check_isolated_cluster_bounds",
    "check_separation",
    "check_work_identity",
    "check_tag_dominance",
    "check_single_server",
    "average_rates",
    "steady_state_reports",
    "level_crossover",
    "evaluate_checks",
]

ZERO = mpq(0)


class HypothesisError(ValueError):
    """A bound was requested on an interval that does not meet its preconditions."""


@dataclass(frozen=True)
class BoundReport:
    bound: str
    t0: mpq
    t1: mpq
    scope: str
    lhs: mpq
    rhs: mpq
    relation: str  # "<=", ">=" or "=="
    passed: bool
    slack: mpq

    @classmethod
    def make(cls, bound, t0, t1, scope, lhs, rhs, relation="<=") -> "BoundReport":
        if relation == "<=":
            slack = rhs - lhs
        elif relation == ">=":
            slack = lhs - rhs
        else:
            slack = -abs(lhs - rhs)
        passed = slack >= 0 if relation != "==" else lhs == rhs
        return cls(bound, rational(t0), rational(t1), scope, lhs, rhs, relation, passed, slack)

    def __bool__(self):
        return self.passed

    def describe(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"{verdict} {self.bound} [{float(self.t0):g}, {float(self.t1):g}) {self.scope}: "
                f"{float(self.lhs):.6g} {self.relation} {float(self.rhs):.6g}")


def _worst(reports: list, bound, t0, t1, scope, relation) -> BoundReport:
    """Fold many same-kind reports into the one with the smallest slack."""
    if not reports:
        return BoundReport.make(bound, t0, t1, scope, ZERO, ZERO, relation)
    return min(reports, key=lambda r: r.slack)


# -- basic statistics ---------------------------------------------------------

def allocated_work(trace: Trace, i: int, t0, t1) -> mpq:
    """Total length of user ``i`` packets dispatched at times in ``[t0, t1)``."""
    t0, t1 = rational(t0), rational(t1)
    if t1 < t0:
        raise ValueError(f"empty interval [{t0}, {t1})")
    return trace.work(i, t0, t1)


def steady_intervals(trace: Trace) -> list:
    return trace.steady_intervals()


def union_backlog(trace: Trace, t0, t1) -> frozenset:
    out = frozenset()
    for s in trace.backlog_sets(t0, t1):
        out |= s
    return out


def continuous_backlog(trace: Trace, t0, t1) -> frozenset:
    sets = trace.backlog_sets(t0, t1)
    out = sets[0]
    for s in sets[1:]:
        out &= s
    return out


def average_rates(trace: Trace, t0, t1) -> list:
    t0, t1 = rational(t0), rational(t1)
    if t1 <= t0:
        raise ValueError(f"empty interval [{t0}, {t1})")
    n = trace.scenario.matrix.n_users
    return [trace.work(i, t0, t1) / (t1 - t0) for i in range(n)]


def _finite(values):
    return [v for v in values if v is not INFINITE]


def _cluster_min(levels, cluster):
    vals = _finite(levels[k] for k in cluster.servers)
    return min(vals) if vals else None


def _cluster_max(levels, cluster):
    vals = _finite(levels[k] for k in cluster.servers)
    return max(vals) if vals else None


def _foc(trace: Trace, backlog) -> Foc:
    sc = trace.scenario
    return compute_foc(sc.matrix, sc.rates, sc.weights, backlog)


def _lambda0(trace: Trace) -> mpq:
    sc = trace.scenario
    return sc.l_max / min(sc.weights)


# -- initial offsets --------------------------------------------------------

def initial_offset(trace: Trace, foc: Foc, i: int, t0) -> mpq:
    """Tag of ``i`` at ``t0`` above the lowest cluster work level at or above its own cluster."""
    snap = trace.state_before(t0)
    m = foc.index_of(i)
    lows = [_cluster_min(snap.levels, c) for c in foc.clusters[m:] if c.rate > 0]
    lows = [v for v in lows if v is not None]
    if not lows:
        return ZERO
    return snap.tags[i] - min(lows)


def initial_offset_upper(trace: Trace, foc: Foc, i: int, t0) -> mpq:
    """Highest cluster work level at or below the cluster of ``i`` minus its tag, plus one packet."""
    sc = trace.scenario
    snap = trace.state_before(t0)
    m = foc.index_of(i)
    highs = [_cluster_max(snap.levels, c) for c in foc.clusters[: m + 1] if c.rate > 0]
    highs = [v for v in highs if v is not None]
    top = max(highs) if highs else snap.tags[i]
    return top - snap.tags[i] + sc.l_max / sc.weights[i]


def _servers_in(foc: Foc, lo: int, hi: int) -> int:
    return sum(len(c.servers) for c in foc.clusters[lo:hi] if c.rate > 0)


# -- throughput guarantees ---------------------------------------------------

def _require_backlogged(trace, i, t0, t1):
    if i not in continuous_backlog(trace, t0, t1):
        name = trace.scenario.user_names[i]
        raise HypothesisError(f"user {name} is not continuously backlogged on [{t0}, {t1})")


def check_steady_state(trace: Trace, foc: Optional[Foc], i: int, t0, t1) -> BoundReport:
    """Distance of the normalized work from the fair share on an interval with a constant backlog."""
    t0, t1 = rational(t0), rational(t1)
    sets = trace.backlog_sets(t0, t1)
    if any(s != sets[0] for s in sets):
        raise HypothesisError(f"backlogged set changes inside [{t0}, {t1})")
    _require_backlogged(trace, i, t0, t1)
    sc = trace.scenario
    if foc is None:
        foc = _foc(trace, sets[0])
    phi = sc.weights[i]
    rate = fair_rates(foc, sc.weights)[i]
    lhs = abs(trace.work(i, t0, t1) / phi - rate * (t1 - t0) / phi)
    k_total = sc.matrix.n_servers
    rhs = k_total * _lambda0(trace) + max(
        initial_offset(trace, foc, i, t0), initial_offset_upper(trace, foc, i, t0)
    )
    return BoundReport.make("steady-state", t0, t1, f"user {sc.user_names[i]}", lhs, rhs)


def check_worst_case(trace: Trace, foc_b: Optional[Foc], foc_bt: Optional[Foc], i: int, t0, t1) -> list:
    """Lower and upper work guarantees for a user continuously backlogged on ``[t0, t1)``.

    Returns the fine lower/upper reports, the coarse two-sided report with
    offsets ``K * delta`` and the two bounds on the initial offsets.
    """
    t0, t1 = rational(t0), rational(t1)
    _require_backlogged(trace, i, t0, t1)
    sc = trace.scenario
    if foc_b is None:
        foc_b = _foc(trace, union_backlog(trace, t0, t1))
    if foc_bt is None:
        foc_bt = _foc(trace, continuous_backlog(trace, t0, t1))
    phi = sc.weights[i]
    lam = _lambda0(trace)
    scope = f"user {sc.user_names[i]}"
    norm = trace.work(i, t0, t1) / phi
    span = t1 - t0
    low_rate = fair_rates(foc_b, sc.weights)[i] / phi
    high_rate = fair_rates(foc_bt, sc.weights)[i] / phi
    m = foc_b.index_of(i)
    mt = foc_bt.index_of(i)
    d_low = initial_offset(trace, foc_b, i, t0)
    d_high = initial_offset_upper(trace, foc_bt, i, t0)
    k_total = sc.matrix.n_servers
    delta = sc.effective_delta
    coarse = k_total * delta
    cap = (k_total - 1) * delta + sc.l_max / phi
    return [
        BoundReport.make("worst-case-lower", t0, t1, scope, norm,
                         low_rate * span - d_low - lam * _servers_in(foc_b, m, len(foc_b.clusters)), ">="),
        BoundReport.make("worst-case-upper", t0, t1, scope, norm,
                         high_rate * span + d_high + lam * _servers_in(foc_bt, 0, mt + 1), "<="),
        BoundReport.make("worst-case-coarse-lower", t0, t1, scope, norm, low_rate * span - coarse, ">="),
        BoundReport.make("worst-case-coarse-upper", t0, t1, scope, norm, high_rate * span + coarse, "<="),
        BoundReport.make("initial-offset", t0, t0, scope, d_low, cap, "<="),
        BoundReport.make("initial-offset-upper", t0, t0, scope, d_high, cap, "<="),
    ]


def steady_state_reports(trace: Trace, min_length=ZERO) -> list:
    """One steady-state report per continuously backlogged user per steady interval."""
    out = []
    for t0, t1, backlog in trace.steady_intervals():
        if t1 - t0 <= min_length or not backlog:
            continue
        foc = _foc(trace, backlog)
        for i in sorted(backlog):
            out.append(check_steady_state(trace, foc, i, t0, t1))
    return out


# -- work levels --------------------------------------------------------------

def work_level_gap(trace: Trace, t) -> mpq:
    """Largest difference between finite work levels after all changes at ``t``."""
    finite = _finite(trace.levels_at(t))
    if len(finite) < 2:
        return ZERO
    return max(finite) - min(finite)


def check_level_gap(trace: Trace, bound) -> BoundReport:
    worst = trace.max_gap()
    return BoundReport.make("level-gap", ZERO, trace.horizon, "all servers", worst, rational(bound))


def check_isolated_cluster_bounds(trace: Trace, cluster, t0, t1) -> list:
    """Work and level bounds of a cluster running in isolation on ``[t0, t1)``.

    For every dispatch by a server ``k`` of the cluster at ``t0 < t < t1``:
    ``w = dV^k + dD^k`` over ``[t0, t)`` stays within ``r (t - t0) +- K lambda``
    and the level of ``k`` just after the dispatch exceeds the cluster's
    lowest level by at most ``(K + 1) lambda``.
    """
    t0, t1 = rational(t0), rational(t1)
    sc = trace.scenario
    if sc.variant is Variant.SFQ_BASED:
        raise HypothesisError("variant does not maintain the work-level definition the bounds rely on")
    sets = trace.backlog_sets(t0, t1)
    if any(s != sets[0] for s in sets):
        raise HypothesisError(f"steady backlog: backlogged set changes inside [{t0}, {t1})")
    foc = _foc(trace, sets[0])
    if (cluster.users, cluster.servers, cluster.rate) not in foc.canonical() or cluster.rate <= 0:
        raise HypothesisError("cluster: not a positive-rate cluster of the current backlogged set")
    servers = cluster.servers
    users = cluster.users
    k_c = len(servers)
    lam = sc.l_max / min(sc.weights[i] for i in users)
    if sc.variant is Variant.FULL and sc.effective_delta < (k_c + 1) * lam:
        raise HypothesisError(
            f"equal bonuses: delta {sc.effective_delta} is below (K+1) lambda = {(k_c + 1) * lam}"
        )
    start = trace.state_before(t0)
    init = {start.levels[k] for k in servers}
    if len(init) != 1 or INFINITE in init:
        raise HypothesisError("equal initial levels: cluster servers start at different work levels")
    records = trace.dispatches_between(t0, t1)
    for rec in records:
        if (rec.server in servers) != (rec.user in users):
            raise HypothesisError(
                f"isolation: server {sc.server_names[rec.server]} served user "
                f"{sc.user_names[rec.user]} at {rec.time}"
            )
    rate = cluster.rate
    v0 = start.levels
    d0 = start.server_bonuses
    bonus = list(d0)
    upper, lower, spread = [], [], []
    scope = "cluster {" + ",".join(sc.user_names[i] for i in sorted(users)) + "}"
    for rec in records:
        k = rec.server
        if rec.server in servers and rec.time > t0:
            w = rec.levels_before[k] - v0[k] + bonus[k] - d0[k]
            share = rate * (rec.time - t0)
            upper.append(BoundReport.make("cluster-work-upper", t0, rec.time, scope, w, share + k_c * lam))
            lower.append(BoundReport.make("cluster-work-lower", t0, rec.time, scope, w, share - k_c * lam, ">="))
            floor = min(_finite(rec.levels_before[l] for l in servers))
            after = rec.levels_after[k]
            if after is not INFINITE:
                spread.append(BoundReport.make("cluster-level-spread", t0, rec.time, scope,
                                               after - floor, (k_c + 1) * lam))
        bonus = list(rec.server_bonus_after)
    return [
        _worst(upper, "cluster-work-upper", t0, t1, scope, "<="),
        _worst(lower, "cluster-work-lower", t0, t1, scope, ">="),
        _worst(spread, "cluster-level-spread", t0, t1, scope, "<="),
    ]


def check_separation(trace: Trace, t0, t1) -> BoundReport:
    """No higher-cluster user reaches the slowest cluster's servers once the levels are ``delta`` apart.

    The slowest positive-rate cluster of the union backlog over ``[t0, t1)``
    must be continuously backlogged; the first instant ``t_hat`` at which the
    lowest level of every other positive cluster exceeds the slowest
    cluster's highest level by at least ``delta`` is located from the trace,
    and dispatches in ``(t_hat, t1)`` are scanned.
    """
    t0, t1 = rational(t0), rational(t1)
    sc = trace.scenario
    foc = _foc(trace, union_backlog(trace, t0, t1))
    positive = foc.positive()
    if len(positive) < 2:
        raise HypothesisError("separation needs at least two positive-rate clusters")
    slow = positive[0]
    if not slow.users <= continuous_backlog(trace, t0, t1):
        raise HypothesisError("slowest cluster is not continuously backlogged")
    delta = sc.effective_delta
    candidates = [(t0, trace.state_before(t0).levels)]
    candidates += [(t, lv) for t, lv in trace.levels if t0 <= t < t1]
    t_hat = None
    for t, levels in candidates:
        top = _cluster_max(levels, slow)
        if top is None:
            continue
        ok = True
        for c in positive[1:]:
            low = _cluster_min(levels, c)
            if low is None or low - top < delta:
                ok = False
                break
        if ok:
            t_hat = t
            break
    if t_hat is None:
        raise HypothesisError("work levels of the other clusters never reach delta above the slowest cluster")
    crossings = [
        rec for rec in trace.dispatches_between(t_hat, t1)
        if rec.time > t_hat and rec.server in slow.servers and rec.user not in slow.users
    ]
    scope = "servers {" + ",".join(sc.server_names[k] for k in sorted(slow.servers)) + "}"
    return BoundReport.make("separation", t_hat, t1, scope, mpq(len(crossings)), ZERO)


# -- per-interval identities -------------------------------------------------

def check_work_identity(trace: Trace) -> list:
    """Normalized work equals tag growth plus bonus growth on every steady interval."""
    sc = trace.scenario
    out = []
    for t0, t1, backlog in trace.steady_intervals():
        a, b = trace.state_before(t0), trace.state_before(t1)
        for i in sorted(backlog):
            lhs = trace.work(i, t0, t1) / sc.weights[i]
            rhs = b.tags[i] - a.tags[i] + b.bonuses[i] - a.bonuses[i]
            out.append(BoundReport.make("work-identity", t0, t1, f"user {sc.user_names[i]}", lhs, rhs, "=="))
    return out


def check_tag_dominance(trace: Trace) -> BoundReport:
    """Every backlogged user's tag is at least its highest eligible work level, at every recorded state."""
    sc = trace.scenario
    servers_of = sc.matrix.servers_of
    reports = []
    for snap in trace.snapshots:
        for i in snap.backlogged:
            level = max(snap.levels[k] for k in servers_of[i])
            if level is INFINITE:
                reports.append(BoundReport.make("tag-dominance", snap.time, snap.time,
                                                f"user {sc.user_names[i]}", ZERO, mpq(1), ">="))
                continue
            reports.append(BoundReport.make("tag-dominance", snap.time, snap.time,
                                            f"user {sc.user_names[i]}", snap.tags[i], level, ">="))
    return _worst(reports, "tag-dominance", ZERO, trace.horizon, "all users", ">=")


def _bounded_lead(snap, users, lmax, weights) -> bool:
    """Every listed tag is at most one packet above the server level."""
    level = snap.levels[0]
    return level is not INFINITE and all(snap.tags[i] - level <= lmax / weights[i] for i in users)


def check_single_server(trace: Trace, t0, t1) -> list:
    """Growth of a lone server's work level against the allocated work on ``[t0, t1)``.

    The lower bounds need every user continuously backlogged and every tag
    at most one packet above the level at ``t1``.  The upper bounds use the
    continuously backlogged subset; one of its users must hold the level at
    ``t0`` and each of its tags must be at most one packet above it.  Both
    premises can fail in practice: a user that holds the level and then
    leaves lets the level jump without work going to the subset, and after
    a full drain the level restarts at zero while tags are kept.  Bounds
    whose premises fail are left out; HypothesisError is raised when none
    remain.
    """
    t0, t1 = rational(t0), rational(t1)
    sc = trace.scenario
    if sc.matrix.n_servers != 1:
        raise HypothesisError("single-server bounds need exactly one server")
    cont = continuous_backlog(trace, t0, t1)
    if not cont:
        raise HypothesisError(f"no user is continuously backlogged on [{t0}, {t1})")
    a, b = trace.state_before(t0), trace.state_before(t1)
    rho = sc.rates[0]
    lmax = sc.l_max
    n = sc.matrix.n_users
    out = []
    if len(cont) == n and a.levels[0] is not INFINITE and _bounded_lead(b, range(n), lmax, sc.weights):
        growth = b.levels[0] - a.levels[0]
        phi_all = sum(sc.weights, ZERO)
        work_all = sum((trace.work(i, t0, t1) for i in range(n)), ZERO)
        out.append(BoundReport.make("single-level-lower-work", t0, t1, "server", growth,
                                    work_all / phi_all - (n - 1) * lmax / phi_all, ">="))
        out.append(BoundReport.make("single-level-lower-rate", t0, t1, "server", growth,
                                    rho * (t1 - t0) / phi_all - n * lmax / phi_all, ">="))
    anchored = a.levels[0] is not INFINITE and any(a.tags[i] == a.levels[0] for i in cont)
    if anchored and b.levels[0] is not INFINITE and _bounded_lead(a, cont, lmax, sc.weights):
        growth = b.levels[0] - a.levels[0]
        phi_c = sum((sc.weights[i] for i in cont), ZERO)
        work_c = sum((trace.work(i, t0, t1) for i in cont), ZERO)
        size = len(cont)
        out.append(BoundReport.make("single-level-upper-work", t0, t1, "server", growth,
                                    work_c / phi_c + (size - 1) * lmax / phi_c, "<="))
        out.append(BoundReport.make("single-level-upper-rate", t0, t1, "server", growth,
                                    rho * (t1 - t0) / phi_c + size * lmax / phi_c, "<="))
    if not out:
        raise HypothesisError(f"no single-server bound has its premises on [{t0}, {t1})")
    return out


# -- scenario-declared checks -------------------------------------------------

def _hypothesis_report(kind, t0, t1, message) -> BoundReport:
    return BoundReport(kind, rational(t0), rational(t1), message, ZERO, ZERO, "hypothesis", False, mpq(-1))


def level_crossover(trace: Trace, a: int, b: int, after) -> Optional[mpq]:
    """First instant after ``after`` at which finite levels satisfy ``V^a <= V^b``."""
    after = rational(after)
    for t, levels in trace.levels:
        if t <= after:
            continue
        va, vb = levels[a], levels[b]
        if va is not INFINITE and vb is not INFINITE and va <= vb:
            return t
    return None


def evaluate_checks(trace: Trace, checks) -> list:
    """Run the checks declared by a scenario document; each yields one or more reports."""
    sc = trace.scenario
    out = []
    for check in checks:
        kind = check["kind"]
        t0 = check.get("t0", ZERO)
        t1 = check.get("t1", trace.horizon)
        try:
            if kind == "steady_state":
                out.extend(steady_state_reports(trace, check.get("min_length", ZERO)))
            elif kind == "worst_case":
                out.extend(check_worst_case(trace, None, None, sc.user_index(check["user"]), t0, t1))
            elif kind == "level_gap":
                out.append(check_level_gap(trace, check["bound"]))
            elif kind == "separation":
                out.append(check_separation(trace, t0, t1))
            elif kind == "isolated_cluster":
                users = frozenset(sc.user_index(u) for u in check["users"])
                foc = _foc(trace, trace.backlog_at(t0))
                matches = [c for c in foc.clusters if c.users == users]
                if not matches:
                    raise HypothesisError("cluster: listed users do not form a cluster of the backlogged set")
                out.extend(check_isolated_cluster_bounds(trace, matches[0], t0, t1))
            elif kind == "work_identity":
                out.extend(check_work_identity(trace))
            elif kind == "tag_dominance":
                out.append(check_tag_dominance(trace))
            elif kind == "rates":
                tol = check.get("tolerance", mpq(2, 100))
                for name, expected in check["expected"].items():
                    i = sc.user_index(name)
                    measured = trace.work(i, t0, t1) / (t1 - t0)
                    err = abs(measured - expected) / expected if expected else abs(measured)
                    out.append(BoundReport.make("average-rate", t0, t1, f"user {name}", err, tol))
            elif kind == "level_crossover":
                a, b = (sc.server_index(s) for s in check["servers"])
                when = level_crossover(trace, a, b, check["after"])
                tol = check.get("tolerance", ZERO)
                if when is None:
                    raise HypothesisError("work levels never cross")
                out.append(BoundReport.make("level-crossover", check["after"], when,
                                            f"servers {check['servers'][0]},{check['servers'][1]}",
                                            abs(when - check["expected"]), tol))
            else:
                raise HypothesisError(f"unknown check {kind!r}")
        except (HypothesisError, LookupError) as exc:
            out.append(_hypothesis_report(kind, t0, t1, str(exc)))
    return out
