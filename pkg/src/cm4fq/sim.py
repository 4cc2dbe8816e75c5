"""Deterministic discrete-event simulation of a scheduler over a scenario.

Events at equal timestamps are processed as: all arrivals (by user index),
then all service completions, then every free server attempts a dispatch in
server-index order.

State is observed at two phases of an event instant ``t``: ``pre`` (after
the arrivals at ``t``, before any dispatch at ``t``) and ``post`` (after all
events at ``t``).  An interval ``[t0, t1)`` starts at ``pre(t0)`` and ends at
``pre(t1)``; the allocated work over it counts packets dispatched at times
``t0 <= t < t1``.
"""
from __future__ import annotations

import bisect
import enum
import heapq
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Optional

from gmpy2 import mpq

from .model import INFINITE, ConfigError, EligibilityMatrix, Packet, SystemState, rational
from .scheduler import DispatchRecord, Scheduler, Variant, default_delta

log = logging.getLogger(__name__)

__all__ = [
    "LengthLaw",
    "SourceKind",
    "TrafficSource",
    "Scenario",
    "Snapshot",
    "Trace",
    "run",
    "fluid_approx",
    "PRE",
    "POST",
]

PRE, POST = "pre", "post"
_PHASE = {PRE: 0, POST: 1}


@dataclass(frozen=True)
class LengthLaw:
    """Packet length distribution: ``fixed``, ``uniform`` (integers lo..hi) or ``cycle``."""

    kind: str
    values: tuple

    @classmethod
    def fixed(cls, length) -> "LengthLaw":
        return cls("fixed", (rational(length),))

    @classmethod
    def uniform(cls, lo, hi) -> "LengthLaw":
        lo, hi = int(lo), int(hi)
        if not 0 < lo <= hi:
            raise ConfigError(f"uniform length law needs 0 < lo <= hi, got [{lo}, {hi}]")
        return cls("uniform", (mpq(lo), mpq(hi)))

    @classmethod
    def cycle(cls, lengths) -> "LengthLaw":
        values = tuple(rational(x) for x in lengths)
        if not values:
            raise ConfigError("cycle length law needs at least one length")
        return cls("cycle", values)

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "cycle"):
            raise ConfigError(f"unknown length law {self.kind!r}")
        if any(v <= 0 for v in self.values):
            raise ConfigError("packet lengths must be positive")

    @property
    def maximum(self) -> mpq:
        return max(self.values)

    @property
    def mean(self) -> mpq:
        if self.kind == "uniform":
            return (self.values[0] + self.values[1]) / 2
        return sum(self.values, mpq(0)) / len(self.values)


class SourceKind(enum.Enum):
    BACKLOGGED = "backlogged"
    DETERMINISTIC = "deterministic"
    IID = "iid"
    ONOFF = "onoff"


@dataclass(frozen=True)
class TrafficSource:
    """One traffic component of a user.

    ``BACKLOGGED`` keeps the queue nonempty from ``start`` on; ``ONOFF`` does
    the same inside each ``[start, end)`` interval; ``DETERMINISTIC`` injects
    the listed ``(time, length)`` packets; ``IID`` is a Poisson packet stream
    of ``rate`` packets per second.
    """

    kind: SourceKind
    law: Optional[LengthLaw] = None
    arrivals: tuple = ()
    rate: Optional[mpq] = None
    intervals: tuple = ()
    start: mpq = mpq(0)

    @classmethod
    def backlogged(cls, law: LengthLaw, start=0) -> "TrafficSource":
        return cls(SourceKind.BACKLOGGED, law=law, start=rational(start))

    @classmethod
    def deterministic(cls, arrivals) -> "TrafficSource":
        items = tuple(sorted((rational(t), rational(l)) for t, l in arrivals))
        return cls(SourceKind.DETERMINISTIC, arrivals=items)

    @classmethod
    def iid(cls, rate, law: LengthLaw, start=0) -> "TrafficSource":
        return cls(SourceKind.IID, law=law, rate=rational(rate), start=rational(start))

    @classmethod
    def onoff(cls, intervals, law: LengthLaw) -> "TrafficSource":
        items = tuple(
            (rational(a), None if b is None else rational(b)) for a, b in intervals
        )
        return cls(SourceKind.ONOFF, law=law, intervals=items)

    def validate(self) -> None:
        kind = self.kind
        if kind in (SourceKind.BACKLOGGED, SourceKind.IID, SourceKind.ONOFF) and self.law is None:
            raise ConfigError(f"{kind.value} source needs a length law")
        if kind is SourceKind.DETERMINISTIC:
            for t, length in self.arrivals:
                if t < 0 or length <= 0:
                    raise ConfigError(f"bad deterministic arrival ({t}, {length})")
        if kind is SourceKind.IID and (self.rate is None or self.rate <= 0):
            raise ConfigError("iid source needs a positive packet rate")
        if kind is SourceKind.ONOFF:
            if not self.intervals:
                raise ConfigError("onoff source needs at least one interval")
            for a, b in self.intervals:
                if a < 0 or (b is not None and b <= a):
                    raise ConfigError(f"bad on-interval [{a}, {b})")
        if self.start < 0:
            raise ConfigError("source start must be non-negative")

    @property
    def max_length(self) -> mpq:
        if self.kind is SourceKind.DETERMINISTIC:
            return max((l for _, l in self.arrivals), default=mpq(0))
        return self.law.maximum

    def refills_at(self, t) -> bool:
        if self.kind is SourceKind.BACKLOGGED:
            return t >= self.start
        if self.kind is SourceKind.ONOFF:
            return any(a <= t and (b is None or t < b) for a, b in self.intervals)
        return False


@dataclass
class Scenario:
    matrix: EligibilityMatrix
    rates: list
    weights: list
    sources: list  # per user: list of TrafficSource
    horizon: mpq
    delta: Optional[mpq] = None
    variant: Variant = Variant.FULL
    seed: int = 0
    sample_period: Optional[mpq] = None
    snapshots: str = "event"  # "event" keeps every pre/post state, "sample" only boundaries/ticks
    l_max: Optional[mpq] = None
    name: str = "scenario"
    description: str = ""
    user_names: Optional[list] = None
    server_names: Optional[list] = None
    quanta: Optional[list] = None  # miDRR quantum per user
    backlogged: Optional[list] = None  # designated set for the oracle
    checks: list = field(default_factory=list)
    fluid_packet_length: Optional[mpq] = None  # run on the fluid approximation with this packet length

    def __post_init__(self):
        if not isinstance(self.matrix, EligibilityMatrix):
            self.matrix = EligibilityMatrix(self.matrix)
        self.rates = [rational(r) for r in self.rates]
        self.weights = [rational(w) for w in self.weights]
        self.horizon = rational(self.horizon)
        self.variant = Variant.parse(self.variant)
        if self.delta is not None:
            self.delta = rational(self.delta)
        if self.sample_period is not None:
            self.sample_period = rational(self.sample_period)
        if self.l_max is not None:
            self.l_max = rational(self.l_max)
        if self.fluid_packet_length is not None:
            self.fluid_packet_length = rational(self.fluid_packet_length)
        n, k = self.matrix.n_users, self.matrix.n_servers
        if self.user_names is None:
            self.user_names = [_default_name(i) for i in range(n)]
        if self.server_names is None:
            self.server_names = [f"s{j + 1}" for j in range(k)]
        self.validate()

    def validate(self) -> None:
        n, k = self.matrix.n_users, self.matrix.n_servers
        if len(self.rates) != k:
            raise ConfigError(f"{len(self.rates)} server rates for {k} servers")
        if len(self.weights) != n:
            raise ConfigError(f"{len(self.weights)} weights for {n} users")
        for idx, r in enumerate(self.rates):
            if r <= 0:
                raise ConfigError(f"server {self.server_names[idx]} rate must be positive")
        for idx, w in enumerate(self.weights):
            if w <= 0:
                raise ConfigError(f"user {self.user_names[idx]} weight must be positive")
        if len(self.sources) != n:
            raise ConfigError(f"{len(self.sources)} source lists for {n} users")
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        if self.sample_period is not None and self.sample_period <= 0:
            raise ConfigError("sample_period must be positive")
        if self.snapshots not in ("event", "sample"):
            raise ConfigError(f"snapshots must be 'event' or 'sample', got {self.snapshots!r}")
        if len(self.user_names) != n or len(set(self.user_names)) != n:
            raise ConfigError("user names must be unique, one per user")
        if len(self.server_names) != k or len(set(self.server_names)) != k:
            raise ConfigError("server names must be unique, one per server")
        longest = mpq(0)
        for user_sources in self.sources:
            for src in user_sources:
                src.validate()
                longest = max(longest, src.max_length)
        if self.l_max is None:
            self.l_max = longest if longest > 0 else mpq(1)
        elif longest > self.l_max:
            raise ConfigError(f"packet length {longest} exceeds l_max {self.l_max}")
        if self.delta is not None and self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.quanta is not None:
            self.quanta = [rational(q) for q in self.quanta]
            if len(self.quanta) != n or any(q <= 0 for q in self.quanta):
                raise ConfigError("quanta must give one positive value per user")

    @property
    def effective_delta(self) -> mpq:
        if self.delta is not None:
            return self.delta
        return default_delta(self.matrix, self.weights, self.l_max)

    @property
    def lambda0(self) -> mpq:
        return self.l_max / min(self.weights)

    def user_index(self, ident) -> int:
        if isinstance(ident, int):
            if not 0 <= ident < self.matrix.n_users:
                raise ConfigError(f"no user with index {ident}")
            return ident
        text = str(ident)
        if text in self.user_names:
            return self.user_names.index(text)
        if text.isdigit():
            return self.user_index(int(text))
        raise ConfigError(f"unknown user {ident!r}")

    def server_index(self, ident) -> int:
        if isinstance(ident, int):
            if not 0 <= ident < self.matrix.n_servers:
                raise ConfigError(f"no server with index {ident}")
            return ident
        text = str(ident)
        if text in self.server_names:
            return self.server_names.index(text)
        if text.isdigit():
            return self.server_index(int(text))
        raise ConfigError(f"unknown server {ident!r}")


def _default_name(i: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return letters[i] if i < 26 else f"u{i}"


@dataclass(frozen=True, slots=True)
class Snapshot:
    time: mpq
    phase: str
    tags: tuple
    bonuses: tuple
    levels: tuple
    server_bonuses: tuple
    work: tuple  # cumulative allocated work per user since t = 0
    backlogged: frozenset

    @property
    def key(self):
        return (self.time, _PHASE[self.phase])


class Trace:
    """Everything recorded during one run."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.horizon = scenario.horizon
        self.dispatches: list = []
        self.levels: list = []  # (time, levels tuple) after every change of any work level
        self.snapshots: list = []
        self.backlog: list = []  # (time, phase, frozenset) whenever the backlogged set changes
        self._dispatch_times: list = []
        self._snapshot_keys: list = []
        self._per_user = None

    # -- recording --------------------------------------------------------
    def _add_snapshot(self, snap: Snapshot) -> None:
        key = snap.key
        if self._snapshot_keys and self._snapshot_keys[-1] == key:
            self.snapshots[-1] = snap
            return
        self.snapshots.append(snap)
        self._snapshot_keys.append(key)

    def _add_dispatch(self, rec: DispatchRecord) -> None:
        self.dispatches.append(rec)
        self._dispatch_times.append(rec.time)

    # -- queries ----------------------------------------------------------
    def _user_series(self):
        if self._per_user is None:
            n = self.scenario.matrix.n_users
            times = [[] for _ in range(n)]
            cum = [[mpq(0)] for _ in range(n)]
            for rec in self.dispatches:
                times[rec.user].append(rec.time)
                cum[rec.user].append(cum[rec.user][-1] + rec.packet.length)
            self._per_user = (times, cum)
        return self._per_user

    def work(self, i: int, t0, t1, include_start: bool = True) -> mpq:
        """Total length of user ``i`` packets dispatched in ``[t0, t1)``."""
        times, cum = self._user_series()
        lo = (bisect.bisect_left if include_start else bisect.bisect_right)(times[i], t0)
        hi = bisect.bisect_left(times[i], t1)
        if hi <= lo:
            return mpq(0)
        return cum[i][hi] - cum[i][lo]

    def dispatches_between(self, t0, t1) -> list:
        lo = bisect.bisect_left(self._dispatch_times, t0)
        hi = bisect.bisect_left(self._dispatch_times, t1)
        return self.dispatches[lo:hi]

    def state_before(self, t) -> Snapshot:
        """State at instant ``t`` (pre phase)."""
        return self._lookup((rational(t), 0))

    def state_after(self, t) -> Snapshot:
        """State once every event at ``t`` has been processed."""
        return self._lookup((rational(t), 1))

    def _lookup(self, key) -> Snapshot:
        pos = bisect.bisect_right(self._snapshot_keys, key) - 1
        if pos < 0:
            raise LookupError(f"no recorded state at or before {key[0]}")
        snap = self.snapshots[pos]
        if snap.key != key:
            # exact only if nothing changed between the snapshot and the query
            lo_t = snap.time
            for times in (self._dispatch_times, [t for t, _ in self.levels]):
                a = bisect.bisect_right(times, lo_t) if snap.phase == POST else bisect.bisect_left(times, lo_t)
                b = bisect.bisect_right(times, key[0]) if key[1] == 1 else bisect.bisect_left(times, key[0])
                if b > a:
                    raise LookupError(
                        f"state at {key[0]} was not recorded (use snapshots='event' or query a boundary)"
                    )
            if self.backlog_at(key[0], PRE if key[1] == 0 else POST) != snap.backlogged:
                raise LookupError(f"state at {key[0]} was not recorded")
        return snap

    def levels_at(self, t) -> tuple:
        """Work levels after all changes at times ``<= t``."""
        times = [x for x, _ in self.levels]
        pos = bisect.bisect_right(times, rational(t)) - 1
        if pos < 0:
            return tuple(mpq(0) for _ in range(self.scenario.matrix.n_servers))
        return self.levels[pos][1]

    def backlog_at(self, t, phase: str = PRE) -> frozenset:
        key = (rational(t), _PHASE[phase])
        current = frozenset()
        for time, ph, s in self.backlog:
            if (time, _PHASE[ph]) <= key:
                current = s
            else:
                break
        return current

    def backlog_sets(self, t0, t1) -> list:
        """Backlogged sets in effect at some instant of ``[t0, t1)``."""
        t0, t1 = rational(t0), rational(t1)
        out = [self.backlog_at(t0, PRE)]
        for time, ph, s in self.backlog:
            if (time, _PHASE[ph]) > (t0, 0) and (time, _PHASE[ph]) < (t1, 0):
                out.append(s)
        return out

    def steady_intervals(self) -> list:
        """Maximal ``(t0, t1, B)`` intervals over which the backlogged set is constant."""
        out = []
        entries = self.backlog
        for idx, (time, ph, s) in enumerate(entries):
            if ph != PRE:
                continue
            end = entries[idx + 1][0] if idx + 1 < len(entries) else self.horizon
            if end <= time:
                continue
            if out and out[-1][2] == s and out[-1][1] == time:
                out[-1] = (out[-1][0], end, s)
            else:
                out.append((time, end, s))
        return out

    def busy_time(self, k: int, t1=None) -> mpq:
        t1 = self.horizon if t1 is None else rational(t1)
        total = mpq(0)
        for rec in self.dispatches:
            if rec.server == k and rec.time < t1:
                total += min(rec.completion_time, t1) - rec.time
        return total

    def max_gap(self) -> mpq:
        worst = mpq(0)
        for _, levels in self.levels:
            worst = max(worst, _gap(levels))
        return worst


def _gap(levels) -> mpq:
    finite = [v for v in levels if v is not INFINITE]
    if len(finite) < 2:
        return mpq(0)
    return max(finite) - min(finite)


class _SourceRuntime:
    __slots__ = ("user", "source", "rng", "cursor")

    def __init__(self, user: int, index: int, source: TrafficSource, seed: int):
        self.user = user
        self.source = source
        self.rng = random.Random(f"{seed}/{user}/{index}")
        self.cursor = 0

    def draw(self) -> mpq:
        law = self.source.law
        if law.kind == "fixed":
            return law.values[0]
        if law.kind == "uniform":
            return mpq(self.rng.randint(int(law.values[0]), int(law.values[1])))
        value = law.values[self.cursor % len(law.values)]
        self.cursor += 1
        return value

    def gap(self) -> mpq:
        # exponential inter-arrival rounded to the nanosecond
        x = self.rng.expovariate(float(self.source.rate))
        return mpq(int(round(x * 1e9)), 10**9)


def make_state(scenario: Scenario) -> SystemState:
    return SystemState.initial(scenario.matrix, scenario.rates, scenario.weights, scenario.effective_delta)


def run(scenario: Scenario, scheduler=None) -> Trace:
    """Simulate ``scenario`` up to its horizon and return the trace.

    ``scheduler`` defaults to the packet scheduler for ``scenario.variant``;
    any object with the same ``state``/``refill``/``on_arrival``/
    ``select_and_dispatch``/``complete`` surface can be driven.
    """
    if scheduler is None:
        scheduler = Scheduler(make_state(scenario), scenario.variant)
    state = scheduler.state
    trace = Trace(scenario)
    n, n_servers = scenario.matrix.n_users, scenario.matrix.n_servers
    horizon = scenario.horizon
    users, servers = state.users, state.servers
    work = [mpq(0)] * n
    seqs = [0] * n
    runtimes = [
        [_SourceRuntime(i, j, src, scenario.seed) for j, src in enumerate(scenario.sources[i])]
        for i in range(n)
    ]
    heap = []
    counter = 0

    def push(t, cls, idx, payload):
        nonlocal counter
        heapq.heappush(heap, (t, cls, idx, counter, payload))
        counter += 1

    def new_packet(i, length, t):
        seqs[i] += 1
        return Packet(owner=i, length=length, arrival_time=t, seq=seqs[i])

    for i in range(n):
        for rt in runtimes[i]:
            src = rt.source
            if src.kind is SourceKind.DETERMINISTIC:
                for t, length in src.arrivals:
                    push(t, 0, i, (rt, length))
            elif src.kind is SourceKind.BACKLOGGED:
                push(src.start, 0, i, (rt, None))
            elif src.kind is SourceKind.ONOFF:
                for a, _ in src.intervals:
                    push(a, 0, i, (rt, None))
            else:
                push(src.start + rt.gap(), 0, i, (rt, None))

    def refill(i, t):
        for rt in runtimes[i]:
            if rt.source.refills_at(t):
                return new_packet(i, rt.draw(), t)
        return None

    scheduler.refill = refill
    every_event = scenario.snapshots == "event"
    period = scenario.sample_period
    next_tick = mpq(0) if period is not None else None
    last_levels = tuple(s.level for s in servers)
    last_backlog = frozenset()
    marker_pending = False
    started = False
    # earliest time from which a user is refilled forever (None if never)
    forever = []
    for i in range(n):
        starts = [rt.source.start for rt in runtimes[i] if rt.source.kind is SourceKind.BACKLOGGED]
        forever.append(min(starts) if starts else None)

    def capture(t, phase, backlog):
        return Snapshot(
            t, phase,
            tuple([u.tag for u in users]), tuple([u.bonus for u in users]),
            tuple([s.level for s in servers]), tuple([s.bonus for s in servers]),
            tuple(work), backlog,
        )

    def note_levels(t):
        nonlocal last_levels
        levels = tuple([s.level for s in servers])
        if levels != last_levels:
            trace.levels.append((t, levels))
            last_levels = levels

    def emit_ticks(until):
        # the live state still equals the state after the previous batch
        nonlocal next_tick
        if next_tick is None or not started:
            return
        while next_tick < until and next_tick < horizon:
            trace._add_snapshot(capture(next_tick, POST, last_backlog))
            next_tick += period

    def may_drain(backlog, t):
        for i in backlog:
            if len(users[i].queue) == 1:
                start = forever[i]
                if start is None or start > t:
                    return True
        return False

    while heap and heap[0][0] < horizon:
        t = heap[0][0]
        emit_ticks(t)
        started = True
        arrivals, completions = [], []
        while heap and heap[0][0] == t:
            item = heapq.heappop(heap)
            (arrivals if item[1] == 0 else completions).append(item)
        for _, _, i, _, (rt, length) in arrivals:
            if length is None:
                if rt.source.kind is SourceKind.IID:
                    push(t + rt.gap(), 0, i, (rt, None))
                length = rt.draw()
            scheduler.on_arrival(new_packet(i, length, t), t)
        note_levels(t)
        b_pre = frozenset([i for i in range(n) if users[i].queue])
        pre_boundary = b_pre != last_backlog or marker_pending
        pre = None
        if (every_event and arrivals) or pre_boundary or may_drain(b_pre, t):
            pre = capture(t, PRE, b_pre)
        for _, _, k, _, _ in completions:
            scheduler.complete(k)
        for k in range(n_servers):
            if servers[k].in_service is None:
                rec = scheduler.select_and_dispatch(k, t)
                if rec is not None:
                    work[rec.user] += rec.packet.length
                    trace._add_dispatch(rec)
                    push(rec.completion_time, 1, k, None)
                note_levels(t)
        b_post = frozenset([i for i in range(n) if users[i].queue])
        if pre_boundary:
            trace.backlog.append((t, PRE, b_pre))
        marker_pending = False
        post_boundary = b_post != b_pre
        if post_boundary:
            trace.backlog.append((t, POST, b_post))
            marker_pending = True
        last_backlog = b_post
        if pre is not None and (every_event or pre_boundary or post_boundary):
            trace._add_snapshot(pre)
        if every_event or pre_boundary or post_boundary:
            trace._add_snapshot(capture(t, POST, b_post))
        log.debug("t=%s backlog=%s", t, sorted(b_post))

    emit_ticks(horizon)
    if horizon > 0 or not trace.snapshots:
        trace._add_snapshot(capture(horizon, PRE, last_backlog))
    trace.backlog.append((horizon, PRE, last_backlog))
    return trace


def fluid_approx(scenario: Scenario, eps) -> Scenario:
    """Same scenario with every packet replaced by a train of ``eps``-length packets."""
    eps = rational(eps)
    if eps <= 0:
        raise ConfigError("packet length eps must be positive")
    new_sources = []
    for user_sources in scenario.sources:
        out = []
        for src in user_sources:
            if src.kind is SourceKind.DETERMINISTIC:
                arrivals = []
                for t, length in src.arrivals:
                    whole = int(length // eps)
                    arrivals.extend((t, eps) for _ in range(whole))
                    rest = length - whole * eps
                    if rest > 0:
                        arrivals.append((t, rest))
                out.append(TrafficSource.deterministic(arrivals))
            elif src.kind is SourceKind.IID:
                out.append(replace(src, law=LengthLaw.fixed(eps), rate=src.rate * src.law.mean / eps))
            else:
                out.append(replace(src, law=LengthLaw.fixed(eps)))
        new_sources.append(out)
    delta = None
    if scenario.delta is not None:
        delta = scenario.delta * eps / scenario.l_max
    return replace(scenario, sources=new_sources, l_max=eps, delta=delta,
                   fluid_packet_length=None, name=scenario.name)
