"""Packet scheduler for constrained multi-user multi-server max-min fair queuing.

Each user carries a service tag; a free server serves the eligible
backlogged user with the smallest tag (lowest index on ties).  Servers keep
a work level, the minimum tag among their eligible backlogged users, used to
re-tag users that return from idleness.  The FULL variant additionally caps
the gap between a server's work level and the next lower one at ``delta`` by
shifting the tags and levels above it down; the shift is accumulated as
bonus.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from gmpy2 import mpq

from .model import (
    INFINITE,
    EligibilityMatrix,
    Packet,
    SystemState,
    rational,
    respective_work_level,
)

__all__ = ["Variant", "DispatchRecord", "Scheduler", "default_delta"]

ZERO = mpq(0)


class Variant(enum.Enum):
    FULL = "full"
    REDUCED = "reduced"  # no gap regulation
    SFQ_BASED = "sfq"  # work level = start tag of the packet last chosen

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True, slots=True)
class DispatchRecord:
    time: mpq
    server: int
    user: int
    packet: Packet
    tag_before: mpq
    tag_after: mpq
    completion_time: mpq
    levels_before: tuple
    levels_after: tuple
    server_bonus_after: tuple


def default_delta(matrix, weights, l_max) -> mpq:
    """(K + 1) * L_max / min weight."""
    n_servers = matrix.n_servers if isinstance(matrix, EligibilityMatrix) else int(matrix)
    return (n_servers + 1) * rational(l_max) / min(rational(w) for w in weights)


class Scheduler:
    """Mutates a :class:`SystemState`; driven by the simulation loop.

    ``refill`` (optional) is called as ``refill(user, t)`` when a dispatch
    empties a user's queue; a returned packet is appended before the work
    levels are updated, so an always-backlogged user never leaves the
    backlogged set.
    """

    def __init__(self, state: SystemState, variant=Variant.FULL):
        self.state = state
        self.variant = Variant.parse(variant)
        self.refill: Optional[Callable[[int, mpq], Optional[Packet]]] = None
        self._bonus_snapshot = tuple(s.bonus for s in state.servers)

    # -- enqueue -----------------------------------------------------------
    def on_arrival(self, packet: Packet, t) -> list:
        state = self.state
        if t < state.clock:
            raise ValueError(f"arrival at {t} precedes clock {state.clock}")
        if packet.arrival_time != t:
            raise ValueError("packet arrival_time does not match event time")
        state.clock = t
        i = packet.owner
        user = state.users[i]
        if not user.queue:
            self.activate_servers(i)
            level = respective_work_level(state, i)
            if level > user.tag:
                user.tag = level
        user.queue.append(packet)
        servers = state.servers
        return [k for k in state.matrix.servers_of[i] if servers[k].in_service is None]

    def activate_servers(self, i: int) -> None:
        servers = self.state.servers
        finite = [s.level for s in servers if s.level is not INFINITE]
        v0 = max(finite) + self.state.delta if finite else ZERO
        for k in self.state.matrix.servers_of[i]:
            if servers[k].level is INFINITE:
                servers[k].level = v0

    # -- dequeue -----------------------------------------------------------
    def select_and_dispatch(self, k: int, t) -> Optional[DispatchRecord]:
        state = self.state
        server = state.servers[k]
        if server.in_service is not None:
            raise RuntimeError(f"server {k} is busy")
        if t < state.clock:
            raise ValueError(f"dispatch at {t} precedes clock {state.clock}")
        state.clock = t
        users = state.users
        chosen = -1
        best = None
        for i in state.matrix.users_of[k]:
            u = users[i]
            if u.queue and (best is None or u.tag < best):
                chosen, best = i, u.tag
        if chosen < 0:
            server.level = INFINITE
            return None
        levels_before = tuple(s.level for s in state.servers)
        user = users[chosen]
        packet = user.queue.popleft()
        if not user.queue and self.refill is not None:
            extra = self.refill(chosen, t)
            if extra is not None:
                user.queue.append(extra)
        tag_before = user.tag
        user.tag = tag_before + packet.length / user.weight
        self.update_v(chosen, k, tag_before)
        done = t + packet.length / server.rate
        server.in_service = (packet, done)
        bonus = tuple(s.bonus for s in state.servers)
        if bonus != self._bonus_snapshot:
            self._bonus_snapshot = bonus
        return DispatchRecord(
            time=t,
            server=k,
            user=chosen,
            packet=packet,
            tag_before=tag_before,
            tag_after=user.tag,
            completion_time=done,
            levels_before=levels_before,
            levels_after=tuple(s.level for s in state.servers),
            server_bonus_after=self._bonus_snapshot,
        )

    def complete(self, k: int) -> Packet:
        server = self.state.servers[k]
        if server.in_service is None:
            raise RuntimeError(f"server {k} has nothing in service")
        packet, _ = server.in_service
        server.in_service = None
        return packet

    def _min_tag(self, l: int):
        users = self.state.users
        best = INFINITE
        for j in self.state.matrix.users_of[l]:
            u = users[j]
            if u.queue and u.tag < best:
                best = u.tag
        return best

    def update_v(self, chosen: int, k: int, tag_before=None) -> None:
        state = self.state
        servers = state.servers
        prior = servers[k].level
        if self.variant is Variant.SFQ_BASED:
            for l in state.matrix.servers_of[chosen]:
                if l == k:
                    continue
                if self._min_tag(l) is INFINITE:
                    servers[l].level = INFINITE
            if self._min_tag(k) is INFINITE:
                servers[k].level = INFINITE
            else:
                servers[k].level = tag_before
            return
        for l in state.matrix.servers_of[chosen]:
            servers[l].level = self._min_tag(l)
        if self.variant is not Variant.FULL:
            return
        if prior is INFINITE:
            return
        below = [s.level for s in servers if s.level < prior]
        if not below:
            return
        above = [s.level for s in servers if s.level is not INFINITE and s.level >= prior]
        if not above:
            return
        d = min(above) - max(below) - state.delta
        if d <= 0:
            return
        for u in state.users:
            if u.tag >= prior:
                u.tag -= d
                u.bonus += d
        for s in servers:
            if s.level is not INFINITE and s.level >= prior:
                s.level -= d
                s.bonus += d
