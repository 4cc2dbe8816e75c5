"""Multi-interface deficit round robin (miDRR) baseline.

Every server runs its own deficit round robin over its eligible users.  A
binary service flag ``SF[i][j]`` per (user, server) couples the servers:
serving user ``i`` on server ``k`` raises ``SF[i][j]`` on every other server
``j``.  Whenever server ``j`` considers user ``i`` (at the start of its turn
and again before each further packet of the turn) it clears ``SF[i][j]``; a
raised flag means another server has just served the user, so the user is
skipped (or its turn ends) without a new quantum.  Flags start cleared so the
first round serves everyone.  Deficit counters are kept per (user, server),
carried across rounds and cleared when the user's queue empties, as in
classic DRR.
"""
from __future__ import annotations

from typing import Optional

from gmpy2 import mpq

from .model import Packet, SystemState, rational
from .scheduler import DispatchRecord

__all__ = ["MiDrr"]

ZERO = mpq(0)


class MiDrr:
    """Drop-in replacement for :class:`~cm4fq.scheduler.Scheduler` in the simulator.

    Dispatch records reuse the scheduler layout; ``tag_before``/``tag_after``
    hold the deficit counter of the served (user, server) pair before and
    after the packet is charged.
    """

    def __init__(self, state: SystemState, quanta):
        self.state = state
        n, k_total = state.matrix.n_users, state.matrix.n_servers
        self.quanta = [rational(q) for q in quanta]
        if len(self.quanta) != n or any(q <= 0 for q in self.quanta):
            raise ValueError("one positive quantum per user is required")
        self.deficit = [[ZERO] * k_total for _ in range(n)]
        self.flags = [[0] * k_total for _ in range(n)]
        # position in the server's round of the user currently holding the turn, -1 before the first round
        self.cursor = [-1] * k_total
        self.holding = [False] * k_total  # current user still has its turn (quantum already granted)
        self.refill = None

    def on_arrival(self, packet: Packet, t) -> list:
        state = self.state
        if t < state.clock:
            raise ValueError(f"arrival at {t} precedes clock {state.clock}")
        state.clock = t
        state.users[packet.owner].queue.append(packet)
        return [k for k in state.matrix.servers_of[packet.owner] if state.servers[k].in_service is None]

    def complete(self, k: int) -> Packet:
        server = self.state.servers[k]
        if server.in_service is None:
            raise RuntimeError(f"server {k} has nothing in service")
        packet, _ = server.in_service
        server.in_service = None
        return packet

    def _next_user(self, k: int) -> Optional[int]:
        """Advance the round of server ``k`` to the next user that may start a turn."""
        users = self.state.users
        order = self.state.matrix.users_of[k]
        # two passes: the first may only clear raised flags
        for _ in range(2 * len(order)):
            self.cursor[k] = (self.cursor[k] + 1) % len(order)
            i = order[self.cursor[k]]
            if not users[i].queue:
                self.deficit[i][k] = ZERO
                continue
            raised = self.flags[i][k]
            self.flags[i][k] = 0
            if raised:
                continue
            self.deficit[i][k] += self.quanta[i]
            return i
        return None

    def select_and_dispatch(self, k: int, t) -> Optional[DispatchRecord]:
        state = self.state
        server = state.servers[k]
        if server.in_service is not None:
            raise RuntimeError(f"server {k} is busy")
        state.clock = t
        users = state.users
        order = state.matrix.users_of[k]
        chosen = None
        if self.holding[k]:
            i = order[self.cursor[k]]
            q = users[i].queue
            if not q:
                self.deficit[i][k] = ZERO
                self.holding[k] = False
            elif self.flags[i][k]:
                self.flags[i][k] = 0
                self.holding[k] = False
            elif q[0].length <= self.deficit[i][k]:
                chosen = i
            else:
                self.holding[k] = False
        while chosen is None:
            i = self._next_user(k)
            if i is None:
                return None
            self.holding[k] = True
            if users[i].queue[0].length <= self.deficit[i][k]:
                chosen = i
            else:
                self.holding[k] = False
        user = users[chosen]
        packet = user.queue.popleft()
        if not user.queue and self.refill is not None:
            extra = self.refill(chosen, t)
            if extra is not None:
                user.queue.append(extra)
        before = self.deficit[chosen][k]
        self.deficit[chosen][k] = before - packet.length
        if not user.queue:
            self.deficit[chosen][k] = ZERO
        for j in state.matrix.servers_of[chosen]:
            if j != k:
                self.flags[chosen][j] = 1
        done = t + packet.length / server.rate
        server.in_service = (packet, done)
        levels = tuple(s.level for s in state.servers)
        return DispatchRecord(
            time=t, server=k, user=chosen, packet=packet,
            tag_before=before, tag_after=self.deficit[chosen][k],
            completion_time=done, levels_before=levels, levels_after=levels,
            server_bonus_after=tuple(s.bonus for s in state.servers),
        )
