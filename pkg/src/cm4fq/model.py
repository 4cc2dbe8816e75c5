"""Domain types shared by the fluid oracle, the scheduler and the simulator.

All tags, work levels, weights, rates and times are exact rationals
(``gmpy2.mpq``).  ``INFINITE`` marks the work level of a server that has no
eligible backlogged user.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Deque, Iterable, Optional, Sequence

from gmpy2 import mpq

__all__ = [
    "INFINITE",
    "WorkLevel",
    "ConfigError",
    "rational",
    "EligibilityMatrix",
    "Packet",
    "UserState",
    "ServerState",
    "SystemState",
    "backlogged_set",
    "eligible_backlogged_set",
    "respective_work_level",
]


class ConfigError(ValueError):
    """Raised for invalid system descriptions (matrix, rates, weights...)."""


class WorkLevel(enum.Enum):
    """Distinguished work-level values that are not numbers."""

    INFINITE = "inf"

    # INFINITE compares greater than every finite value.
    def __lt__(self, other):
        return False

    def __le__(self, other):
        return other is self

    def __gt__(self, other):
        return other is not self

    def __ge__(self, other):
        return True

    def __str__(self):
        return "inf"


INFINITE = WorkLevel.INFINITE


def rational(value) -> mpq:
    """Convert ints, Fractions, decimal/fraction strings and floats to mpq.

    Floats go through their shortest decimal repr so ``0.1`` means 1/10.
    """
    if isinstance(value, bool):
        raise TypeError("booleans are not rationals")
    if isinstance(value, type(mpq(0))):
        return value
    if isinstance(value, float):
        return mpq(repr(value))
    if isinstance(value, Fraction):
        return mpq(value.numerator, value.denominator)
    if isinstance(value, str):
        text = value.strip()
        if "e" in text.lower() and "/" not in text:
            return mpq(Fraction(text).numerator, Fraction(text).denominator)
        return mpq(text)
    return mpq(value)


class EligibilityMatrix:
    """Binary user x server matrix; ``allows(i, k)`` means user i may use server k."""

    __slots__ = ("n_users", "n_servers", "entries", "servers_of", "users_of")

    def __init__(self, rows: Sequence[Sequence[int]]):
        rows = [tuple(int(x) for x in row) for row in rows]
        if not rows or not rows[0]:
            raise ConfigError("eligibility matrix is empty")
        width = len(rows[0])
        for i, row in enumerate(rows):
            if len(row) != width:
                raise ConfigError(f"eligibility row {i} has {len(row)} entries, expected {width}")
            if any(x not in (0, 1) for x in row):
                raise ConfigError(f"eligibility row {i} is not binary")
            if not any(row):
                raise ConfigError(f"eligibility row {i} (user {i}) has no eligible server")
        for k in range(width):
            if not any(row[k] for row in rows):
                raise ConfigError(f"eligibility column {k} (server {k}) has no eligible user")
        self.n_users = len(rows)
        self.n_servers = width
        self.entries = tuple(rows)
        self.servers_of = tuple(
            tuple(k for k in range(width) if row[k]) for row in rows
        )
        self.users_of = tuple(
            tuple(i for i in range(len(rows)) if rows[i][k]) for k in range(width)
        )

    def allows(self, i: int, k: int) -> bool:
        return bool(self.entries[i][k])

    def permuted(self, user_perm: Sequence[int], server_perm: Sequence[int]) -> "EligibilityMatrix":
        """Row ``a`` of the result is row ``user_perm[a]`` of this matrix (same for columns)."""
        return EligibilityMatrix(
            [[self.entries[i][k] for k in server_perm] for i in user_perm]
        )

    def __eq__(self, other):
        return isinstance(other, EligibilityMatrix) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def __repr__(self):
        return f"EligibilityMatrix({[list(r) for r in self.entries]})"


@dataclass(slots=True)
class Packet:
    owner: int
    length: mpq
    arrival_time: mpq
    seq: int


@dataclass(slots=True)
class UserState:
    weight: mpq
    queue: Deque[Packet] = field(default_factory=deque)
    tag: mpq = field(default_factory=lambda: mpq(0))
    bonus: mpq = field(default_factory=lambda: mpq(0))


@dataclass(slots=True)
class ServerState:
    rate: mpq
    level: object = field(default_factory=lambda: mpq(0))  # mpq or INFINITE
    bonus: mpq = field(default_factory=lambda: mpq(0))
    in_service: Optional[tuple] = None  # (Packet, completion_time)


@dataclass(slots=True)
class SystemState:
    matrix: EligibilityMatrix
    users: list
    servers: list
    delta: mpq
    clock: mpq = field(default_factory=lambda: mpq(0))

    @classmethod
    def initial(cls, matrix: EligibilityMatrix, rates: Iterable, weights: Iterable, delta) -> "SystemState":
        rates = [rational(r) for r in rates]
        weights = [rational(w) for w in weights]
        if len(rates) != matrix.n_servers:
            raise ConfigError(f"{len(rates)} server rates for {matrix.n_servers} servers")
        if len(weights) != matrix.n_users:
            raise ConfigError(f"{len(weights)} weights for {matrix.n_users} users")
        for k, r in enumerate(rates):
            if r <= 0:
                raise ConfigError(f"server {k} rate must be positive, got {r}")
        for i, w in enumerate(weights):
            if w <= 0:
                raise ConfigError(f"user {i} weight must be positive, got {w}")
        return cls(
            matrix=matrix,
            users=[UserState(weight=w) for w in weights],
            servers=[ServerState(rate=r) for r in rates],
            delta=rational(delta),
        )


def backlogged_set(state: SystemState) -> frozenset:
    """Users with a nonempty queue; a packet in service does not count."""
    return frozenset(i for i, u in enumerate(state.users) if u.queue)


def eligible_backlogged_set(state: SystemState, k: int) -> frozenset:
    users = state.users
    return frozenset(i for i in state.matrix.users_of[k] if users[i].queue)


def respective_work_level(state: SystemState, i: int):
    """Largest work level among the servers user ``i`` is eligible for."""
    servers = state.servers
    return max(servers[k].level for k in state.matrix.servers_of[i])
