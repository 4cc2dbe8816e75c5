"""Fluid-flow max-min fairness under eligibility constraints.

``compute_foc`` partitions users and servers into clusters of equal
normalized fair rate by repeatedly extracting the bottleneck server subset
(the subset minimising capacity over the weight of the users confined to it).
``witness_allocation`` realises the fair rates as a user x server rate matrix
and ``verify_cm4_fairness`` checks any rate matrix against the pairwise
max-min condition.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from gmpy2 import mpq

from .model import ConfigError, EligibilityMatrix, rational

__all__ = [
    "Cluster",
    "Foc",
    "FairnessReport",
    "compute_foc",
    "fair_rates",
    "witness_allocation",
    "verify_cm4_fairness",
    "max_flow",
]

ZERO = mpq(0)


@dataclass(frozen=True)
class Cluster:
    users: frozenset
    servers: frozenset
    rate: mpq  # normalized (per unit weight)


@dataclass(frozen=True)
class Foc:
    """Clusters ordered by strictly increasing normalized rate."""

    clusters: tuple

    def index_of(self, user: int) -> int:
        for m, c in enumerate(self.clusters):
            if user in c.users:
                return m
        raise KeyError(user)

    def cluster_of(self, user: int) -> Cluster:
        return self.clusters[self.index_of(user)]

    def server_cluster(self, server: int) -> int:
        for m, c in enumerate(self.clusters):
            if server in c.servers:
                return m
        raise KeyError(server)

    def positive(self) -> tuple:
        return tuple(c for c in self.clusters if c.rate > 0)

    def canonical(self) -> frozenset:
        return frozenset((c.users, c.servers, c.rate) for c in self.clusters)

    def relabeled(self, user_map: Sequence[int], server_map: Sequence[int]) -> "Foc":
        return Foc(tuple(
            Cluster(frozenset(user_map[i] for i in c.users),
                    frozenset(server_map[k] for k in c.servers), c.rate)
            for c in self.clusters
        ))

    def problems(self, matrix: EligibilityMatrix) -> list:
        """Invariant violations (empty list when the clustering is well formed)."""
        out = []
        users = [i for c in self.clusters for i in c.users]
        servers = [k for c in self.clusters for k in c.servers]
        if sorted(users) != list(range(matrix.n_users)):
            out.append("clusters do not partition the users")
        if sorted(servers) != list(range(matrix.n_servers)):
            out.append("clusters do not partition the servers")
        rates = [c.rate for c in self.clusters]
        if any(a >= b for a, b in zip(rates, rates[1:])):
            out.append("cluster rates are not strictly increasing")
        for m, c in enumerate(self.clusters):
            if not c.users:
                out.append(f"cluster {m} has no users")
            if c.rate > 0 and not c.servers:
                out.append(f"cluster {m} has positive rate but no servers")
            if c.rate <= 0:
                continue
            for j in c.users:
                for k in matrix.servers_of[j]:
                    l = self.server_cluster(k)
                    if l != m and not self.clusters[l].rate < c.rate:
                        out.append(
                            f"user {j} (cluster {m}) eligible on server {k} of "
                            f"cluster {l} with rate >= its own"
                        )
        return out


def _check_inputs(matrix, rates, weights):
    if not isinstance(matrix, EligibilityMatrix):
        matrix = EligibilityMatrix(matrix)
    rates = [rational(r) for r in rates]
    weights = [rational(w) for w in weights]
    if len(rates) != matrix.n_servers or len(weights) != matrix.n_users:
        raise ConfigError("rates/weights do not match the eligibility matrix shape")
    if any(r <= 0 for r in rates):
        raise ConfigError("server rates must be positive")
    if any(w <= 0 for w in weights):
        raise ConfigError("user weights must be positive")
    return matrix, rates, weights


def compute_foc(matrix, rates, weights, backlogged: Iterable[int]) -> Foc:
    matrix, rates, weights = _check_inputs(matrix, rates, weights)
    backlogged = frozenset(backlogged)
    n, k_total = matrix.n_users, matrix.n_servers
    if not backlogged <= frozenset(range(n)):
        raise ConfigError(f"unknown users in backlogged set: {sorted(backlogged - set(range(n)))}")

    user_mask = [sum(1 << k for k in matrix.servers_of[i]) for i in range(n)]
    served = 0
    for i in backlogged:
        served |= user_mask[i]
    idle_users = frozenset(range(n)) - backlogged
    idle_servers = frozenset(k for k in range(k_total) if not served >> k & 1)

    clusters = []
    remaining_users = set(backlogged)
    remaining = served
    while remaining_users:
        members = [k for k in range(k_total) if remaining >> k & 1]
        best = None
        best_union = 0
        # enumerate nonempty subsets of the remaining servers as bitmasks
        r = len(members)
        cap = [ZERO] * (1 << r)
        for sub in range(1, 1 << r):
            low = sub & -sub
            cap[sub] = cap[sub ^ low] + rates[members[low.bit_length() - 1]]
        local = {}
        for i in remaining_users:
            bits = 0
            for b, k in enumerate(members):
                if user_mask[i] >> k & 1:
                    bits |= 1 << b
            local[i] = bits
        for sub in range(1, 1 << r):
            wsum = ZERO
            for i, bits in local.items():
                if bits & ~sub == 0:
                    wsum += weights[i]
            if wsum == 0:
                continue
            ratio = cap[sub] / wsum
            if best is None or ratio < best:
                best, best_union = ratio, sub
            elif ratio == best:
                best_union |= sub
        users = frozenset(i for i, bits in local.items() if bits & ~best_union == 0)
        servers = frozenset(members[b] for b in range(r) if best_union >> b & 1)
        clusters.append(Cluster(users, servers, best))
        remaining_users -= users
        for k in servers:
            remaining &= ~(1 << k)
    leftover = frozenset(k for k in range(k_total) if remaining >> k & 1)
    zero_servers = idle_servers | leftover
    if idle_users or zero_servers:
        clusters.insert(0, Cluster(idle_users, zero_servers, ZERO))
    return Foc(tuple(clusters))


def fair_rates(foc: Foc, weights) -> list:
    weights = [rational(w) for w in weights]
    out = [ZERO] * len(weights)
    for c in foc.clusters:
        for i in c.users:
            out[i] = weights[i] * c.rate
    return out


def max_flow(n_nodes: int, edges, source: int, sink: int):
    """Edmonds-Karp over exact capacities.

    ``edges`` is a list of ``(u, v, capacity)``; returns ``(value, flows)``
    with ``flows[e]`` the flow on ``edges[e]``.
    """
    adj = [[] for _ in range(n_nodes)]
    to, cap = [], []
    for u, v, c in edges:
        adj[u].append(len(to)); to.append(v); cap.append(c)
        adj[v].append(len(to)); to.append(u); cap.append(ZERO)
    total = ZERO
    while True:
        parent = [-1] * n_nodes
        parent[source] = -2
        queue = deque([source])
        while queue and parent[sink] == -1:
            u = queue.popleft()
            for e in adj[u]:
                if cap[e] > 0 and parent[to[e]] == -1:
                    parent[to[e]] = e
                    queue.append(to[e])
        if parent[sink] == -1:
            break
        push = None
        v = sink
        while v != source:
            e = parent[v]
            push = cap[e] if push is None or cap[e] < push else push
            v = to[e ^ 1]
        v = sink
        while v != source:
            e = parent[v]
            cap[e] -= push
            cap[e ^ 1] += push
            v = to[e ^ 1]
        total += push
    flows = [cap[2 * e + 1] for e in range(len(edges))]
    return total, flows


def witness_allocation(foc: Foc, matrix, rates, weights) -> list:
    """One rate matrix realising the fair rates, serving users only inside their cluster."""
    matrix, rates, weights = _check_inputs(matrix, rates, weights)
    n, k_total = matrix.n_users, matrix.n_servers
    alloc = [[ZERO] * k_total for _ in range(n)]
    for c in foc.clusters:
        if c.rate == 0:
            continue
        users, servers = sorted(c.users), sorted(c.servers)
        src, snk = 0, 1 + len(users) + len(servers)
        unode = {i: 1 + a for a, i in enumerate(users)}
        snode = {k: 1 + len(users) + b for b, k in enumerate(servers)}
        big = sum(rates[k] for k in servers) + 1
        edges, pairs = [], []
        for i in users:
            edges.append((src, unode[i], weights[i] * c.rate))
        for i in users:
            for k in matrix.servers_of[i]:
                if k in snode:
                    pairs.append((len(edges), i, k))
                    edges.append((unode[i], snode[k], big))
        for k in servers:
            edges.append((snode[k], snk, rates[k]))
        value, flows = max_flow(snk + 1, edges, src, snk)
        need = sum(rates[k] for k in servers)
        if value != need or value != sum(weights[i] * c.rate for i in users):
            raise RuntimeError(f"cluster {sorted(c.users)} is not feasible: flow {value}, capacity {need}")
        for e, i, k in pairs:
            alloc[i][k] = flows[e]
    return alloc


@dataclass
class FairnessReport:
    ok: bool
    well_formed: bool
    invariant_violations: list = field(default_factory=list)
    fairness_violations: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def verify_cm4_fairness(matrix, rates, weights, backlogged, candidate) -> FairnessReport:
    matrix, rates, weights = _check_inputs(matrix, rates, weights)
    backlogged = frozenset(backlogged)
    n, k_total = matrix.n_users, matrix.n_servers
    bad = []
    if len(candidate) != n or any(len(row) != k_total for row in candidate):
        return FairnessReport(False, False, ["rate matrix has the wrong shape"])
    r = [[rational(x) for x in row] for row in candidate]
    for i in range(n):
        for k in range(k_total):
            if r[i][k] < 0:
                bad.append(f"negative rate r[{i}][{k}]")
            elif r[i][k] > 0 and i not in backlogged:
                bad.append(f"idle user {i} receives rate on server {k}")
            elif r[i][k] > 0 and not matrix.allows(i, k):
                bad.append(f"user {i} served by ineligible server {k}")
    for k in range(k_total):
        total = sum((r[i][k] for i in range(n)), ZERO)
        busy = any(i in backlogged for i in matrix.users_of[k])
        if busy and total != rates[k]:
            bad.append(f"server {k} allocates {total}, capacity {rates[k]}")
        elif not busy and total != 0:
            bad.append(f"server {k} without backlogged users allocates {total}")
    if bad:
        return FairnessReport(False, False, bad)
    norm = [sum(r[i], ZERO) / weights[i] for i in range(n)]
    unfair = []
    for k in range(k_total):
        for i in range(n):
            if r[i][k] <= 0:
                continue
            for j in matrix.users_of[k]:
                if j in backlogged and norm[j] < norm[i]:
                    unfair.append(
                        f"user {i} served by server {k} at normalized {norm[i]} "
                        f"while eligible user {j} has {norm[j]}"
                    )
    return FairnessReport(not unfair, True, [], unfair)
