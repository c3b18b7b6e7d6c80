"""Exact welfare-maximizing request/agent matching with Clarke-pivot payments.

The matching problem is a maximum-weight bipartite b-matching: every client
may be served by at most one agent, every agent ``i`` has an integer slot
budget ``q_i``, and each admissible (client, agent) pair carries a welfare
weight ``w = value - cost``.  The problem is solved exactly through a
min-cost-flow reduction (successive shortest paths with Bellman-Ford
potentials and Dijkstra augmentation).  Augmentation stops as soon as the
cheapest augmenting path is no longer strictly welfare-improving, so the
solver maximizes total welfare rather than matching cardinality.

Payments charge each matched client the externality it imposes on the rest
of the market plus the service cost of its own match.  All currency enters
the solver as scaled integers, so optima, payments and the downstream
economic guarantees (efficiency, truthfulness, weak budget balance) hold
exactly with no floating-point drift.

Everything in this module is pure and deterministic: identical inputs
produce identical outputs, and nothing here mutates shared state.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

#: Fixed integer scaling applied to currency before it enters the flow
#: network.  Payments are computed in scaled units and unscaled on the way
#: out.
CURRENCY_SCALE = 10**6

_INF = float("inf")
_MAX_ARC_CAPACITY = 2**31 - 1
# Beyond 2**53 the int -> float boundary conversion stops being exact.
_MAX_SCALED_CURRENCY = 2**53

#: Size guard for the exhaustive oracle; enumeration is exponential.
BRUTE_FORCE_MAX_CLIENTS = 8
BRUTE_FORCE_MAX_AGENTS = 6


class MechanismError(ValueError):
    """Raised for malformed matching problems or flow networks."""


def scale_currency(amount: float) -> int:
    """Convert a currency amount to exact integer solver units."""
    scaled = round(amount * CURRENCY_SCALE)
    if abs(scaled) > _MAX_SCALED_CURRENCY:
        raise MechanismError(f"currency amount {amount!r} overflows the scaled integer range")
    return scaled


def unscale_currency(units: int) -> float:
    """Convert scaled integer solver units back to currency."""
    return units / CURRENCY_SCALE


@dataclass(frozen=True)
class WelfareEdge:
    """One admissible (client, agent) pairing and its net welfare."""

    client_id: str
    agent_id: str
    value: float
    cost: float

    @property
    def welfare(self) -> float:
        return self.value - self.cost


def prune_negative_edges(edges: list[WelfareEdge]) -> list[WelfareEdge]:
    """Drop pairings whose welfare is negative in scaled units."""
    return [e for e in edges if scale_currency(e.welfare) >= 0]


@dataclass(frozen=True)
class MatchProblem:
    """A batch matching instance: clients, capacitated agents, welfare edges.

    Edges handed to the solver must already be pruned of negative welfare;
    ``validate`` rejects instances that violate that or the structural
    invariants (unique pairs, non-negative capacities).
    """

    clients: tuple[str, ...]
    agents: tuple[tuple[str, int], ...]
    edges: tuple[WelfareEdge, ...]

    @staticmethod
    def build(
        clients: list[str],
        agents: list[tuple[str, int]],
        edges: list[WelfareEdge],
    ) -> "MatchProblem":
        problem = MatchProblem(tuple(clients), tuple(agents), tuple(edges))
        problem.validate()
        return problem

    def validate(self) -> None:
        client_ids = set(self.clients)
        if len(client_ids) != len(self.clients):
            raise MechanismError("duplicate client id")
        agent_ids = set()
        for agent_id, capacity in self.agents:
            if agent_id in agent_ids:
                raise MechanismError(f"duplicate agent id {agent_id!r}")
            agent_ids.add(agent_id)
            if capacity < 0:
                raise MechanismError(f"agent {agent_id!r} has negative capacity {capacity}")
            if capacity > _MAX_ARC_CAPACITY:
                raise MechanismError(
                    f"agent {agent_id!r} capacity {capacity} exceeds the arc capacity range"
                )
        seen_pairs = set()
        for edge in self.edges:
            if edge.client_id not in client_ids:
                raise MechanismError(f"edge references unknown client {edge.client_id!r}")
            if edge.agent_id not in agent_ids:
                raise MechanismError(f"edge references unknown agent {edge.agent_id!r}")
            pair = (edge.client_id, edge.agent_id)
            if pair in seen_pairs:
                raise MechanismError(f"duplicate edge for pair {pair!r}")
            seen_pairs.add(pair)
            if scale_currency(edge.welfare) < 0:
                raise MechanismError(
                    f"edge {pair!r} has negative welfare {edge.welfare!r}; prune before solving"
                )

    def without_client(self, client_id: str) -> "MatchProblem":
        return MatchProblem(
            tuple(c for c in self.clients if c != client_id),
            self.agents,
            tuple(e for e in self.edges if e.client_id != client_id),
        )


@dataclass(frozen=True)
class FlowArc:
    src: int
    dst: int
    capacity: int
    cost: int


@dataclass(frozen=True)
class FlowNetwork:
    """Min-cost-flow encoding of a :class:`MatchProblem`.

    Node layout: source, one node per client (problem order), one node per
    agent (problem order), sink.  Client->agent arcs carry cost
    ``-scale(welfare)``; all other arcs are free.
    """

    node_count: int
    arcs: tuple[FlowArc, ...]
    source: int
    sink: int


@dataclass(frozen=True)
class Allocation:
    """A feasible integral assignment and its total welfare."""

    assignments: dict[str, str]
    matched_welfare: dict[str, float]
    total_welfare: float
    total_welfare_scaled: int


@dataclass(frozen=True)
class PaymentSchedule:
    """Clarke-pivot payments for the matched clients of an allocation.

    ``surplus`` records each client's externality margin
    ``payment - cost``; it is non-negative for every matched client, which
    is what makes the mechanism run at worst break-even.
    """

    payments: dict[str, float]
    surplus: dict[str, float]
    total_surplus: float


def build_flow_network(problem: MatchProblem) -> FlowNetwork:
    """Encode a validated matching problem as a min-cost flow network."""
    problem.validate()
    n_clients = len(problem.clients)
    n_agents = len(problem.agents)
    source = 0
    sink = n_clients + n_agents + 1
    client_node = {c: 1 + i for i, c in enumerate(problem.clients)}
    agent_node = {a: 1 + n_clients + i for i, (a, _) in enumerate(problem.agents)}

    arcs = [FlowArc(source, client_node[c], 1, 0) for c in problem.clients]
    for edge in problem.edges:
        arcs.append(
            FlowArc(
                client_node[edge.client_id],
                agent_node[edge.agent_id],
                1,
                -scale_currency(edge.welfare),
            )
        )
    for agent_id, capacity in problem.agents:
        arcs.append(FlowArc(agent_node[agent_id], sink, capacity, 0))
    return FlowNetwork(sink + 1, tuple(arcs), source, sink)


class _Residual:
    """Mutable residual graph used by the successive-shortest-path solver."""

    def __init__(self, network: FlowNetwork):
        self.n = network.node_count
        self.source = network.source
        self.sink = network.sink
        self.arc_src: list[int] = []
        self.arc_dst: list[int] = []
        self.arc_cap: list[int] = []
        self.arc_cost: list[int] = []
        self.adj: list[list[int]] = [[] for _ in range(self.n)]
        self.orig_cap: list[int] = []
        for arc in network.arcs:
            if arc.capacity < 0:
                raise MechanismError(f"arc {arc.src}->{arc.dst} has negative capacity")
            if arc.capacity > _MAX_ARC_CAPACITY:
                raise MechanismError(f"arc {arc.src}->{arc.dst} capacity exceeds the arc capacity range")
            self._add(arc.src, arc.dst, arc.capacity, arc.cost)
        self.potential = [0] * self.n

    def _add(self, src: int, dst: int, cap: int, cost: int) -> None:
        for s, d, c, w in ((src, dst, cap, cost), (dst, src, 0, -cost)):
            self.adj[s].append(len(self.arc_src))
            self.arc_src.append(s)
            self.arc_dst.append(d)
            self.arc_cap.append(c)
            self.arc_cost.append(w)
        self.orig_cap.extend((cap, 0))

    def flow_of(self, forward_arc: int) -> int:
        return self.orig_cap[forward_arc] - self.arc_cap[forward_arc]

    def init_potentials(self) -> None:
        # Bellman-Ford once; client->agent arcs start negative.
        dist = [_INF] * self.n
        dist[self.source] = 0
        for _ in range(self.n - 1):
            changed = False
            for a in range(len(self.arc_src)):
                if self.arc_cap[a] <= 0:
                    continue
                u, v = self.arc_src[a], self.arc_dst[a]
                if dist[u] + self.arc_cost[a] < dist[v]:
                    dist[v] = dist[u] + self.arc_cost[a]
                    changed = True
            if not changed:
                break
        self.potential = [0 if d == _INF else int(d) for d in dist]

    def shortest_path(self) -> tuple[int, list[int]] | None:
        """Dijkstra over reduced costs; returns (real path cost, pred arcs).

        Ties keep the first-found predecessor and pop in node order, which
        pins the deterministic preference for low-index clients and agents.
        """
        dist = [_INF] * self.n
        pred = [-1] * self.n
        dist[self.source] = 0
        heap = [(0, self.source)]
        done = [False] * self.n
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            for a in self.adj[u]:
                if self.arc_cap[a] <= 0:
                    continue
                v = self.arc_dst[a]
                if done[v]:
                    continue
                nd = d + self.arc_cost[a] + self.potential[u] - self.potential[v]
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = a
                    heapq.heappush(heap, (nd, v))
        if dist[self.sink] == _INF:
            return None
        real_cost = int(dist[self.sink]) + self.potential[self.sink]
        sink_dist = dist[self.sink]
        for v in range(self.n):
            self.potential[v] += int(min(dist[v], sink_dist))
        return real_cost, pred

    def augment(self, pred: list[int]) -> int:
        path = []
        v = self.sink
        while v != self.source:
            a = pred[v]
            path.append(a)
            v = self.arc_src[a]
        push = min(self.arc_cap[a] for a in path)
        for a in path:
            self.arc_cap[a] -= push
            self.arc_cap[a ^ 1] += push
        return push

    def run(self) -> None:
        """Augment along successive shortest paths while welfare improves."""
        self.init_potentials()
        while True:
            found = self.shortest_path()
            if found is None:
                break
            real_cost, pred = found
            if real_cost >= 0:
                break
            self.augment(pred)

    def cancel_negative_cycles(self) -> None:
        n = self.n
        n_arcs = len(self.arc_src)
        while True:
            dist = [0] * n
            pred = [-1] * n
            last_relaxed = -1
            for _ in range(n):
                last_relaxed = -1
                for a in range(n_arcs):
                    if self.arc_cap[a] <= 0:
                        continue
                    u, v = self.arc_src[a], self.arc_dst[a]
                    if dist[u] + self.arc_cost[a] < dist[v]:
                        dist[v] = dist[u] + self.arc_cost[a]
                        pred[v] = a
                        last_relaxed = v
                if last_relaxed < 0:
                    break
            if last_relaxed < 0:
                return
            # Walk back n steps to land inside the cycle, then peel it off.
            v = last_relaxed
            for _ in range(n):
                v = self.arc_src[pred[v]]
            cycle = []
            u = v
            while True:
                a = pred[u]
                cycle.append(a)
                u = self.arc_src[a]
                if u == v:
                    break
            push = min(self.arc_cap[a] for a in cycle)
            for a in cycle:
                self.arc_cap[a] -= push
                self.arc_cap[a ^ 1] += push


def min_cost_max_weight_flow(network: FlowNetwork) -> tuple[int, ...]:
    """Solve the network, returning the flow on each arc in input order.

    The result is the integral flow of maximum total negated cost: cheapest
    augmenting paths are applied only while their total cost is strictly
    negative, so zero-welfare arcs never attract flow.
    """
    residual = _Residual(network)
    residual.run()
    return tuple(residual.flow_of(2 * i) for i in range(len(network.arcs)))


def _allocation_from_flows(problem: MatchProblem, flows: tuple[int, ...]) -> Allocation:
    n_clients = len(problem.clients)
    assignments: dict[str, str] = {}
    matched_welfare: dict[str, float] = {}
    total_scaled = 0
    edge_flow: dict[str, WelfareEdge] = {}
    for i, edge in enumerate(problem.edges):
        if flows[n_clients + i]:
            edge_flow[edge.client_id] = edge
    for client in problem.clients:
        edge = edge_flow.get(client)
        if edge is None:
            continue
        assignments[client] = edge.agent_id
        w_scaled = scale_currency(edge.welfare)
        matched_welfare[client] = unscale_currency(w_scaled)
        total_scaled += w_scaled
    return Allocation(
        assignments=assignments,
        matched_welfare=matched_welfare,
        total_welfare=unscale_currency(total_scaled),
        total_welfare_scaled=total_scaled,
    )


def solve_allocation(problem: MatchProblem) -> Allocation:
    """Compute the welfare-optimal feasible assignment for a problem."""
    network = build_flow_network(problem)
    flows = min_cost_max_weight_flow(network)
    return _allocation_from_flows(problem, flows)


def brute_force_matching(problem: MatchProblem) -> Allocation:
    """Exhaustively enumerate feasible assignments; test oracle for the solver.

    Ties are broken exactly like the flow solver: maximize welfare, then
    match as few clients as possible (zero-welfare pairs are left out), then
    prefer the lexicographically smallest (client index, agent index) pairs.
    """
    problem.validate()
    if len(problem.clients) > BRUTE_FORCE_MAX_CLIENTS or len(problem.agents) > BRUTE_FORCE_MAX_AGENTS:
        raise MechanismError(
            f"instance too large for enumeration: {len(problem.clients)} clients, "
            f"{len(problem.agents)} agents"
        )
    n_agents = len(problem.agents)
    agent_index = {a: i for i, (a, _) in enumerate(problem.agents)}
    unmatched = n_agents  # sorts after every real agent index
    options: list[list[tuple[int, int]]] = [[] for _ in problem.clients]
    for edge in problem.edges:
        c = problem.clients.index(edge.client_id)
        options[c].append((agent_index[edge.agent_id], scale_currency(edge.welfare)))
    for opts in options:
        opts.sort()

    caps = [capacity for _, capacity in problem.agents]
    best: list[tuple[int, int, tuple[int, ...]] | None] = [None]
    chosen: list[int] = []

    def recurse(k: int, welfare: int, matched: int) -> None:
        if k == len(problem.clients):
            key = (-welfare, matched, tuple(chosen))
            if best[0] is None or key < best[0]:
                best[0] = key
            return
        chosen.append(unmatched)
        recurse(k + 1, welfare, matched)
        chosen.pop()
        for agent, w in options[k]:
            if caps[agent] <= 0:
                continue
            caps[agent] -= 1
            chosen.append(agent)
            recurse(k + 1, welfare + w, matched + 1)
            chosen.pop()
            caps[agent] += 1

    recurse(0, 0, 0)
    assert best[0] is not None
    neg_welfare, _, vector = best[0]
    assignments: dict[str, str] = {}
    matched_welfare: dict[str, float] = {}
    for c, agent in enumerate(vector):
        if agent == unmatched:
            continue
        client = problem.clients[c]
        assignments[client] = problem.agents[agent][0]
        for edge in problem.edges:
            if edge.client_id == client and edge.agent_id == assignments[client]:
                matched_welfare[client] = unscale_currency(scale_currency(edge.welfare))
                break
    total_scaled = -neg_welfare
    return Allocation(
        assignments=assignments,
        matched_welfare=matched_welfare,
        total_welfare=unscale_currency(total_scaled),
        total_welfare_scaled=total_scaled,
    )


class _WarmSolver:
    """Re-solves client-removed subproblems on the main solve's residual graph.

    Removing a matched client frees one unit of its agent's capacity; the
    counterfactual optimum is recovered by cancelling that unit, peeling any
    negative residual cycles the removal exposes, and resuming shortest-path
    augmentation.  Produces exactly the same optimal welfare as a fresh
    solve.
    """

    def __init__(self, problem: MatchProblem):
        self.problem = problem
        self.network = build_flow_network(problem)
        self.residual = _Residual(self.network)
        self.residual.run()
        self.n_clients = len(problem.clients)
        self.client_pos = {c: i for i, c in enumerate(problem.clients)}
        self.edge_arcs: dict[str, list[int]] = {c: [] for c in problem.clients}
        self.edge_by_pair: dict[tuple[str, str], int] = {}
        for i, edge in enumerate(problem.edges):
            arc = 2 * (self.n_clients + i)
            self.edge_arcs[edge.client_id].append(arc)
            self.edge_by_pair[(edge.client_id, edge.agent_id)] = arc
        self.agent_sink_arc = {
            agent_id: 2 * (self.n_clients + len(problem.edges) + i)
            for i, (agent_id, _) in enumerate(problem.agents)
        }

    def welfare_without(self, client_id: str, matched_agent: str) -> int:
        r = self.residual
        saved_cap = list(r.arc_cap)
        saved_pot = list(r.potential)

        source_arc = 2 * self.client_pos[client_id]
        match_arc = self.edge_by_pair[(client_id, matched_agent)]
        sink_arc = self.agent_sink_arc[matched_agent]
        if r.flow_of(match_arc) != 1:
            raise MechanismError(
                f"allocation does not match the solver's optimum for {client_id!r}"
            )
        for a in (source_arc, match_arc, sink_arc):
            r.arc_cap[a] += 1
            r.arc_cap[a ^ 1] -= 1
        # Remove the client entirely: no residual capacity in or out.
        r.arc_cap[source_arc] = 0
        r.arc_cap[source_arc ^ 1] = 0
        for a in self.edge_arcs[client_id]:
            r.arc_cap[a] = 0
            r.arc_cap[a ^ 1] = 0

        r.cancel_negative_cycles()
        r.init_potentials()
        while True:
            found = r.shortest_path()
            if found is None:
                break
            real_cost, pred = found
            if real_cost >= 0:
                break
            r.augment(pred)

        welfare = 0
        for i, edge in enumerate(self.problem.edges):
            if edge.client_id == client_id:
                continue
            if r.flow_of(2 * (self.n_clients + i)):
                welfare += scale_currency(edge.welfare)

        r.arc_cap = saved_cap
        r.potential = saved_pot
        return welfare


def vcg_payments(
    problem: MatchProblem, alloc: Allocation, *, warm_start: bool = False
) -> PaymentSchedule:
    """Clarke-pivot payment for every matched client of an optimal allocation.

    Each payment is the externality the client imposes (the welfare the rest
    of the market loses because it is present) plus its own service cost.
    Counterfactual optima come from a fresh solve per client, or from the
    residual-graph fast path when ``warm_start`` is set; both yield identical
    payments.
    """
    edge_by_pair = {(e.client_id, e.agent_id): e for e in problem.edges}
    warm = _WarmSolver(problem) if warm_start else None
    payments: dict[str, float] = {}
    surplus: dict[str, float] = {}
    total_surplus_scaled = 0
    for client in problem.clients:
        agent = alloc.assignments.get(client)
        if agent is None:
            continue
        edge = edge_by_pair[(client, agent)]
        w_scaled = scale_currency(edge.welfare)
        c_scaled = scale_currency(edge.cost)
        if warm is not None:
            welfare_without = warm.welfare_without(client, agent)
        else:
            welfare_without = solve_allocation(problem.without_client(client)).total_welfare_scaled
        externality = welfare_without - (alloc.total_welfare_scaled - w_scaled)
        payments[client] = unscale_currency(externality + c_scaled)
        surplus[client] = unscale_currency(externality)
        total_surplus_scaled += externality
    return PaymentSchedule(
        payments=payments,
        surplus=surplus,
        total_surplus=unscale_currency(total_surplus_scaled),
    )


def verify_budget_balance(payments: PaymentSchedule, alloc: Allocation) -> tuple[bool, float]:
    """Check that collected payments cover the matched agents' costs."""
    if set(payments.payments) != set(alloc.assignments):
        raise MechanismError("payment schedule does not correspond to the allocation")
    total_paid = sum(scale_currency(payments.payments[c]) for c in payments.payments)
    # Per-match cost is recovered from payment - surplus.
    total_cost = sum(
        scale_currency(payments.payments[c]) - scale_currency(payments.surplus[c])
        for c in payments.payments
    )
    surplus = sum(scale_currency(payments.surplus[c]) for c in payments.surplus)
    return total_paid >= total_cost, unscale_currency(surplus)


def format_flow_network(network: FlowNetwork) -> str:
    """Line-oriented dump of a flow network, one arc per line."""
    lines = [f"nodes {network.node_count} source {network.source} sink {network.sink}"]
    for arc in network.arcs:
        lines.append(f"arc {arc.src} {arc.dst} cap {arc.capacity} cost {arc.cost}")
    return "\n".join(lines)


def format_allocation(alloc: Allocation) -> str:
    """Line-oriented dump of an allocation, one assignment per line."""
    lines = [f"welfare {alloc.total_welfare_scaled}"]
    for client, agent in alloc.assignments.items():
        lines.append(f"assign {client} {agent} welfare {scale_currency(alloc.matched_welfare[client])}")
    return "\n".join(lines)
