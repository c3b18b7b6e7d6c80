"""The proxy hub: micro-batching, collective routing, slot accounting, metrics.

Requests arrive tagged with tracing identity, are classified to a hub, and
wait in that hub's micro-batcher until a size or age threshold fires.  Each
batch is routed collectively: affinity scores from the hub's prefix ledger
feed per-pair QoS predictions, predictions become valuations and welfare
edges, the mechanism solves the assignment, and matched requests are charged
their Clarke-pivot payment and dispatched.  Completions feed the predictors
and the ledger and append one row to the metrics log.

One logical loop owns each hub's queue, ledger, predictor pool and agent
states.  Submission crosses that boundary through a lock-guarded queue, so
producers may be concurrent; everything downstream is single-threaded per
hub.  All timing comes from an injected clock, never from the wall directly.
"""

from __future__ import annotations

import csv
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .config import ExperimentConfig, agent_priors
from .ledger import PrefixLedger
from .mechanism import (
    MatchProblem,
    WelfareEdge,
    scale_currency,
    solve_allocation,
    vcg_payments,
)
from .predictor import (
    FeatureVector,
    Observation,
    PredictorPool,
    PricingProfile,
    QosEstimate,
    featurize,
    valuation,
)

TRACE_HEADER_RUN_ID = "X-IEMAS-RUN-ID"
TRACE_HEADER_DIALOGUE_ID = "X-IEMAS-DIALOGUE-ID"
TRACE_HEADER_TURN_NUMBER = "X-IEMAS-TURN-NUMBER"
TRACE_HEADER_SOURCE = "X-IEMAS-SOURCE"

METRICS_COLUMNS = (
    "run_id",
    "batch_id",
    "request_id",
    "dialogue_id",
    "turn",
    "source",
    "agent_id",
    "policy",
    "affinity",
    "latency_pred",
    "cost_pred",
    "quality_pred",
    "value_true",
    "value_reported",
    "welfare",
    "payment",
    "latency_obs",
    "cost_obs",
    "correct_obs",
    "cached_tokens",
    "prompt_tokens",
    "gen_tokens",
    "fallback",
    "value_realized",
    "t_submit",
    "t_decide",
    "t_first_token",
    "t_done",
)


class RouterError(RuntimeError):
    pass


class QueueFullError(RouterError):
    """Back-pressure: the hub's pending queue is at its configured bound."""


class VirtualClock:
    """Deterministic simulation clock; the driver advances it explicitly."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError("virtual clock cannot move backwards")
        self._now = t


class WallClock:
    def now(self) -> float:
        return time.monotonic()


class ResponseSlot:
    """Delivers exactly one terminal outcome back to the submitter."""

    def __init__(self):
        self._event = threading.Event()
        self._outcome = None

    @property
    def done(self) -> bool:
        return self._event.is_set()

    def set(self, outcome) -> None:
        if self._event.is_set():
            raise RouterError("response slot already resolved")
        self._outcome = outcome
        self._event.set()

    def result(self, timeout: float | None = None):
        if not self._event.wait(timeout):
            raise TimeoutError("no outcome delivered")
        return self._outcome


@dataclass
class PendingRequest:
    """One client turn awaiting collective routing."""

    request_id: str
    run_id: str
    dialogue_id: str
    turn_number: int
    source: str
    domain_tag: str
    prompt: str
    value_scale: float = 1.0
    report_factor: float = 1.0
    route_tag: str | None = None
    arrival_time: float = 0.0
    retries: int = 0
    slot: ResponseSlot = field(default_factory=ResponseSlot)

    def __post_init__(self):
        if self.turn_number < 1:
            raise RouterError(f"turn_number must be >= 1, got {self.turn_number}")
        if not self.prompt:
            raise RouterError("prompt must not be empty")


def serialize_messages(messages: Sequence[Mapping[str, str]]) -> str:
    """Canonical prompt text for a message list; appending a message extends
    the serialized form as a strict prefix."""
    return "\n".join(f"{m['role']}: {m['content']}" for m in messages)


def request_from_envelope(
    headers: Mapping[str, str],
    body: Mapping,
    *,
    arrival_time: float = 0.0,
    request_id: str | None = None,
) -> PendingRequest:
    """Build a request from the tracing headers and body of the wire envelope."""
    dialogue_id = headers[TRACE_HEADER_DIALOGUE_ID]
    turn = int(headers[TRACE_HEADER_TURN_NUMBER])
    return PendingRequest(
        request_id=request_id or f"{dialogue_id}#t{turn}",
        run_id=headers.get(TRACE_HEADER_RUN_ID, ""),
        dialogue_id=dialogue_id,
        turn_number=turn,
        source=headers.get(TRACE_HEADER_SOURCE, ""),
        domain_tag=body["domain_tag"],
        prompt=serialize_messages(body["messages"]),
        report_factor=float(body.get("report_factor", 1.0)),
        arrival_time=arrival_time,
    )


@dataclass(frozen=True)
class MicroBatch:
    requests: tuple[PendingRequest, ...]
    reason: str  # "size" | "timeout"


class MicroBatcher:
    """FIFO queue that releases batches on a size or age threshold."""

    def __init__(self, max_batch_size: int, max_wait_ms: float, queue_bound: int):
        self.max_batch_size = max_batch_size
        self.max_wait_s = max_wait_ms / 1000.0
        self.queue_bound = queue_bound
        self._queue: deque[PendingRequest] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._queue)

    def submit(self, request: PendingRequest) -> None:
        with self._lock:
            if len(self._queue) >= self.queue_bound:
                raise QueueFullError(
                    f"hub queue at bound {self.queue_bound}; rejecting {request.request_id}"
                )
            self._queue.append(request)

    def requeue_front(self, requests: Sequence[PendingRequest]) -> None:
        """Put unrouted requests back at the head, original order preserved."""
        with self._lock:
            for request in reversed(requests):
                self._queue.appendleft(request)

    def oldest_deadline(self) -> float | None:
        with self._lock:
            if not self._queue:
                return None
            return self._queue[0].arrival_time + self.max_wait_s

    def form_batches(self, now: float) -> list[MicroBatch]:
        batches = []
        with self._lock:
            while self._queue:
                if len(self._queue) >= self.max_batch_size:
                    reason = "size"
                elif now - self._queue[0].arrival_time + 1e-9 >= self.max_wait_s:
                    reason = "timeout"
                else:
                    break
                take = min(self.max_batch_size, len(self._queue))
                batches.append(
                    MicroBatch(tuple(self._queue.popleft() for _ in range(take)), reason)
                )
        return batches


@dataclass(frozen=True)
class AgentProfile:
    """Static capability of a serving agent."""

    id: str
    scale: float
    domain: str
    capacity: int
    prices: PricingProfile


class AgentState:
    """Live load of one agent: dispatched work, reserved slots, rate window."""

    def __init__(self, profile: AgentProfile, hub_id: int, rate_window_s: float = 10.0):
        self.profile = profile
        self.hub_id = hub_id
        self.inflight = 0
        self.reserved = 0
        self.rate_window_s = rate_window_s
        self._dispatch_times: deque[float] = deque()
        self._now = 0.0

    def committed(self) -> int:
        return self.inflight + self.reserved

    def free_slots(self) -> int:
        return self.profile.capacity - self.committed()

    def reserve(self) -> None:
        if self.free_slots() <= 0:
            raise RouterError(f"agent {self.profile.id} over capacity")
        self.reserved += 1

    def mark_dispatched(self, now: float) -> None:
        if self.reserved <= 0:
            raise RouterError(f"agent {self.profile.id} dispatch without reservation")
        self.reserved -= 1
        self.inflight += 1
        self._now = now
        self._dispatch_times.append(now)

    def release(self) -> None:
        if self.inflight <= 0:
            raise RouterError(f"agent {self.profile.id} release without inflight work")
        self.inflight -= 1

    def rate(self, now: float | None = None) -> float:
        now = self._now if now is None else now
        while self._dispatch_times and self._dispatch_times[0] < now - self.rate_window_s:
            self._dispatch_times.popleft()
        return len(self._dispatch_times) / self.rate_window_s


@dataclass(frozen=True)
class RouterLoad:
    inflight: int
    rate: float


@dataclass
class RouteDecision:
    """Outcome of routing one request: where it goes and at what price."""

    request: PendingRequest
    agent_id: str
    hub_id: int
    batch_id: int
    policy: str
    affinity: float
    estimate: QosEstimate
    value_true: float
    value_reported: float
    cost_pred: float
    welfare: float
    payment: float
    fallback: bool
    t_decide: float
    features: FeatureVector


@dataclass(frozen=True)
class Outcome:
    decision: RouteDecision
    observation: Observation
    t_first_token: float
    t_done: float


@dataclass(frozen=True)
class HubConfig:
    """Static partition of agents into hubs plus the request classifier rule."""

    k: int
    membership: dict[str, int]
    domain_map: dict[str, int]
    default_hub: int = 0


def build_hubs(agents: Sequence[AgentProfile], k: int, scheme: str) -> HubConfig:
    """Group agents into ``k`` hubs.

    ``domain``/``ideal``/``task_mix`` group agents by domain specialization
    (domains sorted, merged round-robin); ``full_mix``/``agent_mix`` spread
    agents round-robin in input order.  The classifier maps real domain tags
    for domain-aligned task sides and synthetic ``mix{h}`` tags where the
    workload side is spread round-robin.
    """
    if k < 1:
        raise RouterError(f"hub count must be >= 1, got {k}")
    domains = sorted({a.domain for a in agents})
    if scheme in ("domain", "ideal", "task_mix"):
        if k > max(1, len(domains)):
            raise RouterError(f"k={k} exceeds the {len(domains)} distinct domains")
        domain_hub = {d: i % k for i, d in enumerate(domains)}
        membership = {a.id: domain_hub[a.domain] for a in agents}
    elif scheme in ("full_mix", "agent_mix"):
        membership = {a.id: i % k for i, a in enumerate(agents)}
        domain_hub = {d: i % k for i, d in enumerate(domains)}
    else:
        raise RouterError(f"unknown hub scheme {scheme!r}")

    if scheme in ("domain", "ideal", "agent_mix"):
        domain_map = dict(domain_hub)
    else:  # task side is spread round-robin over synthetic tags
        domain_map = {f"mix{h}": h for h in range(k)}
    return HubConfig(k=k, membership=membership, domain_map=domain_map)


def classify_request(request: PendingRequest, hubs: HubConfig) -> int:
    """Deterministic tag -> hub lookup; unknown tags go to the default hub."""
    tag = request.route_tag if request.route_tag is not None else request.domain_tag
    return hubs.domain_map.get(tag, hubs.default_hub)


class MetricsLog:
    """Append-only decision log with a fixed column set."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        missing = set(METRICS_COLUMNS) - set(row)
        if missing:
            raise RouterError(f"metrics row missing columns {sorted(missing)}")
        self.rows.append(row)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            for row in self.rows:
                writer.writerow([_format_cell(row[c]) for c in METRICS_COLUMNS])


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Hub:
    """One hub's queue, ledger, predictors and agent states."""

    def __init__(
        self,
        hub_id: int,
        agents: Sequence[AgentProfile],
        cfg: ExperimentConfig,
        domains: Sequence[str],
    ):
        self.hub_id = hub_id
        self.cfg = cfg
        self.batcher = MicroBatcher(
            cfg.batcher.max_batch_size, cfg.batcher.max_wait_ms, cfg.batcher.queue_bound
        )
        self.ledger = PrefixLedger(cfg.ledger.capacity, cfg.ledger.evict_threshold)
        self.pool = PredictorPool(
            domains=domains,
            learning_rate=cfg.predictor.learning_rate,
            min_observations=cfg.predictor.min_observations,
            priors=QosEstimate(
                cfg.predictor.prior_latency_ms, cfg.predictor.prior_cost, cfg.predictor.prior_quality
            ),
        )
        self.agents: dict[str, AgentState] = {}
        spec_by_id = {a.id: a for a in cfg.agents}
        for profile in agents:
            self.agents[profile.id] = AgentState(profile, hub_id, cfg.predictor.rate_window_s)
            spec = spec_by_id.get(profile.id)
            priors = agent_priors(spec, cfg.predictor) if spec else None
            self.pool.add_agent(profile.id, priors)
        self._round_robin = 0
        self.solver_seconds = 0.0

    def _pair_quote(self, request: PendingRequest, state: AgentState, load: RouterLoad):
        score = self.ledger.compute_affinity(state.profile.id, request.dialogue_id, request.prompt)
        x = featurize(request, state, score.ratio, load)
        est = self.pool.predict(state.profile.id, x)
        value_true = request.value_scale * valuation(est, self.cfg.valuation)
        value_reported = request.report_factor * value_true
        return score.ratio, x, est, value_true, value_reported

    def route_batch(
        self,
        batch: MicroBatch,
        now: float,
        load: RouterLoad,
        batch_id: int,
        policy: str,
        policy_rng,
    ) -> tuple[list[RouteDecision], list[PendingRequest]]:
        """Route one micro-batch; returns (decisions, requests to requeue)."""
        if policy == "auction":
            return self._route_auction(batch, now, load, batch_id)
        return self._route_baseline(batch, now, load, batch_id, policy, policy_rng)

    # -- auction ------------------------------------------------------------

    def _route_auction(self, batch, now, load, batch_id):
        quotes = {}
        edges = []
        open_agents = [s for s in self.agents.values() if s.free_slots() > 0]
        for request in batch.requests:
            for state in open_agents:
                quote = self._pair_quote(request, state, load)
                quotes[(request.request_id, state.profile.id)] = quote
                _, _, est, _, value_reported = quote
                welfare = value_reported - est.cost
                if scale_currency(welfare) >= 0:
                    edges.append(
                        WelfareEdge(request.request_id, state.profile.id, value_reported, est.cost)
                    )
        problem = MatchProblem.build(
            [r.request_id for r in batch.requests],
            [(s.profile.id, s.free_slots()) for s in open_agents],
            edges,
        )
        solve_start = time.perf_counter()
        alloc = solve_allocation(problem)
        schedule = vcg_payments(problem, alloc, warm_start=self.cfg.router.warm_start_payments)
        self.solver_seconds += time.perf_counter() - solve_start

        decisions: list[RouteDecision] = []
        unmatched: list[PendingRequest] = []
        requeued: list[PendingRequest] = []
        # Matched pairs reserve first; fallbacks may only use what remains.
        for request in batch.requests:
            agent_id = alloc.assignments.get(request.request_id)
            if agent_id is None:
                unmatched.append(request)
                continue
            affinity, x, est, value_true, value_reported = quotes[(request.request_id, agent_id)]
            self.agents[agent_id].reserve()
            decisions.append(
                RouteDecision(
                    request=request,
                    agent_id=agent_id,
                    hub_id=self.hub_id,
                    batch_id=batch_id,
                    policy="auction",
                    affinity=affinity,
                    estimate=est,
                    value_true=value_true,
                    value_reported=value_reported,
                    cost_pred=est.cost,
                    welfare=value_reported - est.cost,
                    payment=schedule.payments[request.request_id],
                    fallback=False,
                    t_decide=now,
                    features=x,
                )
            )
        for request in unmatched:
            fallback = self._handle_unmatched(request, quotes, now, load, batch_id)
            if fallback is None:
                requeued.append(request)
            else:
                decisions.append(fallback)
        return decisions, requeued

    def _handle_unmatched(self, request, quotes, now, load, batch_id):
        """Retry budget first; after that, least-loaded fallback if feasible."""
        request.retries += 1
        if request.retries <= self.cfg.router.max_retries:
            return None
        open_agents = [s for s in self.agents.values() if s.free_slots() > 0]
        if not open_agents:
            return None
        state = min(
            open_agents,
            key=lambda s: (s.committed() / max(1, s.profile.capacity), s.profile.id),
        )
        agent_id = state.profile.id
        quote = quotes.get((request.request_id, agent_id))
        if quote is None:
            quote = self._pair_quote(request, state, load)
        affinity, x, est, value_true, value_reported = quote
        state.reserve()
        return RouteDecision(
            request=request,
            agent_id=agent_id,
            hub_id=self.hub_id,
            batch_id=batch_id,
            policy="auction",
            affinity=affinity,
            estimate=est,
            value_true=value_true,
            value_reported=value_reported,
            cost_pred=est.cost,
            welfare=value_reported - est.cost,
            payment=est.cost,
            fallback=True,
            t_decide=now,
            features=x,
        )

    # -- baselines ----------------------------------------------------------

    def _route_baseline(self, batch, now, load, batch_id, policy, policy_rng):
        decisions: list[RouteDecision] = []
        requeued: list[PendingRequest] = []
        agent_list = list(self.agents.values())
        for request in batch.requests:
            open_agents = [s for s in agent_list if s.free_slots() > 0]
            if not open_agents:
                request.retries += 1
                requeued.append(request)
                continue
            if policy == "random":
                state = open_agents[int(policy_rng.integers(len(open_agents)))]
            elif policy == "round_robin":
                for _ in range(len(agent_list)):
                    candidate = agent_list[self._round_robin % len(agent_list)]
                    self._round_robin += 1
                    if candidate.free_slots() > 0:
                        state = candidate
                        break
            elif policy == "greedy_affinity":
                # Highest prefix overlap wins; ties go to the lowest agent id.
                state = min(
                    open_agents,
                    key=lambda s: (
                        -self.ledger.compute_affinity(
                            s.profile.id, request.dialogue_id, request.prompt
                        ).ratio,
                        s.profile.id,
                    ),
                )
            else:
                raise RouterError(f"unknown policy {policy!r}")
            affinity, x, est, value_true, value_reported = self._pair_quote(request, state, load)
            state.reserve()
            decisions.append(
                RouteDecision(
                    request=request,
                    agent_id=state.profile.id,
                    hub_id=self.hub_id,
                    batch_id=batch_id,
                    policy=policy,
                    affinity=affinity,
                    estimate=est,
                    value_true=value_true,
                    value_reported=value_reported,
                    cost_pred=est.cost,
                    welfare=value_reported - est.cost,
                    payment=est.cost,
                    fallback=False,
                    t_decide=now,
                    features=x,
                )
            )
        return decisions, requeued


class Router:
    """Front door: classify, batch, route, account, log."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        profiles: Sequence[AgentProfile],
        hub_config: HubConfig,
        clock,
        transport: Callable[[RouteDecision], None],
        policy_rng=None,
        run_id: str = "run",
    ):
        self.cfg = cfg
        self.clock = clock
        self.transport = transport
        self.policy_rng = policy_rng
        self.run_id = run_id
        self.hub_config = hub_config
        self.metrics = MetricsLog()
        self.hubs: dict[int, Hub] = {}
        domains = sorted(set(cfg.workload.domain_mix) | {a.domain for a in profiles})
        for hub_id in range(hub_config.k):
            members = [p for p in profiles if hub_config.membership[p.id] == hub_id]
            self.hubs[hub_id] = Hub(hub_id, members, cfg, domains)
        self._submit_times: deque[float] = deque()
        self._inflight = 0
        self._batch_counter = 0

    # -- submission ---------------------------------------------------------

    def submit(self, request: PendingRequest) -> ResponseSlot:
        """Enqueue a request with its hub; outcome arrives on the slot."""
        hub = self.hubs[classify_request(request, self.hub_config)]
        hub.batcher.submit(request)
        now = self.clock.now()
        self._submit_times.append(now)
        window = self.cfg.predictor.rate_window_s
        while self._submit_times and self._submit_times[0] < now - window:
            self._submit_times.popleft()
        self._inflight += 1
        return request.slot

    def load_snapshot(self) -> RouterLoad:
        now = self.clock.now()
        window = self.cfg.predictor.rate_window_s
        while self._submit_times and self._submit_times[0] < now - window:
            self._submit_times.popleft()
        return RouterLoad(inflight=self._inflight, rate=len(self._submit_times) / window)

    # -- batch processing ---------------------------------------------------

    def process(self) -> list[RouteDecision]:
        """Form and route due batches on every hub; dispatch the decisions."""
        now = self.clock.now()
        dispatched: list[RouteDecision] = []
        for hub_id in sorted(self.hubs):
            hub = self.hubs[hub_id]
            for batch in hub.batcher.form_batches(now):
                self._batch_counter += 1
                decisions, requeued = hub.route_batch(
                    batch,
                    now,
                    self.load_snapshot(),
                    self._batch_counter,
                    self.cfg.router.policy,
                    self.policy_rng,
                )
                if requeued:
                    hub.batcher.requeue_front(requeued)
                for decision in decisions:
                    hub.agents[decision.agent_id].mark_dispatched(now)
                    self.transport(decision)
                    dispatched.append(decision)
        return dispatched

    def next_deadline(self) -> float | None:
        deadlines = [
            d for hub in self.hubs.values() if (d := hub.batcher.oldest_deadline()) is not None
        ]
        return min(deadlines) if deadlines else None

    def pending(self) -> int:
        return sum(len(hub.batcher) for hub in self.hubs.values())

    def solver_seconds(self) -> float:
        return sum(hub.solver_seconds for hub in self.hubs.values())

    # -- completion ---------------------------------------------------------

    def on_completion(
        self,
        decision: RouteDecision,
        observation: Observation,
        t_first_token: float,
        t_done: float,
    ) -> Outcome:
        """Release the slot, learn from the outcome, log it, resolve the caller."""
        hub = self.hubs[decision.hub_id]
        state = hub.agents[decision.agent_id]
        state.release()
        self._inflight -= 1
        request = decision.request
        hub.pool.update(decision.agent_id, decision.features, observation)
        hub.ledger.record_prompt(decision.agent_id, request.dialogue_id, request.prompt, t_done)
        hub.ledger.evict_if_stale(
            decision.agent_id, request.dialogue_id, decision.affinity, observation.hit_tokens
        )
        realized = request.value_scale * valuation(
            QosEstimate(
                latency_ms=observation.latency_ms,
                cost=observation.cost,
                quality=1.0 if observation.correct else 0.0,
            ),
            self.cfg.valuation,
        )
        self.metrics.append(
            {
                "run_id": request.run_id,
                "batch_id": decision.batch_id,
                "request_id": request.request_id,
                "dialogue_id": request.dialogue_id,
                "turn": request.turn_number,
                "source": request.source,
                "agent_id": decision.agent_id,
                "policy": decision.policy,
                "affinity": decision.affinity,
                "latency_pred": decision.estimate.latency_ms,
                "cost_pred": decision.estimate.cost,
                "quality_pred": decision.estimate.quality,
                "value_true": decision.value_true,
                "value_reported": decision.value_reported,
                "welfare": decision.welfare,
                "payment": decision.payment,
                "latency_obs": observation.latency_ms,
                "cost_obs": observation.cost,
                "correct_obs": observation.correct,
                "cached_tokens": observation.hit_tokens,
                "prompt_tokens": observation.prompt_tokens,
                "gen_tokens": observation.gen_tokens,
                "fallback": decision.fallback,
                "value_realized": realized,
                "t_submit": request.arrival_time,
                "t_decide": decision.t_decide,
                "t_first_token": t_first_token,
                "t_done": t_done,
            }
        )
        outcome = Outcome(decision, observation, t_first_token, t_done)
        request.slot.set(outcome)
        return outcome
