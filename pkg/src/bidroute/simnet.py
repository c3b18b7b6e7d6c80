"""Deterministic simulation substrate: agents, workloads, strategies, markets.

Simulated agents replace real model servers: an affine prefill-latency model,
token-based pricing, a bounded per-dialogue KV cache with LRU eviction, and
domain-dependent answer quality.  A seeded generator produces multi-turn
dialogues whose prompts grow by strict prefix extension, so cache affinity
has an analytic ground truth.  Experiments drive the router over a virtual
clock with one root seed split into independent named substreams, which
makes every run exactly reproducible.
"""

from __future__ import annotations

import heapq
import itertools
import re
import statistics
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .config import AgentSpec, ExperimentConfig, MarketSettings, validate_config
from .ledger import PrefixLedger
from .mechanism import MatchProblem, WelfareEdge, scale_currency, solve_allocation, unscale_currency
from .predictor import Observation, PricingProfile, warmup
from .router import (
    AgentProfile,
    HubConfig,
    MetricsLog,
    PendingRequest,
    Router,
    VirtualClock,
    build_hubs,
    serialize_messages,
)

# Independent named substreams hang off one root seed so adjusting one knob
# never perturbs draws elsewhere.
_STREAMS = {
    "workload": 0,
    "jitter": 1,
    "quality": 2,
    "strategy": 3,
    "generation": 4,
    "policy": 5,
    "values": 6,
    "market": 7,
}

STRATEGY_KINDS = ("honest", "aggressive", "conservative", "random")
CLUSTER_SCHEMES = ("full_mix", "ideal", "task_mix", "agent_mix")


def substream(seed: int, name: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[name], salt])


def text_tokens(text: str) -> int:
    """Shared tokenizer stand-in: four characters per token, rounded up."""
    return (len(text) + 3) // 4


# ---------------------------------------------------------------------------
# Synthetic multi-turn workload
# ---------------------------------------------------------------------------

_ATTRIBUTES = (
    "colour", "mass", "length", "origin", "rank", "tempo",
    "texture", "volume", "charge", "label", "period", "grade",
)
_SUBJECT_ADJS = ("brass", "crimson", "hollow", "ancient", "polished", "rusty", "silent", "massive")
_SUBJECT_NOUNS = ("gearbox", "lantern", "compass", "turbine", "antenna", "reactor", "pendulum", "beacon")
_GOLD_ADJS = ("amber", "cobalt", "ivory", "emerald", "scarlet", "obsidian", "golden", "violet")
_GOLD_NOUNS = ("nine", "crate", "prism", "falcon", "orchid", "summit", "harbor", "quartz")

_REFUSAL = "Unable to locate it."
_QUESTION_PREFIX = "What is "


@dataclass(frozen=True)
class SyntheticDialogue:
    """A multi-turn dialogue whose gold answers are planted in its context."""

    dialogue_id: str
    domain: str
    turns: tuple[tuple[str, str], ...]
    source: str = "synthetic"

    @property
    def knowledge(self) -> str:
        statements = []
        for question, gold in self.turns:
            subject = question[len(_QUESTION_PREFIX):].rstrip("?")
            statements.append(f"{subject} is {gold}")
        return "; ".join(statements) + "."

    def messages_for_turn(self, turn: int) -> list[dict[str, str]]:
        if not 1 <= turn <= len(self.turns):
            raise ValueError(f"turn {turn} outside 1..{len(self.turns)}")
        messages = [{"role": "system", "content": f"context: {self.knowledge}"}]
        for question, gold in self.turns[: turn - 1]:
            messages.append({"role": "user", "content": question})
            messages.append({"role": "assistant", "content": gold})
        messages.append({"role": "user", "content": self.turns[turn - 1][0]})
        return messages

    def prompt_for_turn(self, turn: int) -> str:
        return serialize_messages(self.messages_for_turn(turn))


def generate_workload(
    seed: int,
    n_dialogues: int,
    turns_per_dialogue: int,
    domain_mix: dict[str, float],
    *,
    source: str = "synthetic",
    salt: int = 0,
    id_prefix: str = "d",
) -> list[SyntheticDialogue]:
    """Seeded multi-turn dialogues with analytic prefix growth."""
    if n_dialogues < 0 or turns_per_dialogue < 1:
        raise ValueError("need n_dialogues >= 0 and turns_per_dialogue >= 1")
    rng = substream(seed, "workload", salt)
    domains = sorted(domain_mix)
    weights = np.array([domain_mix[d] for d in domains], dtype=float)
    if weights.sum() <= 0:
        raise ValueError("domain_mix weights must not all be zero")
    weights = weights / weights.sum()

    dialogues = []
    for d in range(n_dialogues):
        domain = domains[int(rng.choice(len(domains), p=weights))]
        subject = f"the {_SUBJECT_ADJS[int(rng.integers(len(_SUBJECT_ADJS)))]} " \
                  f"{_SUBJECT_NOUNS[int(rng.integers(len(_SUBJECT_NOUNS)))]}"
        attr_order = rng.permutation(len(_ATTRIBUTES))
        turns = []
        for t in range(turns_per_dialogue):
            attr = _ATTRIBUTES[int(attr_order[t % len(_ATTRIBUTES)])]
            gold = f"{_GOLD_ADJS[int(rng.integers(len(_GOLD_ADJS)))]} " \
                   f"{_GOLD_NOUNS[int(rng.integers(len(_GOLD_NOUNS)))]}"
            turns.append((f"{_QUESTION_PREFIX}the {attr} of {subject}?", gold))
        dialogues.append(
            SyntheticDialogue(f"{id_prefix}{d:04d}", domain, tuple(turns), source)
        )
    return dialogues


def dump_workload(dialogues: list[SyntheticDialogue], path: str) -> None:
    """One line per turn: dialogue, domain, turn, question, gold."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for dialogue in dialogues:
            for t, (question, gold) in enumerate(dialogue.turns, start=1):
                fh.write(
                    json.dumps(
                        [dialogue.dialogue_id, dialogue.domain, t, question, gold],
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def load_workload(path: str, source: str = "synthetic") -> list[SyntheticDialogue]:
    import json

    by_id: "OrderedDict[str, tuple[str, list[tuple[int, str, str]]]]" = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            dialogue_id, domain, turn, question, gold = json.loads(line)
            by_id.setdefault(dialogue_id, (domain, []))[1].append((turn, question, gold))
    dialogues = []
    for dialogue_id, (domain, rows) in by_id.items():
        rows.sort()
        dialogues.append(
            SyntheticDialogue(dialogue_id, domain, tuple((q, g) for _, q, g in rows), source)
        )
    return dialogues


# ---------------------------------------------------------------------------
# Answer evaluation
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]")


def _normalize_tokens(text: str) -> list[str]:
    text = text.lower()
    # Keep digit groups intact: "1,234" -> "1234" before punctuation strips.
    text = re.sub(r"(?<=\d),(?=\d)", "", text)
    text = _PUNCT.sub(" ", text)
    return text.split()


def evaluate_answer(output: str, gold: str) -> bool:
    """Token-span check: do the gold tokens appear contiguously in the output?"""
    gold_tokens = _normalize_tokens(gold)
    if not gold_tokens:
        return False
    out_tokens = _normalize_tokens(output)
    n = len(gold_tokens)
    return any(out_tokens[i : i + n] == gold_tokens for i in range(len(out_tokens) - n + 1))


# ---------------------------------------------------------------------------
# Simulated agents
# ---------------------------------------------------------------------------


class AgentBusyError(RuntimeError):
    """An execute call arrived with no free slot: router accounting bug."""


@dataclass(frozen=True)
class SimRngs:
    jitter: np.random.Generator
    quality: np.random.Generator
    generation: np.random.Generator


@dataclass(frozen=True)
class ExecutionResult:
    output: str
    latency_ms: float
    prompt_tokens: int
    hit_tokens: int
    gen_tokens: int
    cost: float
    correct: bool
    decode_ms: float


class SimAgent:
    """One serving agent: prefill latency, token pricing, bounded KV cache."""

    def __init__(
        self,
        spec: AgentSpec,
        rngs: SimRngs,
        gen_tokens_min: int = 8,
        gen_tokens_max: int = 32,
    ):
        self.spec = spec
        self.rngs = rngs
        self.gen_tokens_min = gen_tokens_min
        self.gen_tokens_max = gen_tokens_max
        self.profile = AgentProfile(
            id=spec.id,
            scale=spec.scale,
            domain=spec.domain,
            capacity=spec.capacity,
            prices=spec.prices,
        )
        self.busy = 0
        self._cache: "OrderedDict[str, int]" = OrderedDict()

    def cache_occupancy(self) -> int:
        return sum(self._cache.values())

    def cached_tokens(self, dialogue_id: str) -> int:
        return self._cache.get(dialogue_id, 0)

    def execute(
        self,
        prompt: str,
        dialogue_id: str,
        *,
        domain_tag: str,
        gold: str | None = None,
        now: float = 0.0,
        rng: SimRngs | None = None,
    ) -> ExecutionResult:
        """Serve one prompt: latency, token usage, cost and an answer text.

        Occupies a slot until ``finish`` is called; the queueing latency term
        counts the other requests already in flight here.
        """
        del now  # timing is relative; the driver anchors it on the clock
        if self.busy >= self.spec.capacity:
            raise AgentBusyError(f"agent {self.spec.id} has no free slot")
        rng = rng or self.rngs
        lat = self.spec.latency

        prompt_tokens = text_tokens(prompt)
        hit_tokens = min(self._cache.get(dialogue_id, 0), prompt_tokens)
        base_ms = (
            lat.prefill_ms_per_token * (prompt_tokens - hit_tokens)
            + lat.fixed_ms
            + lat.queue_ms_per_inflight * self.busy
        )
        eps = float(rng.jitter.uniform(-1.0, 1.0))
        latency_ms = base_ms * (1.0 + lat.jitter * eps)
        gen_tokens = int(rng.generation.integers(self.gen_tokens_min, self.gen_tokens_max + 1))
        cost = (
            self.spec.prices.miss * (prompt_tokens - hit_tokens)
            + self.spec.prices.hit * hit_tokens
            + self.spec.prices.out * gen_tokens
        )
        accuracy = (
            self.spec.quality.acc_match if domain_tag == self.spec.domain else self.spec.quality.acc_off
        )
        answered = bool(rng.quality.random() < accuracy)
        if gold is not None and answered:
            output = f"The answer is {gold}."
        else:
            output = _REFUSAL
        correct = evaluate_answer(output, gold) if gold is not None else answered

        # Cache bookkeeping: this dialogue now holds the full prompt; evict
        # the least-recently-used other dialogues if that overflows.
        self._cache[dialogue_id] = prompt_tokens
        self._cache.move_to_end(dialogue_id)
        while self.cache_occupancy() > self.spec.cache_tokens and len(self._cache) > 1:
            self._cache.popitem(last=False)
        if self.cache_occupancy() > self.spec.cache_tokens:
            self._cache[dialogue_id] = self.spec.cache_tokens

        self.busy += 1
        return ExecutionResult(
            output=output,
            latency_ms=latency_ms,
            prompt_tokens=prompt_tokens,
            hit_tokens=hit_tokens,
            gen_tokens=gen_tokens,
            cost=cost,
            correct=correct,
            decode_ms=gen_tokens * lat.decode_ms_per_token,
        )

    def finish(self) -> None:
        if self.busy <= 0:
            raise AgentBusyError(f"agent {self.spec.id} finish without active work")
        self.busy -= 1


# ---------------------------------------------------------------------------
# Bidding strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyProfile:
    """How a client distorts its reported valuation."""

    kind: str
    alpha: float = 1.5
    beta: float = 0.6
    random_low: float = 0.5
    random_high: float = 1.5

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.alpha <= 1.0:
            raise ValueError("alpha must exceed 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must be in (0, 1)")


def apply_strategy(v_true: float, strategy: StrategyProfile, rng: np.random.Generator) -> float:
    """Reported valuation under a strategy; only `random` consumes the rng."""
    if strategy.kind == "honest":
        return v_true
    if strategy.kind == "aggressive":
        return strategy.alpha * v_true
    if strategy.kind == "conservative":
        return strategy.beta * v_true
    return float(rng.uniform(strategy.random_low, strategy.random_high)) * v_true


# ---------------------------------------------------------------------------
# Cluster schemes and synthetic matching markets
# ---------------------------------------------------------------------------


def build_scheme(
    agents: list[AgentProfile],
    dialogues: list[SyntheticDialogue],
    scheme: str,
    k: int,
) -> tuple[HubConfig, dict[str, str | None]]:
    """Agent-side hub grouping plus the workload's routing tags.

    Domain-aligned task sides route by the dialogue's own domain (tag None);
    round-robin task sides pin each dialogue to a synthetic ``mix{h}`` tag.
    """
    if scheme not in ("domain",) + CLUSTER_SCHEMES:
        raise ValueError(f"unknown cluster scheme {scheme!r}")
    hub_config = build_hubs(agents, k, scheme)
    if scheme in ("full_mix", "task_mix"):
        tags: dict[str, str | None] = {
            d.dialogue_id: f"mix{i % k}" for i, d in enumerate(dialogues)
        }
    else:
        tags = {d.dialogue_id: None for d in dialogues}
    return hub_config, tags


@dataclass(frozen=True)
class MarketTask:
    id: str
    domain: str


@dataclass(frozen=True)
class SyntheticMarket:
    """One-round matching market with pre-drawn pair welfare."""

    agents: tuple[AgentProfile, ...]
    capacities: dict[str, int]
    tasks: tuple[MarketTask, ...]
    welfare: dict[tuple[str, str], float]


_MARKET_PRICES = PricingProfile(0.0, 0.0, 0.0)


def synthetic_market(settings: MarketSettings, seed: int) -> SyntheticMarket:
    rng = substream(seed, "market")
    domains = [f"dom{i:02d}" for i in range(settings.domains)]
    # Domains come in contiguous blocks so a round-robin hub split genuinely
    # mixes specializations instead of accidentally reproducing it.
    agents = []
    capacities = {}
    agents_per_domain = max(1, settings.agents // len(domains))
    for i in range(settings.agents):
        agent_id = f"m{i:03d}"
        capacity = int(rng.integers(settings.capacity_min, settings.capacity_max + 1))
        domain = domains[min(i // agents_per_domain, len(domains) - 1)]
        agents.append(AgentProfile(agent_id, 1.0, domain, capacity, _MARKET_PRICES))
        capacities[agent_id] = capacity
    tasks_per_domain = max(1, settings.tasks // len(domains))
    tasks = tuple(
        MarketTask(f"t{j:03d}", domains[min(j // tasks_per_domain, len(domains) - 1)])
        for j in range(settings.tasks)
    )
    welfare = {}
    for task in tasks:
        for agent in agents:
            if task.domain == agent.domain:
                draw = rng.uniform(settings.welfare_match_low, settings.welfare_match_high)
            else:
                draw = rng.uniform(settings.welfare_cross_low, settings.welfare_cross_high)
            welfare[(task.id, agent.id)] = float(draw)
    return SyntheticMarket(tuple(agents), capacities, tasks, welfare)


def market_round(
    market: SyntheticMarket,
    agent_hub: dict[str, int],
    task_hub: dict[str, int],
    k: int,
) -> tuple[int, float, int]:
    """Solve each hub's matching; returns (scaled welfare, solver seconds, matched)."""
    total_welfare = 0
    total_matched = 0
    solver_seconds = 0.0
    for hub in range(k):
        clients = [t.id for t in market.tasks if task_hub[t.id] == hub]
        agents = [
            (a.id, market.capacities[a.id]) for a in market.agents if agent_hub[a.id] == hub
        ]
        edges = []
        for t in market.tasks:
            if task_hub[t.id] != hub:
                continue
            for agent_id, _ in agents:
                w = market.welfare[(t.id, agent_id)]
                if scale_currency(w) >= 0:
                    edges.append(WelfareEdge(t.id, agent_id, w, 0.0))
        problem = MatchProblem.build(clients, agents, edges)
        start = time.perf_counter()
        alloc = solve_allocation(problem)
        solver_seconds += time.perf_counter() - start
        total_welfare += alloc.total_welfare_scaled
        total_matched += len(alloc.assignments)
    return total_welfare, solver_seconds, total_matched


def cluster_partition(
    market: SyntheticMarket, scheme: str, k: int
) -> tuple[dict[str, int], dict[str, int]]:
    """Hub assignment for agents and tasks under one cluster scheme."""
    domains = sorted({a.domain for a in market.agents})
    domain_hub = {d: i % k for i, d in enumerate(domains)}
    if scheme in ("domain", "ideal", "task_mix"):
        agent_hub = {a.id: domain_hub[a.domain] for a in market.agents}
    else:
        agent_hub = {a.id: i % k for i, a in enumerate(market.agents)}
    if scheme in ("domain", "ideal", "agent_mix"):
        task_hub = {t.id: domain_hub[t.domain] for t in market.tasks}
    else:
        task_hub = {t.id: j % k for j, t in enumerate(market.tasks)}
    return agent_hub, task_hub


# ---------------------------------------------------------------------------
# Discrete-event driver
# ---------------------------------------------------------------------------


class _EventLoop:
    """Virtual-clock event queue; ties resolve in scheduling order."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: list = []
        self._seq = itertools.count()

    def schedule(self, when: float, fn) -> None:
        heapq.heappush(self._heap, (when, next(self._seq), fn))

    def run(self) -> None:
        while self._heap:
            when, _, fn = heapq.heappop(self._heap)
            self.clock.advance_to(when)
            fn()


@dataclass
class RunResult:
    kind: str
    summary: "OrderedDict[str, object]"
    metrics: MetricsLog | None = None
    table_name: str | None = None
    table_columns: tuple[str, ...] = ()
    table_rows: list[dict] = field(default_factory=list)


class _SimDriver:
    """Wires the router to simulated agents over the event loop."""

    def __init__(self, cfg: ExperimentConfig, run_id: str):
        self.cfg = cfg
        self.run_id = run_id
        self.clock = VirtualClock()
        self.loop = _EventLoop(self.clock)
        seed = cfg.seed
        self.rngs = SimRngs(
            jitter=substream(seed, "jitter"),
            quality=substream(seed, "quality"),
            generation=substream(seed, "generation"),
        )
        self.agents = {
            spec.id: SimAgent(
                spec, self.rngs, cfg.workload.gen_tokens_min, cfg.workload.gen_tokens_max
            )
            for spec in cfg.agents
        }
        self.profiles = [self.agents[spec.id].profile for spec in cfg.agents]
        self.golds: dict[str, str | None] = {}
        self.on_outcome: dict[str, callable] = {}
        self.router: Router | None = None
        self._check_scheduled: set[float] = set()
        self._dispatched = 0

    def build_router(self, hub_config: HubConfig) -> Router:
        self.router = Router(
            self.cfg,
            self.profiles,
            hub_config,
            self.clock,
            transport=self._dispatch,
            policy_rng=substream(self.cfg.seed, "policy"),
            run_id=self.run_id,
        )
        return self.router

    def warm_up(self) -> None:
        w = self.cfg.workload.warmup_dialogues_per_agent
        turns = self.cfg.workload.warmup_turns
        if w <= 0 or turns <= 0 or not self.agents:
            return
        sample = generate_workload(
            self.cfg.seed,
            w * len(self.agents),
            turns,
            self.cfg.workload.domain_mix,
            source="warmup",
            salt=1,
            id_prefix="warm",
        )
        agent_list = [self.agents[spec.id] for spec in self.cfg.agents]
        for hub in self.router.hubs.values():
            members = [a for a in agent_list if a.profile.id in hub.agents]
            if not members:
                continue
            warmup(hub.pool, hub.ledger, members, sample)

    # -- event plumbing ------------------------------------------------------

    def submit(self, request: PendingRequest, gold: str | None, on_outcome) -> None:
        request.arrival_time = self.clock.now()
        self.golds[request.request_id] = gold
        self.on_outcome[request.request_id] = on_outcome
        self.router.submit(request)
        self.schedule_check(self.clock.now())
        deadline = self.router.next_deadline()
        if deadline is not None:
            self.schedule_check(deadline)

    def schedule_check(self, when: float) -> None:
        when = max(when, self.clock.now())
        if when in self._check_scheduled:
            return
        self._check_scheduled.add(when)
        self.loop.schedule(when, self._check)

    def _check(self) -> None:
        now = self.clock.now()
        self._check_scheduled.discard(now)
        self.router.process()
        if self.router.pending():
            deadline = self.router.next_deadline()
            if deadline is not None and deadline > now:
                self.schedule_check(deadline)
            elif self._dispatched == 0:
                # Nothing in flight will wake us; spin the retry clock so
                # stuck requests burn retries and reach the fallback path.
                self.schedule_check(now + max(self.cfg.batcher.max_wait_ms / 1000.0, 1e-3))

    def _dispatch(self, decision) -> None:
        agent = self.agents[decision.agent_id]
        request = decision.request
        result = agent.execute(
            request.prompt,
            request.dialogue_id,
            domain_tag=request.domain_tag,
            gold=self.golds.get(request.request_id),
            now=self.clock.now(),
        )
        self._dispatched += 1
        t_first = self.clock.now() + result.latency_ms / 1000.0
        t_done = t_first + result.decode_ms / 1000.0
        self.loop.schedule(t_done, lambda: self._complete(decision, result, t_first, t_done))

    def _complete(self, decision, result: ExecutionResult, t_first: float, t_done: float) -> None:
        self._dispatched -= 1
        self.agents[decision.agent_id].finish()
        observation = Observation(
            latency_ms=result.latency_ms,
            prompt_tokens=result.prompt_tokens,
            hit_tokens=result.hit_tokens,
            gen_tokens=result.gen_tokens,
            cost=result.cost,
            correct=result.correct,
        )
        outcome = self.router.on_completion(decision, observation, t_first, t_done)
        request_id = decision.request.request_id
        self.golds.pop(request_id, None)
        callback = self.on_outcome.pop(request_id, None)
        self.schedule_check(self.clock.now())
        if callback is not None:
            callback(outcome)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _run_workload_experiment(cfg: ExperimentConfig, run_id: str) -> RunResult:
    driver = _SimDriver(cfg, run_id)
    dialogues = generate_workload(
        cfg.seed,
        cfg.workload.n_dialogues,
        cfg.workload.turns_per_dialogue,
        cfg.workload.domain_mix,
    )
    hub_config, tags = build_scheme(driver.profiles, dialogues, cfg.hubs.scheme, cfg.hubs.k)
    driver.build_router(hub_config)
    driver.warm_up()

    pending_dialogues = list(dialogues)
    active = 0

    def start_next_dialogue() -> None:
        nonlocal active
        if not pending_dialogues:
            return
        dialogue = pending_dialogues.pop(0)
        active += 1
        submit_turn(dialogue, 1)

    def submit_turn(dialogue: SyntheticDialogue, turn: int) -> None:
        question, gold = dialogue.turns[turn - 1]
        request = PendingRequest(
            request_id=f"{dialogue.dialogue_id}#t{turn}",
            run_id=run_id,
            dialogue_id=dialogue.dialogue_id,
            turn_number=turn,
            source=dialogue.source,
            domain_tag=dialogue.domain,
            prompt=dialogue.prompt_for_turn(turn),
            route_tag=tags.get(dialogue.dialogue_id),
        )

        def on_outcome(outcome, dialogue=dialogue, turn=turn):
            nonlocal active
            if turn < len(dialogue.turns):
                driver.loop.schedule(
                    driver.clock.now(), lambda: submit_turn(dialogue, turn + 1)
                )
            else:
                active -= 1
                start_next_dialogue()

        driver.submit(request, gold, on_outcome)

    for _ in range(min(cfg.workload.concurrency, len(pending_dialogues))):
        start_next_dialogue()
    driver.loop.run()

    metrics = driver.router.metrics
    summary = _workload_summary(cfg, driver, metrics)
    return RunResult(kind=cfg.kind, summary=summary, metrics=metrics)


def _workload_summary(cfg, driver, metrics: MetricsLog) -> "OrderedDict[str, object]":
    rows = metrics.rows
    summary: "OrderedDict[str, object]" = OrderedDict()
    summary["kind"] = cfg.kind
    summary["policy"] = cfg.router.policy
    summary["seed"] = cfg.seed
    summary["requests"] = len(rows)
    prompt_tokens = sum(r["prompt_tokens"] for r in rows)
    hit_tokens = sum(r["cached_tokens"] for r in rows)
    summary["mean_kv_hit_rate"] = hit_tokens / prompt_tokens if prompt_tokens else 0.0
    summary["mean_cost"] = (
        sum(r["cost_obs"] for r in rows) / len(rows) if rows else 0.0
    )
    summary["median_ttft_ms"] = (
        statistics.median(r["latency_obs"] for r in rows) if rows else 0.0
    )
    welfare_rows = [r for r in rows if not r["fallback"]]
    summary["cumulative_welfare"] = sum(r["value_true"] - r["cost_obs"] for r in welfare_rows)
    summary["fallback_requests"] = sum(1 for r in rows if r["fallback"])
    summary["accuracy"] = (
        sum(1 for r in rows if r["correct_obs"]) / len(rows) if rows else 0.0
    )
    summary["solver_wall_s"] = driver.router.solver_seconds()
    return summary


def _run_truthfulness_experiment(cfg: ExperimentConfig, run_id: str) -> RunResult:
    driver = _SimDriver(cfg, run_id)
    hub_config = build_hubs(driver.profiles, cfg.hubs.k, "domain")
    driver.build_router(hub_config)
    driver.warm_up()

    strategies = {
        kind: StrategyProfile(
            kind,
            alpha=cfg.strategy.aggressive_factor,
            beta=cfg.strategy.conservative_factor,
            random_low=cfg.strategy.random_low,
            random_high=cfg.strategy.random_high,
        )
        for kind in STRATEGY_KINDS
    }
    strategy_rng = substream(cfg.seed, "strategy")
    value_rng = substream(cfg.seed, "values")
    rounds = cfg.strategy.rounds

    def run_round(index: int) -> None:
        outstanding = len(STRATEGY_KINDS)

        def on_outcome(outcome) -> None:
            nonlocal outstanding
            outstanding -= 1
            if outstanding == 0 and index + 1 < rounds:
                driver.loop.schedule(
                    driver.clock.now() + 0.001, lambda: run_round(index + 1)
                )

        for kind in STRATEGY_KINDS:
            value_scale = float(
                value_rng.uniform(cfg.strategy.value_low, cfg.strategy.value_high)
            )
            factor = apply_strategy(1.0, strategies[kind], strategy_rng)
            request = PendingRequest(
                request_id=f"{kind}-r{index:04d}",
                run_id=run_id,
                dialogue_id=f"{kind}-r{index:04d}",
                turn_number=1,
                source=kind,
                domain_tag="general",
                prompt=f"user: round {index} request from {kind}",
                value_scale=value_scale,
                report_factor=factor,
            )
            driver.submit(request, None, on_outcome)

    run_round(0)
    driver.loop.run()

    metrics = driver.router.metrics
    summary = _workload_summary(cfg, driver, metrics)
    utilities, matched = strategy_utilities(metrics.rows)
    summary["rounds"] = rounds
    for kind in STRATEGY_KINDS:
        summary[f"utility_{kind}"] = utilities.get(kind, 0.0)
        summary[f"matched_{kind}"] = matched.get(kind, 0)
    return RunResult(kind=cfg.kind, summary=summary, metrics=metrics)


def strategy_utilities(rows) -> tuple[dict[str, float], dict[str, int]]:
    """Per-strategy cumulative utility over the round auctions.

    A round's auction is the earliest batch any of its requests was decided
    in; requests matched there earn ``value_true - payment``.  Requests that
    lost the round and were served later (re-auction or fallback once
    capacity freed) earn nothing, exactly like losing a one-shot auction.
    """
    first_batch: dict[str, int] = {}
    for row in rows:
        rnd = str(row["dialogue_id"]).split("-r")[-1]
        first_batch[rnd] = min(first_batch.get(rnd, row["batch_id"]), row["batch_id"])
    utilities: dict[str, float] = {}
    matched: dict[str, int] = {}
    for row in rows:
        rnd = str(row["dialogue_id"]).split("-r")[-1]
        if row["fallback"] or row["batch_id"] != first_batch[rnd]:
            continue
        kind = row["source"]
        utilities[kind] = utilities.get(kind, 0.0) + row["value_true"] - row["payment"]
        matched[kind] = matched.get(kind, 0) + 1
    return utilities, matched


def _run_cluster_sweep(cfg: ExperimentConfig, run_id: str) -> RunResult:
    market = synthetic_market(cfg.market, cfg.seed)
    k_values = sorted(set(cfg.market.k_values) | {1})
    results = {}
    for k in k_values:
        agent_hub, task_hub = cluster_partition(market, "domain", k)
        results[k] = market_round(market, agent_hub, task_hub, k)
    base_welfare, base_seconds, _ = results[1]
    rows = []
    for k in sorted(cfg.market.k_values):
        welfare_scaled, seconds, matched = results[k]
        rows.append(
            {
                "K": k,
                "welfare": unscale_currency(welfare_scaled),
                "welfare_ratio_vs_K1": (
                    welfare_scaled / base_welfare if base_welfare else 1.0
                ),
                "solver_ms": seconds * 1000.0,
                "matched": matched,
            }
        )
    summary: "OrderedDict[str, object]" = OrderedDict()
    summary["kind"] = cfg.kind
    summary["seed"] = cfg.seed
    summary["market_agents"] = cfg.market.agents
    summary["market_tasks"] = cfg.market.tasks
    for row in rows:
        summary[f"welfare_K{row['K']}"] = row["welfare"]
        summary[f"solver_ms_K{row['K']}"] = row["solver_ms"]
    return RunResult(
        kind=cfg.kind,
        summary=summary,
        table_name="sweep",
        table_columns=("K", "welfare", "welfare_ratio_vs_K1", "solver_ms", "matched"),
        table_rows=rows,
    )


def _run_scheme_compare(cfg: ExperimentConfig, run_id: str) -> RunResult:
    market = synthetic_market(cfg.market, cfg.seed)
    k = cfg.market.k
    rows = []
    for scheme in CLUSTER_SCHEMES:
        agent_hub, task_hub = cluster_partition(market, scheme, k)
        welfare_scaled, seconds, matched = market_round(market, agent_hub, task_hub, k)
        rows.append(
            {
                "scheme": scheme,
                "welfare": unscale_currency(welfare_scaled),
                "solver_ms": seconds * 1000.0,
                "matched": matched,
            }
        )
    summary: "OrderedDict[str, object]" = OrderedDict()
    summary["kind"] = cfg.kind
    summary["seed"] = cfg.seed
    summary["k"] = k
    for row in rows:
        summary[f"welfare_{row['scheme']}"] = row["welfare"]
    return RunResult(
        kind=cfg.kind,
        summary=summary,
        table_name="schemes",
        table_columns=("scheme", "welfare", "solver_ms", "matched"),
        table_rows=rows,
    )


def _run_predictor_eval(cfg: ExperimentConfig, run_id: str) -> RunResult:
    result = _run_workload_experiment(cfg, run_id)
    rows = result.metrics.rows
    for head, pred_col, obs_col in (
        ("latency", "latency_pred", "latency_obs"),
        ("cost", "cost_pred", "cost_obs"),
    ):
        quartiles = _nmae_quartiles(rows, pred_col, obs_col)
        for i, value in enumerate(quartiles, start=1):
            result.summary[f"nmae_{head}_q{i}"] = value
    result.summary["kind"] = cfg.kind
    return result


def _nmae_quartiles(rows, pred_col, obs_col) -> list[float]:
    values = [(r[pred_col], r[obs_col]) for r in rows]
    if not values:
        return [0.0, 0.0, 0.0, 0.0]
    quarter = max(1, len(values) // 4)
    out = []
    for i in range(4):
        chunk = values[i * quarter : (i + 1) * quarter] if i < 3 else values[3 * quarter :]
        abs_err = sum(abs(p - o) for p, o in chunk)
        abs_obs = sum(abs(o) for _, o in chunk)
        out.append(abs_err / abs_obs if abs_obs else 0.0)
    return out


_RUNNERS = {
    "efficiency": _run_workload_experiment,
    "truthfulness": _run_truthfulness_experiment,
    "cluster_sweep": _run_cluster_sweep,
    "scheme_compare": _run_scheme_compare,
    "predictor_eval": _run_predictor_eval,
}


def run_experiment(cfg: ExperimentConfig, run_id: str = "run") -> RunResult:
    """Run one experiment to completion on the virtual clock."""
    validate_config(cfg)
    if cfg.kind in ("efficiency", "truthfulness", "predictor_eval") and not cfg.agents:
        raise ValueError(f"experiment kind {cfg.kind!r} needs at least one agent")
    return _RUNNERS[cfg.kind](cfg, run_id)


def format_summary(summary: "OrderedDict[str, object]") -> str:
    lines = [f"{key} = {value!r}" if isinstance(value, str) else f"{key} = {value}" for key, value in summary.items()]
    return "\n".join(lines) + "\n"
