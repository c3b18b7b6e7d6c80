"""Per-agent online QoS prediction, realized-cost accounting and valuation.

Every serving agent gets an independent predictor with three heads: latency
and cost are online linear regressions on standardized features with the
target log1p-transformed, quality is a logistic model over the same
features.  The learner is deliberately simple — gradient steps are
deterministic given the update order, state snapshots round-trip losslessly,
and a different incremental learner can sit behind the same pool interface.

Cost accounting prices uncached prompt tokens, cached prompt tokens and
generated tokens separately, which is what makes cache affinity show up in
the economics and not just in latency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SNAPSHOT_VERSION = 1

DEFAULT_LEARNING_RATE = 0.05
DEFAULT_MIN_OBSERVATIONS = 5
#: Numeric features in a FeatureVector, in array order, before the domain
#: one-hot block.
NUMERIC_FEATURES = (
    "prompt_chars",
    "turn_index",
    "affinity",
    "router_inflight",
    "router_rate",
    "agent_inflight",
    "agent_rate",
    "capacity",
    "utilization",
)
# Keeps expm1 of the regression link finite.
_MAX_LINK = 45.0


class PredictorError(KeyError):
    """Raised when a prediction is requested for an unknown agent."""


@dataclass(frozen=True)
class FeatureVector:
    """Routing-time features for one (request, agent) pair."""

    prompt_chars: int
    turn_index: int
    affinity: float
    router_inflight: int
    router_rate: float
    agent_inflight: int
    agent_rate: float
    capacity: int
    utilization: float
    domain_tag: str

    def to_array(self, domains: Sequence[str]) -> np.ndarray:
        """Numeric encoding; unknown domain tags land in a trailing slot."""
        one_hot = np.zeros(len(domains) + 1)
        try:
            one_hot[list(domains).index(self.domain_tag)] = 1.0
        except ValueError:
            one_hot[-1] = 1.0
        return np.concatenate(
            (
                np.array(
                    [
                        float(self.prompt_chars),
                        float(self.turn_index),
                        self.affinity,
                        float(self.router_inflight),
                        self.router_rate,
                        float(self.agent_inflight),
                        self.agent_rate,
                        float(self.capacity),
                        self.utilization,
                    ]
                ),
                one_hot,
            )
        )


@dataclass(frozen=True)
class QosEstimate:
    """Predicted time-to-first-token, service cost and answer quality."""

    latency_ms: float
    cost: float
    quality: float


@dataclass(frozen=True)
class PricingProfile:
    """Per-token prices for uncached, cached and generated tokens."""

    miss: float
    hit: float
    out: float

    def validate(self) -> None:
        if min(self.miss, self.hit, self.out) < 0:
            raise ValueError("token prices must be non-negative")
        if self.hit > self.miss:
            raise ValueError("cached tokens must not cost more than uncached tokens")


@dataclass(frozen=True)
class Observation:
    """Realized outcome of one dispatched request."""

    latency_ms: float
    prompt_tokens: int
    hit_tokens: int
    gen_tokens: int
    cost: float
    correct: bool


@dataclass(frozen=True)
class ValuationConfig:
    """Weights turning a QoS estimate into a currency valuation.

    Latency is normalized by ``latency_ref_ms`` and clamped at 1 so it lives
    on the same unit scale as quality before the preference weight ``delta``
    mixes them; ``value_scale`` then converts to currency.
    """

    delta: float = 0.5
    latency_ref_ms: float = 1000.0
    value_scale: float = 20.0

    def validate(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must be in [0, 1]")
        if self.latency_ref_ms <= 0:
            raise ValueError("latency_ref_ms must be positive")
        if self.value_scale <= 0:
            raise ValueError("value_scale must be positive")


def featurize(request, agent_state, affinity: float, load) -> FeatureVector:
    """Assemble the feature vector for one candidate (request, agent) pair.

    ``agent_state`` must expose ``committed()`` (dispatched plus reserved
    slots), ``rate()`` and a profile with ``capacity``; ``load`` carries the
    router-wide ``inflight`` and ``rate`` snapshot taken at batch time.
    """
    inflight = agent_state.committed()
    capacity = agent_state.profile.capacity
    return FeatureVector(
        prompt_chars=len(request.prompt),
        turn_index=request.turn_number,
        affinity=affinity,
        router_inflight=load.inflight,
        router_rate=load.rate,
        agent_inflight=inflight,
        agent_rate=agent_state.rate(),
        capacity=capacity,
        utilization=inflight / max(1, capacity),
        domain_tag=request.domain_tag,
    )


def observed_cost(prompt_tokens: int, hit_tokens: int, gen_tokens: int, prices: PricingProfile) -> float:
    """Realized cost of a request from its token counts and the agent's prices."""
    if hit_tokens < 0 or gen_tokens < 0 or prompt_tokens < 0:
        raise ValueError("token counts must be non-negative")
    if hit_tokens > prompt_tokens:
        raise ValueError(f"hit tokens {hit_tokens} exceed prompt tokens {prompt_tokens}")
    return (
        prices.miss * (prompt_tokens - hit_tokens)
        + prices.hit * hit_tokens
        + prices.out * gen_tokens
    )


def valuation(estimate: QosEstimate, cfg: ValuationConfig) -> float:
    """Scalarize a QoS estimate into currency: quality up, latency down."""
    latency_norm = min(estimate.latency_ms / cfg.latency_ref_ms, 1.0)
    return cfg.value_scale * (cfg.delta * estimate.quality - (1.0 - cfg.delta) * latency_norm)


class _RunningStats:
    """Streaming per-feature mean/variance (Welford) for standardization."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.count < 1:
            return np.zeros_like(x)
        variance = self.m2 / self.count
        return (x - self.mean) / np.sqrt(variance + 1e-8)

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "_RunningStats":
        stats = cls(len(state["mean"]))
        stats.count = state["count"]
        stats.mean = np.array(state["mean"], dtype=float)
        stats.m2 = np.array(state["m2"], dtype=float)
        return stats


class _Head:
    """One linear model trained by plain SGD on standardized features."""

    def __init__(self, dim: int, kind: str, learning_rate: float):
        self.kind = kind  # "log" regression or "logistic" classification
        self.lr = learning_rate
        self.weights = np.zeros(dim)
        self.bias = 0.0

    def _link(self, x: np.ndarray) -> float:
        raw = float(self.weights @ x + self.bias)
        return max(-_MAX_LINK, min(_MAX_LINK, raw))

    def predict(self, x: np.ndarray) -> float:
        link = self._link(x)
        if self.kind == "logistic":
            return 1.0 / (1.0 + math.exp(-link))
        return max(0.0, math.expm1(link))

    def update(self, x: np.ndarray, target: float) -> None:
        link = self._link(x)
        if self.kind == "logistic":
            error = 1.0 / (1.0 + math.exp(-link)) - target
        else:
            error = link - math.log1p(max(0.0, target))
        self.weights -= self.lr * error * x
        self.bias -= self.lr * error

    def state(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "weights": self.weights.tolist(), "bias": self.bias}

    @classmethod
    def from_state(cls, state: dict) -> "_Head":
        head = cls(len(state["weights"]), state["kind"], state["lr"])
        head.weights = np.array(state["weights"], dtype=float)
        head.bias = state["bias"]
        return head


class AgentPredictor:
    """Latency, cost and quality heads for a single agent."""

    def __init__(self, dim: int, priors: QosEstimate, learning_rate: float):
        self.priors = priors
        self.observations = 0
        self.stats = _RunningStats(dim)
        self.latency_head = _Head(dim, "log", learning_rate)
        self.cost_head = _Head(dim, "log", learning_rate)
        self.quality_head = _Head(dim, "logistic", learning_rate)

    def predict(self, x: np.ndarray, min_observations: int) -> QosEstimate:
        if self.observations < min_observations:
            return self.priors
        z = self.stats.standardize(x)
        return QosEstimate(
            latency_ms=self.latency_head.predict(z),
            cost=self.cost_head.predict(z),
            quality=min(1.0, max(0.0, self.quality_head.predict(z))),
        )

    def update(self, x: np.ndarray, obs: Observation) -> None:
        # Stats first so the very first sample standardizes to zero.
        self.stats.update(x)
        z = self.stats.standardize(x)
        self.latency_head.update(z, obs.latency_ms)
        self.cost_head.update(z, obs.cost)
        self.quality_head.update(z, 1.0 if obs.correct else 0.0)
        self.observations += 1

    def state(self) -> dict:
        return {
            "priors": [self.priors.latency_ms, self.priors.cost, self.priors.quality],
            "observations": self.observations,
            "stats": self.stats.state(),
            "latency": self.latency_head.state(),
            "cost": self.cost_head.state(),
            "quality": self.quality_head.state(),
        }

    @classmethod
    def from_state(cls, state: dict, dim: int) -> "AgentPredictor":
        priors = QosEstimate(*state["priors"])
        predictor = cls(dim, priors, state["latency"]["lr"])
        predictor.observations = state["observations"]
        predictor.stats = _RunningStats.from_state(state["stats"])
        predictor.latency_head = _Head.from_state(state["latency"])
        predictor.cost_head = _Head.from_state(state["cost"])
        predictor.quality_head = _Head.from_state(state["quality"])
        return predictor


class PredictorPool:
    """Independent per-agent predictors behind one routing-facing interface."""

    def __init__(
        self,
        domains: Sequence[str],
        learning_rate: float = DEFAULT_LEARNING_RATE,
        min_observations: int = DEFAULT_MIN_OBSERVATIONS,
        priors: QosEstimate = QosEstimate(400.0, 10.0, 0.5),
    ):
        self.domains = tuple(domains)
        self.learning_rate = learning_rate
        self.min_observations = min_observations
        self.default_priors = priors
        self._agents: dict[str, AgentPredictor] = {}

    @property
    def dim(self) -> int:
        return len(NUMERIC_FEATURES) + len(self.domains) + 1

    def add_agent(self, agent_id: str, priors: QosEstimate | None = None) -> None:
        self._agents[agent_id] = AgentPredictor(
            self.dim, priors or self.default_priors, self.learning_rate
        )

    def _agent(self, agent_id: str) -> AgentPredictor:
        try:
            return self._agents[agent_id]
        except KeyError:
            raise PredictorError(f"unknown agent {agent_id!r}") from None

    def predict(self, agent_id: str, x: FeatureVector) -> QosEstimate:
        return self._agent(agent_id).predict(x.to_array(self.domains), self.min_observations)

    def update(self, agent_id: str, x: FeatureVector, obs: Observation) -> None:
        self._agent(agent_id).update(x.to_array(self.domains), obs)

    def observation_count(self, agent_id: str) -> int:
        return self._agent(agent_id).observations

    def priors(self, agent_id: str) -> QosEstimate:
        return self._agent(agent_id).priors

    # -- snapshot / restore -------------------------------------------------

    def snapshot(self) -> str:
        return json.dumps(
            {
                "version": SNAPSHOT_VERSION,
                "domains": list(self.domains),
                "learning_rate": self.learning_rate,
                "min_observations": self.min_observations,
                "priors": [
                    self.default_priors.latency_ms,
                    self.default_priors.cost,
                    self.default_priors.quality,
                ],
                "agents": {a: p.state() for a, p in self._agents.items()},
            }
        )

    @classmethod
    def restore(cls, blob: str) -> "PredictorPool":
        state = json.loads(blob)
        if state.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported predictor snapshot version {state.get('version')!r}")
        pool = cls(
            domains=state["domains"],
            learning_rate=state["learning_rate"],
            min_observations=state["min_observations"],
            priors=QosEstimate(*state["priors"]),
        )
        for agent_id, agent_state in state["agents"].items():
            pool._agents[agent_id] = AgentPredictor.from_state(agent_state, pool.dim)
        return pool


def warmup(pool: PredictorPool, ledger, agents: Sequence, dialogues: Sequence, *, now: float = 0.0) -> int:
    """Seed predictors and the ledger by running dialogues round-robin.

    ``agents`` are executable simulated agents (profile plus ``execute``);
    dialogue ``k`` goes to agent ``k % len(agents)`` and all of its turns run
    there back to back.  Latency labels are capped at the agent's prior so a
    slow first prefill cannot poison the model.  Returns the number of
    observations fed to the pool.
    """
    if not agents or not dialogues:
        return 0
    fed = 0
    for k, dialogue in enumerate(dialogues):
        agent = agents[k % len(agents)]
        agent_id = agent.profile.id
        prior_latency = pool.priors(agent_id).latency_ms
        for turn in range(1, len(dialogue.turns) + 1):
            prompt = dialogue.prompt_for_turn(turn)
            score = ledger.compute_affinity(agent_id, dialogue.dialogue_id, prompt)
            x = FeatureVector(
                prompt_chars=len(prompt),
                turn_index=turn,
                affinity=score.ratio,
                router_inflight=0,
                router_rate=0.0,
                agent_inflight=0,
                agent_rate=0.0,
                capacity=agent.profile.capacity,
                utilization=0.0,
                domain_tag=dialogue.domain,
            )
            gold = dialogue.turns[turn - 1][1]
            result = agent.execute(
                prompt, dialogue.dialogue_id, domain_tag=dialogue.domain, gold=gold, now=now
            )
            agent.finish()
            obs = Observation(
                latency_ms=min(result.latency_ms, prior_latency),
                prompt_tokens=result.prompt_tokens,
                hit_tokens=result.hit_tokens,
                gen_tokens=result.gen_tokens,
                cost=result.cost,
                correct=result.correct,
            )
            pool.update(agent_id, x, obs)
            ledger.record_prompt(agent_id, dialogue.dialogue_id, prompt, now)
            fed += 1
    return fed
