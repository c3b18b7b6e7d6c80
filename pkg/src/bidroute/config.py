"""Experiment configuration: dataclasses, JSON round-trip, validation, presets.

Every tunable named elsewhere in the package (batcher thresholds, predictor
hyper-parameters, valuation constants, ledger bounds, market sizes, seeds)
lives here so a single JSON file pins a whole run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .predictor import PricingProfile, QosEstimate, ValuationConfig


class ConfigError(ValueError):
    """Raised with the offending field's path when a config is invalid."""


@dataclass
class LatencyModel:
    """Affine prefill latency plus a linear queueing term, in milliseconds."""

    prefill_ms_per_token: float = 0.8
    fixed_ms: float = 30.0
    queue_ms_per_inflight: float = 15.0
    decode_ms_per_token: float = 5.0
    jitter: float = 0.1


@dataclass
class QualityModel:
    acc_match: float = 0.9
    acc_off: float = 0.75


@dataclass
class AgentSpec:
    """Static profile of one simulated serving agent."""

    id: str
    domain: str
    scale: float = 1.0
    capacity: int = 4
    prices: PricingProfile = field(default_factory=lambda: PricingProfile(0.01, 0.0025, 0.02))
    latency: LatencyModel = field(default_factory=LatencyModel)
    quality: QualityModel = field(default_factory=QualityModel)
    cache_tokens: int = 800
    prior_latency_ms: float | None = None
    prior_cost: float | None = None
    prior_quality: float | None = None


@dataclass
class BatcherSettings:
    max_batch_size: int = 16
    max_wait_ms: float = 10.0
    queue_bound: int = 1024


@dataclass
class PredictorSettings:
    learning_rate: float = 0.05
    min_observations: int = 5
    prior_latency_ms: float = 400.0
    prior_cost: float = 10.0
    prior_quality: float = 0.5
    rate_window_s: float = 10.0


@dataclass
class LedgerSettings:
    capacity: int = 10_000
    evict_threshold: float = 0.5


@dataclass
class RouterSettings:
    policy: str = "auction"
    max_retries: int = 3
    warm_start_payments: bool = False


@dataclass
class HubSettings:
    k: int = 1
    scheme: str = "domain"


@dataclass
class WorkloadSettings:
    n_dialogues: int = 40
    turns_per_dialogue: int = 8
    domain_mix: dict[str, float] = field(
        default_factory=lambda: {"code": 1.0, "math": 1.0, "qa": 1.0}
    )
    concurrency: int = 10
    gen_tokens_min: int = 8
    gen_tokens_max: int = 32
    warmup_dialogues_per_agent: int = 3
    warmup_turns: int = 4


@dataclass
class StrategySettings:
    """Bidding-strategy experiment: contended repeated auction rounds."""

    rounds: int = 100
    aggressive_factor: float = 1.5
    conservative_factor: float = 0.6
    random_low: float = 0.5
    random_high: float = 1.5
    value_low: float = 0.9
    value_high: float = 1.1


@dataclass
class MarketSettings:
    """Synthetic one-round market for clustering experiments."""

    agents: int = 100
    tasks: int = 200
    domains: int = 10
    capacity_min: int = 1
    capacity_max: int = 3
    welfare_match_low: float = 2.0
    welfare_match_high: float = 10.0
    welfare_cross_low: float = -5.0
    welfare_cross_high: float = 2.5
    k: int = 5
    k_values: list[int] = field(default_factory=lambda: [1, 2, 4, 5])


@dataclass
class ExperimentConfig:
    kind: str = "efficiency"
    seed: int = 0
    agents: list[AgentSpec] = field(default_factory=list)
    batcher: BatcherSettings = field(default_factory=BatcherSettings)
    predictor: PredictorSettings = field(default_factory=PredictorSettings)
    valuation: ValuationConfig = field(default_factory=ValuationConfig)
    ledger: LedgerSettings = field(default_factory=LedgerSettings)
    router: RouterSettings = field(default_factory=RouterSettings)
    hubs: HubSettings = field(default_factory=HubSettings)
    workload: WorkloadSettings = field(default_factory=WorkloadSettings)
    strategy: StrategySettings = field(default_factory=StrategySettings)
    market: MarketSettings = field(default_factory=MarketSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


EXPERIMENT_KINDS = ("efficiency", "truthfulness", "cluster_sweep", "scheme_compare", "predictor_eval")
POLICIES = ("auction", "random", "round_robin", "greedy_affinity")
HUB_SCHEMES = ("domain", "full_mix", "ideal", "task_mix", "agent_mix")


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        sub = f"{path}.{name}"
        if f.type in ("PricingProfile",) or f.name == "prices":
            kwargs[name] = _from_dict(PricingProfile, value, sub)
        elif f.name == "latency" and cls is AgentSpec:
            kwargs[name] = _from_dict(LatencyModel, value, sub)
        elif f.name == "quality" and cls is AgentSpec:
            kwargs[name] = _from_dict(QualityModel, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


_SECTIONS = {
    "batcher": BatcherSettings,
    "predictor": PredictorSettings,
    "valuation": ValuationConfig,
    "ledger": LedgerSettings,
    "router": RouterSettings,
    "hubs": HubSettings,
    "workload": WorkloadSettings,
    "strategy": StrategySettings,
    "market": MarketSettings,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    cfg = ExperimentConfig()
    for key, value in data.items():
        if key in ("kind", "seed"):
            setattr(cfg, key, value)
        elif key == "agents":
            if not isinstance(value, list):
                raise ConfigError("agents: expected a list")
            cfg.agents = [_from_dict(AgentSpec, item, f"agents[{i}]") for i, item in enumerate(value)]
        elif key in _SECTIONS:
            setattr(cfg, key, _from_dict(_SECTIONS[key], value, key))
        else:
            raise ConfigError(f"{key}: unknown field")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
    cfg = config_from_dict(data)
    validate_config(cfg)
    return cfg


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json() + "\n")


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()


def _require(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{path}: {message}")


def validate_config(cfg: ExperimentConfig) -> None:
    _require(cfg.kind in EXPERIMENT_KINDS, "kind", f"must be one of {EXPERIMENT_KINDS}")
    _require(isinstance(cfg.seed, int), "seed", "must be an integer")
    _require(cfg.router.policy in POLICIES, "router.policy", f"must be one of {POLICIES}")
    _require(cfg.router.max_retries >= 0, "router.max_retries", "must be >= 0")
    _require(cfg.batcher.max_batch_size >= 1, "batcher.max_batch_size", "must be >= 1")
    _require(cfg.batcher.max_wait_ms >= 0, "batcher.max_wait_ms", "must be >= 0")
    _require(cfg.batcher.queue_bound >= 1, "batcher.queue_bound", "must be >= 1")
    _require(cfg.predictor.learning_rate >= 0, "predictor.learning_rate", "must be >= 0")
    _require(cfg.predictor.min_observations >= 0, "predictor.min_observations", "must be >= 0")
    _require(cfg.predictor.rate_window_s > 0, "predictor.rate_window_s", "must be positive")
    _require(0.0 <= cfg.predictor.prior_quality <= 1.0, "predictor.prior_quality", "must be in [0, 1]")
    try:
        cfg.valuation.validate()
    except ValueError as exc:
        raise ConfigError(f"valuation: {exc}") from None
    _require(cfg.ledger.capacity >= 1, "ledger.capacity", "must be >= 1")
    _require(0.0 <= cfg.ledger.evict_threshold <= 1.0, "ledger.evict_threshold", "must be in [0, 1]")
    _require(cfg.hubs.scheme in HUB_SCHEMES, "hubs.scheme", f"must be one of {HUB_SCHEMES}")
    _require(cfg.hubs.k >= 1, "hubs.k", "must be >= 1")
    _require(cfg.workload.n_dialogues >= 0, "workload.n_dialogues", "must be >= 0")
    _require(cfg.workload.turns_per_dialogue >= 1, "workload.turns_per_dialogue", "must be >= 1")
    _require(cfg.workload.concurrency >= 1, "workload.concurrency", "must be >= 1")
    _require(bool(cfg.workload.domain_mix), "workload.domain_mix", "must not be empty")
    for domain, weight in cfg.workload.domain_mix.items():
        _require(weight >= 0, f"workload.domain_mix.{domain}", "weight must be >= 0")
    _require(
        0 < cfg.workload.gen_tokens_min <= cfg.workload.gen_tokens_max,
        "workload.gen_tokens_min",
        "need 0 < min <= max",
    )
    _require(cfg.strategy.rounds >= 1, "strategy.rounds", "must be >= 1")
    _require(cfg.strategy.aggressive_factor > 1.0, "strategy.aggressive_factor", "must be > 1")
    _require(
        0.0 < cfg.strategy.conservative_factor < 1.0,
        "strategy.conservative_factor",
        "must be in (0, 1)",
    )
    _require(
        0.0 <= cfg.strategy.random_low <= cfg.strategy.random_high,
        "strategy.random_low",
        "need 0 <= low <= high",
    )
    _require(cfg.market.agents >= 1, "market.agents", "must be >= 1")
    _require(cfg.market.tasks >= 1, "market.tasks", "must be >= 1")
    _require(cfg.market.domains >= 2, "market.domains", "must be >= 2")
    _require(
        1 <= cfg.market.capacity_min <= cfg.market.capacity_max,
        "market.capacity_min",
        "need 1 <= min <= max",
    )
    _require(bool(cfg.market.k_values), "market.k_values", "must not be empty")
    for k in cfg.market.k_values:
        _require(1 <= k <= cfg.market.domains, "market.k_values", f"k={k} outside [1, domains]")
    _require(1 <= cfg.market.k <= cfg.market.domains, "market.k", "must be in [1, domains]")
    seen_ids = set()
    for i, agent in enumerate(cfg.agents):
        path = f"agents[{i}]"
        _require(bool(agent.id), f"{path}.id", "must not be empty")
        _require(agent.id not in seen_ids, f"{path}.id", "duplicate agent id")
        seen_ids.add(agent.id)
        _require(agent.capacity >= 1, f"{path}.capacity", "must be >= 1")
        _require(agent.cache_tokens >= 0, f"{path}.cache_tokens", "must be >= 0")
        _require(0.0 <= agent.quality.acc_match <= 1.0, f"{path}.quality.acc_match", "must be in [0, 1]")
        _require(0.0 <= agent.quality.acc_off <= 1.0, f"{path}.quality.acc_off", "must be in [0, 1]")
        _require(0.0 <= agent.latency.jitter < 1.0, f"{path}.latency.jitter", "must be in [0, 1)")
        try:
            agent.prices.validate()
        except ValueError as exc:
            raise ConfigError(f"{path}.prices: {exc}") from None


def agent_priors(agent: AgentSpec, settings: PredictorSettings) -> QosEstimate:
    """Per-agent cold-start priors, falling back to the pool-wide defaults."""
    return QosEstimate(
        latency_ms=agent.prior_latency_ms if agent.prior_latency_ms is not None else settings.prior_latency_ms,
        cost=agent.prior_cost if agent.prior_cost is not None else settings.prior_cost,
        quality=agent.prior_quality if agent.prior_quality is not None else settings.prior_quality,
    )


def default_config(kind: str = "efficiency", seed: int = 0) -> ExperimentConfig:
    """Desk-scale preset for each experiment kind."""
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"kind: must be one of {EXPERIMENT_KINDS}")
    cfg = ExperimentConfig(kind=kind, seed=seed)
    if kind in ("efficiency", "predictor_eval"):
        cfg.agents = [
            AgentSpec(id="agent-code", domain="code", scale=1.0, capacity=4),
            AgentSpec(id="agent-math", domain="math", scale=1.0, capacity=4),
            AgentSpec(id="agent-qa", domain="qa", scale=0.8, capacity=4),
        ]
    elif kind == "truthfulness":
        cfg.agents = [
            AgentSpec(id="agent-1", domain="general", capacity=1),
            AgentSpec(id="agent-2", domain="general", capacity=1),
        ]
        cfg.workload = WorkloadSettings(
            n_dialogues=0,
            turns_per_dialogue=1,
            domain_mix={"general": 1.0},
            concurrency=4,
            warmup_dialogues_per_agent=3,
            warmup_turns=2,
        )
    return cfg
