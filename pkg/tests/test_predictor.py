"""Tests for online QoS prediction, cost accounting and valuation."""

import math
import random
from dataclasses import dataclass

import pytest

from bidroute.predictor import (
    FeatureVector,
    Observation,
    PredictorError,
    PredictorPool,
    PricingProfile,
    QosEstimate,
    ValuationConfig,
    featurize,
    observed_cost,
    valuation,
)


def feature(**overrides):
    base = dict(
        prompt_chars=120,
        turn_index=2,
        affinity=0.5,
        router_inflight=3,
        router_rate=1.5,
        agent_inflight=1,
        agent_rate=0.5,
        capacity=4,
        utilization=0.25,
        domain_tag="code",
    )
    base.update(overrides)
    return FeatureVector(**base)


def make_pool(**kwargs):
    pool = PredictorPool(domains=("code", "math"), **kwargs)
    pool.add_agent("a1")
    pool.add_agent("a2")
    return pool


def observation(latency=100.0, cost=2.0, correct=True):
    return Observation(
        latency_ms=latency, prompt_tokens=30, hit_tokens=10, gen_tokens=20, cost=cost, correct=correct
    )


@dataclass
class _FakeProfile:
    capacity: int


class _FakeAgentState:
    def __init__(self, inflight, capacity, rate=0.0):
        self._inflight = inflight
        self.profile = _FakeProfile(capacity)
        self._rate = rate

    def committed(self):
        return self._inflight

    def rate(self):
        return self._rate


@dataclass
class _FakeLoad:
    inflight: int
    rate: float


@dataclass
class _FakeRequest:
    prompt: str
    turn_number: int
    domain_tag: str


class TestFeaturize:
    def test_utilization(self):
        x = featurize(
            _FakeRequest("p" * 10, 1, "code"),
            _FakeAgentState(inflight=3, capacity=4),
            affinity=0.0,
            load=_FakeLoad(0, 0.0),
        )
        assert x.utilization == 0.75

    def test_zero_capacity_guard(self):
        x = featurize(
            _FakeRequest("p", 1, "code"),
            _FakeAgentState(inflight=2, capacity=0),
            affinity=0.0,
            load=_FakeLoad(0, 0.0),
        )
        assert x.utilization == 2.0

    def test_fresh_system(self):
        x = featurize(
            _FakeRequest("hello", 1, "code"),
            _FakeAgentState(inflight=0, capacity=4),
            affinity=0.0,
            load=_FakeLoad(0, 0.0),
        )
        assert (x.router_inflight, x.router_rate, x.turn_index) == (0, 0.0, 1)

    def test_one_hot_known_and_unknown_domains(self):
        domains = ("code", "math")
        known = feature(domain_tag="math").to_array(domains)
        unknown = feature(domain_tag="poetry").to_array(domains)
        assert list(known[-3:]) == [0.0, 1.0, 0.0]
        assert list(unknown[-3:]) == [0.0, 0.0, 1.0]


class TestObservedCost:
    def test_worked_example(self):
        prices = PricingProfile(miss=2.0, hit=1.0, out=3.0)
        assert observed_cost(10, 4, 5, prices) == 31.0

    def test_full_cache_hit_drops_miss_term(self):
        prices = PricingProfile(miss=2.0, hit=1.0, out=3.0)
        assert observed_cost(10, 10, 5, prices) == 10.0 + 15.0

    def test_zero_counts(self):
        assert observed_cost(0, 0, 0, PricingProfile(2.0, 1.0, 3.0)) == 0.0

    def test_hit_exceeding_prompt_rejected(self):
        with pytest.raises(ValueError, match="exceed"):
            observed_cost(5, 6, 0, PricingProfile(2.0, 1.0, 3.0))

    def test_linear_in_each_count_and_price_scaling(self):
        prices = PricingProfile(miss=2.0, hit=0.5, out=3.0)
        rng = random.Random(3)
        for _ in range(50):
            p = rng.randint(0, 50)
            h = rng.randint(0, p) if p else 0
            g = rng.randint(0, 50)
            base = observed_cost(p, h, g, prices)
            assert observed_cost(p, h, g + 1, prices) == pytest.approx(base + prices.out)
            scaled = PricingProfile(prices.miss * 3, prices.hit * 3, prices.out * 3)
            assert observed_cost(p, h, g, scaled) == pytest.approx(3 * base)

    def test_price_profile_validation(self):
        with pytest.raises(ValueError, match="cached"):
            PricingProfile(miss=1.0, hit=2.0, out=0.0).validate()


class TestValuation:
    def test_worked_example(self):
        cfg = ValuationConfig(delta=0.5, latency_ref_ms=1000.0, value_scale=20.0)
        v = valuation(QosEstimate(latency_ms=200.0, cost=0.0, quality=0.8), cfg)
        assert v == pytest.approx(20.0 * (0.4 - 0.1))

    def test_quality_only_when_delta_is_one(self):
        cfg = ValuationConfig(delta=1.0)
        fast = valuation(QosEstimate(10.0, 0.0, 0.7), cfg)
        slow = valuation(QosEstimate(5000.0, 0.0, 0.7), cfg)
        assert fast == slow == pytest.approx(20.0 * 0.7)

    def test_zero_delta_zero_latency(self):
        assert valuation(QosEstimate(0.0, 0.0, 0.9), ValuationConfig(delta=0.0)) == 0.0

    def test_monotone_in_quality_and_latency(self):
        cfg = ValuationConfig(delta=0.5)
        better_quality = valuation(QosEstimate(100.0, 0.0, 0.9), cfg)
        worse_quality = valuation(QosEstimate(100.0, 0.0, 0.4), cfg)
        assert better_quality > worse_quality
        faster = valuation(QosEstimate(100.0, 0.0, 0.5), cfg)
        slower = valuation(QosEstimate(900.0, 0.0, 0.5), cfg)
        assert faster > slower
        # Latency saturates at the reference point.
        assert valuation(QosEstimate(2000.0, 0.0, 0.5), cfg) == valuation(
            QosEstimate(5000.0, 0.0, 0.5), cfg
        )


class TestPredict:
    def test_cold_start_returns_priors(self):
        pool = make_pool(priors=QosEstimate(400.0, 10.0, 0.5))
        assert pool.predict("a1", feature()) == QosEstimate(400.0, 10.0, 0.5)

    def test_unknown_agent_rejected(self):
        with pytest.raises(PredictorError, match="unknown agent"):
            make_pool().predict("nope", feature())

    def test_converges_to_constant_target(self):
        # Oracle: with a constant feature the standardized input is the zero
        # vector, so only the bias learns; iterate that recurrence directly.
        pool = make_pool()
        x = feature()
        lr = pool.learning_rate
        bias = 0.0
        for _ in range(500):
            pool.update("a1", x, observation(latency=100.0, cost=2.0))
            bias -= lr * (bias - math.log1p(100.0))
        predicted = pool.predict("a1", x)
        assert predicted.latency_ms == pytest.approx(math.expm1(bias), rel=1e-9)
        assert predicted.latency_ms == pytest.approx(100.0, rel=0.05)
        assert predicted.cost == pytest.approx(2.0, rel=0.05)

    def test_quality_always_in_unit_interval(self):
        pool = make_pool()
        rng = random.Random(5)
        x = feature()
        for _ in range(200):
            pool.update(
                "a1",
                feature(prompt_chars=rng.randint(1, 2000), affinity=rng.random()),
                observation(latency=rng.uniform(1, 5000), correct=rng.random() < 0.5),
            )
        assert 0.0 <= pool.predict("a1", x).quality <= 1.0


class TestUpdate:
    def test_monotone_convergence_toward_target(self):
        pool = make_pool()
        x = feature()
        errors = []
        for _ in range(50):
            pool.update("a1", x, observation(latency=250.0))
            errors.append(abs(pool._agent("a1").latency_head.bias - math.log1p(250.0)))
        assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))

    def test_per_agent_isolation(self):
        pool = make_pool()
        x = feature()
        for _ in range(20):
            pool.update("a1", x, observation(latency=50.0))
        assert pool.predict("a2", x) == pool.default_priors
        assert pool.observation_count("a2") == 0

    def test_zero_learning_rate_never_changes_predictions(self):
        pool = make_pool(learning_rate=0.0, min_observations=0)
        x = feature()
        before = pool.predict("a1", x)
        for _ in range(20):
            pool.update("a1", x, observation(latency=999.0))
        assert pool.predict("a1", x) == before

    def test_deterministic_given_update_order(self):
        def run():
            pool = make_pool()
            rng = random.Random(9)
            for _ in range(100):
                pool.update(
                    "a1",
                    feature(prompt_chars=rng.randint(1, 500)),
                    observation(latency=rng.uniform(10, 400), cost=rng.uniform(0.1, 5)),
                )
            return pool.snapshot()

        assert run() == run()


class TestSnapshot:
    def test_round_trip_is_lossless(self):
        pool = make_pool()
        rng = random.Random(21)
        for _ in range(60):
            pool.update(
                "a1",
                feature(prompt_chars=rng.randint(1, 500), affinity=rng.random()),
                observation(latency=rng.uniform(5, 800), cost=rng.uniform(0.01, 9)),
            )
        restored = PredictorPool.restore(pool.snapshot())
        x = feature(prompt_chars=333)
        assert restored.predict("a1", x) == pool.predict("a1", x)
        assert restored.snapshot() == pool.snapshot()

    def test_version_checked(self):
        blob = make_pool().snapshot().replace('"version": 1', '"version": 99')
        with pytest.raises(ValueError, match="version"):
            PredictorPool.restore(blob)
