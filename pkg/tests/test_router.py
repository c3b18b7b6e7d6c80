"""Tests for micro-batching, the routing pipeline and slot accounting."""

import dataclasses

import pytest

from bidroute.config import AgentSpec, ExperimentConfig, PredictorSettings, default_config
from bidroute.predictor import Observation
from bidroute.router import (
    METRICS_COLUMNS,
    AgentProfile,
    AgentState,
    HubConfig,
    MicroBatcher,
    PendingRequest,
    QueueFullError,
    ResponseSlot,
    Router,
    RouterError,
    TRACE_HEADER_DIALOGUE_ID,
    TRACE_HEADER_RUN_ID,
    TRACE_HEADER_SOURCE,
    TRACE_HEADER_TURN_NUMBER,
    VirtualClock,
    build_hubs,
    classify_request,
    request_from_envelope,
    serialize_messages,
)


def request(rid="r1", dialogue="d1", turn=1, domain="code", prompt="user: hello", **kw):
    return PendingRequest(
        request_id=rid,
        run_id="test",
        dialogue_id=dialogue,
        turn_number=turn,
        source="test",
        domain_tag=domain,
        prompt=prompt,
        **kw,
    )


def make_cfg(agents=None, **router_kw):
    cfg = ExperimentConfig()
    cfg.agents = agents or [AgentSpec(id="a1", domain="code", capacity=2)]
    # Warm priors so cold-start welfare is positive and exactly predictable.
    cfg.predictor = PredictorSettings(prior_latency_ms=100.0, prior_cost=2.0, prior_quality=0.8)
    if router_kw:
        cfg.router = dataclasses.replace(cfg.router, **router_kw)
    return cfg


def make_router(cfg, k=1, scheme="domain"):
    profiles = [
        AgentProfile(a.id, a.scale, a.domain, a.capacity, a.prices) for a in cfg.agents
    ]
    clock = VirtualClock()
    dispatched = []
    router = Router(
        cfg,
        profiles,
        build_hubs(profiles, k, scheme),
        clock,
        transport=dispatched.append,
        run_id="test",
    )
    return router, clock, dispatched


# Prior QoS (100ms, cost 2, quality 0.8) scalarizes to v = 20*(0.4 - 0.05).
PRIOR_VALUE = 7.0
PRIOR_COST = 2.0


class TestBatcher:
    def test_size_threshold(self):
        b = MicroBatcher(max_batch_size=16, max_wait_ms=10, queue_bound=100)
        for i in range(16):
            b.submit(request(rid=f"r{i}"))
        batches = b.form_batches(now=0.0)
        assert len(batches) == 1
        assert batches[0].reason == "size"
        assert len(batches[0].requests) == 16

    def test_timeout_threshold(self):
        b = MicroBatcher(max_batch_size=16, max_wait_ms=10, queue_bound=100)
        for i in range(5):
            b.submit(request(rid=f"r{i}"))
        assert b.form_batches(now=0.005) == []
        batches = b.form_batches(now=0.010)
        assert len(batches) == 1
        assert batches[0].reason == "timeout"
        assert len(batches[0].requests) == 5

    def test_thirty_three_rapid_submits(self):
        b = MicroBatcher(max_batch_size=16, max_wait_ms=10, queue_bound=100)
        for i in range(33):
            b.submit(request(rid=f"r{i}"))
        batches = b.form_batches(now=0.0)
        assert [len(x.requests) for x in batches] == [16, 16]
        assert len(b) == 1

    def test_queue_bound(self):
        b = MicroBatcher(max_batch_size=16, max_wait_ms=10, queue_bound=1)
        b.submit(request(rid="r0"))
        with pytest.raises(QueueFullError):
            b.submit(request(rid="r1"))

    def test_fifo_preserved_through_requeue(self):
        b = MicroBatcher(max_batch_size=16, max_wait_ms=10, queue_bound=10)
        reqs = [request(rid=f"r{i}") for i in range(3)]
        for r in reqs:
            b.submit(r)
        (batch,) = b.form_batches(now=1.0)
        b.requeue_front(list(batch.requests))
        (again,) = b.form_batches(now=1.0)
        assert [r.request_id for r in again.requests] == ["r0", "r1", "r2"]


class TestEnvelope:
    def test_headers_and_body(self):
        headers = {
            TRACE_HEADER_RUN_ID: "exp7",
            TRACE_HEADER_DIALOGUE_ID: "dlg42",
            TRACE_HEADER_TURN_NUMBER: "3",
            TRACE_HEADER_SOURCE: "coqa",
        }
        body = {
            "messages": [
                {"role": "user", "content": "q1"},
                {"role": "assistant", "content": "a1"},
                {"role": "user", "content": "q2"},
            ],
            "domain_tag": "qa",
            "report_factor": 1.25,
        }
        req = request_from_envelope(headers, body, arrival_time=2.0)
        assert req.run_id == "exp7"
        assert req.dialogue_id == "dlg42"
        assert req.turn_number == 3
        assert req.source == "coqa"
        assert req.domain_tag == "qa"
        assert req.report_factor == 1.25
        assert req.prompt == "user: q1\nassistant: a1\nuser: q2"

    def test_serialization_extends_as_prefix(self):
        messages = [{"role": "user", "content": "one"}]
        shorter = serialize_messages(messages)
        longer = serialize_messages(messages + [{"role": "assistant", "content": "two"}])
        assert longer.startswith(shorter) and len(longer) > len(shorter)

    def test_invalid_requests_rejected(self):
        with pytest.raises(RouterError):
            request(turn=0)
        with pytest.raises(RouterError):
            request(prompt="")


class TestHubs:
    def profiles(self):
        return [
            AgentProfile("a1", 1.0, "code", 2, None),
            AgentProfile("a2", 1.0, "math", 2, None),
            AgentProfile("a3", 1.0, "code", 2, None),
            AgentProfile("a4", 1.0, "math", 2, None),
        ]

    def test_domain_scheme_two_hubs(self):
        hubs = build_hubs(self.profiles(), 2, "domain")
        assert hubs.membership == {"a1": 0, "a3": 0, "a2": 1, "a4": 1}
        assert hubs.domain_map == {"code": 0, "math": 1}

    def test_single_hub_is_global(self):
        hubs = build_hubs(self.profiles(), 1, "domain")
        assert set(hubs.membership.values()) == {0}
        assert classify_request(request(domain="anything"), hubs) == 0

    def test_full_mix_round_robin(self):
        hubs = build_hubs(self.profiles(), 2, "full_mix")
        assert hubs.membership == {"a1": 0, "a2": 1, "a3": 0, "a4": 1}
        assert hubs.domain_map == {"mix0": 0, "mix1": 1}

    def test_classify_known_and_unknown(self):
        hubs = HubConfig(k=2, membership={}, domain_map={"code": 1, "math": 0})
        assert classify_request(request(domain="code"), hubs) == 1
        assert classify_request(request(domain="poetry"), hubs) == 0

    def test_route_tag_overrides_domain(self):
        hubs = HubConfig(k=2, membership={}, domain_map={"code": 1, "mix0": 0})
        assert classify_request(request(domain="code", route_tag="mix0"), hubs) == 0

    def test_k_exceeding_domains_rejected(self):
        with pytest.raises(RouterError, match="exceeds"):
            build_hubs(self.profiles(), 3, "domain")


class TestAgentState:
    def test_capacity_accounting(self):
        state = AgentState(AgentProfile("a", 1.0, "code", 2, None), hub_id=0)
        state.reserve()
        state.mark_dispatched(0.0)
        state.reserve()
        assert state.committed() == 2 and state.free_slots() == 0
        with pytest.raises(RouterError, match="over capacity"):
            state.reserve()
        state.release()
        assert state.inflight == 0 and state.reserved == 1

    def test_rate_window(self):
        state = AgentState(AgentProfile("a", 1.0, "code", 5, None), hub_id=0, rate_window_s=10.0)
        for t in (0.0, 1.0, 2.0):
            state.reserve()
            state.mark_dispatched(t)
        assert state.rate(2.0) == pytest.approx(0.3)
        assert state.rate(11.5) == pytest.approx(0.1)
        assert state.rate(20.0) == pytest.approx(0.0)


class TestRouteBatchAuction:
    def advance_and_process(self, router, clock, t=0.011):
        clock.advance_to(t)
        return router.process()

    def test_monopoly_pays_predicted_cost(self):
        router, clock, dispatched = make_router(make_cfg())
        router.submit(request())
        decisions = self.advance_and_process(router, clock)
        assert len(decisions) == 1
        d = decisions[0]
        assert d.agent_id == "a1" and not d.fallback
        assert d.payment == pytest.approx(PRIOR_COST)
        assert d.value_true == pytest.approx(PRIOR_VALUE)
        assert d.welfare == pytest.approx(PRIOR_VALUE - PRIOR_COST)
        assert dispatched == decisions

    def test_contention_prices_displaced_welfare(self):
        cfg = make_cfg(agents=[AgentSpec(id="a1", domain="code", capacity=1)])
        router, clock, _ = make_router(cfg)
        router.submit(request(rid="hi", dialogue="d1", value_scale=2.0))
        router.submit(request(rid="lo", dialogue="d2", value_scale=1.0))
        decisions = self.advance_and_process(router, clock)
        assert [d.request.request_id for d in decisions] == ["hi"]
        # Winner pays the loser's displaced welfare plus its own cost.
        loser_welfare = PRIOR_VALUE - PRIOR_COST
        assert decisions[0].payment == pytest.approx(loser_welfare + PRIOR_COST)
        assert router.pending() == 1

    def test_all_agents_at_capacity_requeues_everything(self):
        cfg = make_cfg(agents=[AgentSpec(id="a1", domain="code", capacity=1)])
        router, clock, _ = make_router(cfg)
        router.submit(request(rid="first"))
        first = self.advance_and_process(router, clock)
        assert len(first) == 1
        router.submit(request(rid="second", dialogue="d2"))
        clock.advance_to(0.030)
        assert router.process() == []
        assert router.pending() == 1

    def test_pruned_request_retries_then_falls_back(self):
        # A request whose every edge prices out never matches; after the
        # retry budget it is force-placed at predicted cost and flagged.
        cfg = make_cfg(agents=[AgentSpec(id="a1", domain="code", capacity=1)], max_retries=1)
        router, clock, _ = make_router(cfg)
        router.submit(request(rid="priced-out", value_scale=0.1))
        assert self.advance_and_process(router, clock, t=0.011) == []  # retry 1
        clock.advance_to(0.05)
        decisions = router.process()  # retry budget exhausted
        assert len(decisions) == 1
        assert decisions[0].fallback is True
        assert decisions[0].welfare < 0
        assert decisions[0].payment == pytest.approx(decisions[0].cost_pred)

    def test_negative_welfare_is_pruned(self):
        cfg = make_cfg()
        cfg.predictor = PredictorSettings(prior_latency_ms=900.0, prior_cost=50.0, prior_quality=0.1)
        cfg.router = dataclasses.replace(cfg.router, max_retries=0)
        router, clock, _ = make_router(cfg)
        router.submit(request())
        decisions = self.advance_and_process(router, clock)
        # No positive-welfare edge: the request falls back rather than matching.
        assert len(decisions) == 1 and decisions[0].fallback


def observation(latency=80.0, prompt_tokens=10, hit_tokens=0, gen_tokens=5, cost=1.5, correct=True):
    return Observation(
        latency_ms=latency,
        prompt_tokens=prompt_tokens,
        hit_tokens=hit_tokens,
        gen_tokens=gen_tokens,
        cost=cost,
        correct=correct,
    )


class TestCompletion:
    def route_one(self, cfg=None):
        router, clock, _ = make_router(cfg or make_cfg())
        router.submit(request())
        clock.advance_to(0.011)
        (decision,) = router.process()
        return router, clock, decision

    def test_slot_released_and_outcome_delivered(self):
        router, clock, decision = self.route_one()
        state = router.hubs[0].agents["a1"]
        assert state.inflight == 1
        outcome = router.on_completion(decision, observation(), 0.1, 0.12)
        assert state.inflight == 0
        assert decision.request.slot.done
        assert decision.request.slot.result(0) is outcome

    def test_completion_records_prompt_and_updates_predictor(self):
        router, clock, decision = self.route_one()
        hub = router.hubs[0]
        router.on_completion(decision, observation(hit_tokens=3), 0.1, 0.12)
        assert hub.ledger.get("a1", "d1") == "user: hello"
        assert hub.pool.observation_count("a1") == 1

    def test_stale_cache_report_evicts_ledger_entry(self):
        router, clock, decision = self.route_one()
        hub = router.hubs[0]
        # Seed a perfect-match entry, then report zero cached tokens.
        hub.ledger.record_prompt("a1", "d1", "user: hello")
        router.submit(request(rid="r2", turn=2))
        clock.advance_to(0.03)
        (second,) = router.process()
        assert second.affinity == 1.0
        router.on_completion(second, observation(hit_tokens=0), 0.1, 0.12)
        assert hub.ledger.get("a1", "d1") is None

    def test_two_completions_release_two_slots(self):
        router, clock, _ = make_router(make_cfg())
        router.submit(request(rid="r1", dialogue="d1"))
        router.submit(request(rid="r2", dialogue="d2"))
        clock.advance_to(0.011)
        decisions = router.process()
        state = router.hubs[0].agents["a1"]
        assert state.inflight == 2
        for d in decisions:
            router.on_completion(d, observation(), 0.1, 0.12)
        assert state.inflight == 0

    def test_exactly_once_outcome(self):
        router, clock, decision = self.route_one()
        router.on_completion(decision, observation(), 0.1, 0.12)
        with pytest.raises(RouterError, match="already resolved"):
            decision.request.slot.set(None)

    def test_metrics_row_shape(self):
        router, clock, decision = self.route_one()
        router.on_completion(decision, observation(), 0.1, 0.12)
        (row,) = router.metrics.rows
        assert set(METRICS_COLUMNS) <= set(row)
        assert row["agent_id"] == "a1"
        assert row["payment"] == pytest.approx(PRIOR_COST)


class TestBaselinePolicies:
    def two_agents(self):
        return [
            AgentSpec(id="a1", domain="code", capacity=2),
            AgentSpec(id="a2", domain="code", capacity=2),
        ]

    def test_round_robin_alternates(self):
        import numpy as np

        cfg = make_cfg(agents=self.two_agents(), policy="round_robin")
        router, clock, _ = make_router(cfg)
        router.policy_rng = np.random.default_rng(0)
        for i in range(4):
            router.submit(request(rid=f"r{i}", dialogue=f"d{i}"))
        clock.advance_to(0.011)
        decisions = router.process()
        assert [d.agent_id for d in decisions] == ["a1", "a2", "a1", "a2"]
        assert all(d.payment == pytest.approx(d.cost_pred) for d in decisions)

    def test_greedy_affinity_prefers_matching_prefix(self):
        cfg = make_cfg(agents=self.two_agents(), policy="greedy_affinity")
        router, clock, _ = make_router(cfg)
        router.hubs[0].ledger.record_prompt("a2", "d1", "user: hello")
        router.submit(request())
        clock.advance_to(0.011)
        (decision,) = router.process()
        assert decision.agent_id == "a2"
        assert decision.affinity == 1.0

    def test_greedy_affinity_tie_breaks_lowest_id(self):
        cfg = make_cfg(agents=self.two_agents(), policy="greedy_affinity")
        router, clock, _ = make_router(cfg)
        router.submit(request())
        clock.advance_to(0.011)
        (decision,) = router.process()
        assert decision.agent_id == "a1"

    def test_random_respects_capacity(self):
        import numpy as np

        cfg = make_cfg(agents=[AgentSpec(id="a1", domain="code", capacity=1)], policy="random")
        router, clock, _ = make_router(cfg)
        router.policy_rng = np.random.default_rng(0)
        router.submit(request(rid="r1", dialogue="d1"))
        router.submit(request(rid="r2", dialogue="d2"))
        clock.advance_to(0.011)
        decisions = router.process()
        assert len(decisions) == 1
        assert router.pending() == 1


class TestHubIsolation:
    def test_requests_stay_in_their_hub(self):
        cfg = make_cfg(
            agents=[
                AgentSpec(id="code-1", domain="code", capacity=2),
                AgentSpec(id="math-1", domain="math", capacity=2),
            ]
        )
        cfg.hubs = dataclasses.replace(cfg.hubs, k=2)
        router, clock, _ = make_router(cfg, k=2)
        router.submit(request(rid="m", dialogue="dm", domain="math"))
        router.submit(request(rid="c", dialogue="dc", domain="code"))
        clock.advance_to(0.011)
        decisions = router.process()
        by_request = {d.request.request_id: d.agent_id for d in decisions}
        assert by_request == {"m": "math-1", "c": "code-1"}


class TestResponseSlot:
    def test_result_timeout(self):
        slot = ResponseSlot()
        with pytest.raises(TimeoutError):
            slot.result(timeout=0.01)
        slot.set("done")
        assert slot.result(timeout=0) == "done"
