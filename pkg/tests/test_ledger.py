"""Tests for the prefix ledger and affinity scoring."""

import random
import string

import pytest

from bidroute.ledger import AffinityScore, PrefixLedger, lcp


class TestLcp:
    def test_shared_prefix(self):
        assert lcp("abcdef", "abcxyz") == 3

    def test_empty_string(self):
        assert lcp("", "anything") == 0
        assert lcp("anything", "") == 0

    def test_identity(self):
        s = "same text, exactly"
        assert lcp(s, s) == len(s)

    def test_no_normalization(self):
        assert lcp("Hello", "hello") == 0


class TestAffinity:
    def test_worked_example(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a1", "d1", "Hello world, Q1")
        score = ledger.compute_affinity("a1", "d1", "Hello world, Q1 A1 Q2")
        assert score == AffinityScore(ratio=15 / 21, lcp_chars=15, prompt_chars=21)

    def test_missing_entry_scores_zero(self):
        score = PrefixLedger().compute_affinity("a1", "d1", "anything")
        assert score.ratio == 0.0 and score.lcp_chars == 0

    def test_identical_prompt_scores_one(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a1", "d1", "repeat me")
        assert ledger.compute_affinity("a1", "d1", "repeat me").ratio == 1.0

    def test_agent_switch_scores_zero(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a1", "d1", "multi turn history")
        assert ledger.compute_affinity("a2", "d1", "multi turn history").ratio == 0.0

    def test_ratio_bounds_random(self):
        rng = random.Random(0)
        ledger = PrefixLedger()
        for i in range(200):
            prompt = "".join(rng.choices(string.ascii_lowercase, k=rng.randint(1, 40)))
            probe = "".join(rng.choices(string.ascii_lowercase, k=rng.randint(1, 40)))
            ledger.record_prompt("a", f"d{i % 7}", prompt)
            score = ledger.compute_affinity("a", f"d{i % 7}", probe)
            assert 0.0 <= score.ratio <= 1.0
            assert 0 <= score.lcp_chars <= score.prompt_chars

    def test_extending_shared_prefix_never_decreases_lcp(self):
        ledger = PrefixLedger()
        base = "turn one of the dialogue"
        ledger.record_prompt("a", "d", base + " plus an answer")
        shorter = ledger.compute_affinity("a", "d", base).lcp_chars
        longer = ledger.compute_affinity("a", "d", base + " plus").lcp_chars
        assert longer >= shorter


class TestRecord:
    def test_round_trip_scores_one(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a", "d", "exact prompt")
        assert ledger.compute_affinity("a", "d", "exact prompt").ratio == 1.0

    def test_last_writer_wins(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a", "d", "first")
        ledger.record_prompt("a", "d", "second")
        assert ledger.get("a", "d") == "second"

    def test_bound_evicts_least_recently_updated(self):
        ledger = PrefixLedger(capacity=1)
        ledger.record_prompt("a", "d1", "one")
        ledger.record_prompt("a", "d2", "two")
        assert ledger.get("a", "d1") is None
        assert ledger.get("a", "d2") == "two"

    def test_updating_refreshes_recency(self):
        ledger = PrefixLedger(capacity=2)
        ledger.record_prompt("a", "d1", "one")
        ledger.record_prompt("a", "d2", "two")
        ledger.record_prompt("a", "d1", "one again")
        ledger.record_prompt("a", "d3", "three")
        assert ledger.get("a", "d2") is None
        assert ledger.get("a", "d1") == "one again"


class TestEvictIfStale:
    def test_high_affinity_zero_cached_evicts(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a", "d", "prompt")
        assert ledger.evict_if_stale("a", "d", 0.9, 0) is True
        assert ledger.get("a", "d") is None

    def test_cached_tokens_present_keeps_entry(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a", "d", "prompt")
        assert ledger.evict_if_stale("a", "d", 0.9, 40) is False
        assert ledger.get("a", "d") == "prompt"

    def test_low_affinity_keeps_entry(self):
        ledger = PrefixLedger()
        ledger.record_prompt("a", "d", "prompt")
        assert ledger.evict_if_stale("a", "d", 0.1, 0) is False

    def test_threshold_is_configurable(self):
        ledger = PrefixLedger(evict_threshold=0.95)
        ledger.record_prompt("a", "d", "prompt")
        assert ledger.evict_if_stale("a", "d", 0.9, 0) is False


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        ledger = PrefixLedger()
        ledger.record_prompt("a1", "d1", "line one\nline two\ttabbed")
        ledger.record_prompt("a2", "d2", "unicode: naïve café")
        path = tmp_path / "ledger.jsonl"
        ledger.save(str(path))
        restored = PrefixLedger.load(str(path))
        assert restored.get("a1", "d1") == "line one\nline two\ttabbed"
        assert restored.get("a2", "d2") == "unicode: naïve café"
        assert len(restored) == 2

    def test_corrupt_record_rejected(self):
        bad = '["a", "d", 99, "deadbeef", "prompt"]'
        with pytest.raises(ValueError, match="corrupt"):
            PrefixLedger.from_lines([bad])
