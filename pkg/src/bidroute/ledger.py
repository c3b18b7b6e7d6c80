"""Per-(agent, dialogue) prefix ledger and cache-affinity scoring.

The router cannot see agent cache memory directly, so it remembers the last
prompt it dispatched for every (agent, dialogue) pair and scores new prompts
by their character-level longest common prefix against that record.  A high
ratio means the agent very likely still holds the shared prefix and can skip
recomputing it.

Only the owning router loop mutates a ledger; reads happen on the same loop.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Iterator

DEFAULT_CAPACITY = 10_000
DEFAULT_EVICT_THRESHOLD = 0.5


@dataclass(frozen=True)
class AffinityScore:
    """Prefix overlap between a prompt and an agent's last-served prompt."""

    ratio: float
    lcp_chars: int
    prompt_chars: int


def lcp(a: str, b: str) -> int:
    """Length of the longest common prefix, exact characters, no normalization."""
    limit = min(len(a), len(b))
    i = 0
    while i < limit and a[i] == b[i]:
        i += 1
    return i


@dataclass
class _Entry:
    prompt: str
    updated_at: float


class PrefixLedger:
    """Bounded map of (agent_id, dialogue_id) -> last dispatched prompt.

    Holds at most ``capacity`` entries; recording over the bound evicts the
    least-recently-updated entry.  Reads do not refresh recency.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        evict_threshold: float = DEFAULT_EVICT_THRESHOLD,
    ):
        if capacity < 1:
            raise ValueError("ledger capacity must be at least 1")
        self.capacity = capacity
        self.evict_threshold = evict_threshold
        self._entries: OrderedDict[tuple[str, str], _Entry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._entries

    def get(self, agent_id: str, dialogue_id: str) -> str | None:
        entry = self._entries.get((agent_id, dialogue_id))
        return entry.prompt if entry else None

    def compute_affinity(self, agent_id: str, dialogue_id: str, prompt: str) -> AffinityScore:
        """Score ``prompt`` against the stored entry; no entry scores zero."""
        stored = self.get(agent_id, dialogue_id)
        chars = lcp(prompt, stored) if stored is not None else 0
        return AffinityScore(
            ratio=chars / max(1, len(prompt)),
            lcp_chars=chars,
            prompt_chars=len(prompt),
        )

    def record_prompt(self, agent_id: str, dialogue_id: str, prompt: str, now: float = 0.0) -> None:
        """Record the prompt just served; last writer wins."""
        key = (agent_id, dialogue_id)
        self._entries[key] = _Entry(prompt, now)
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def evict_if_stale(
        self,
        agent_id: str,
        dialogue_id: str,
        predicted_affinity: float,
        reported_cached_tokens: int,
    ) -> bool:
        """Drop the entry when the agent contradicts a confident prediction.

        An agent reporting zero cached tokens despite a high router-side
        prefix match has evicted its cache; the local record is invalidated
        so belief resynchronizes.
        """
        if reported_cached_tokens == 0 and predicted_affinity >= self.evict_threshold:
            if self._entries.pop((agent_id, dialogue_id), None) is not None:
                return True
        return False

    # -- snapshot / restore -------------------------------------------------

    def snapshot_lines(self) -> Iterator[str]:
        """One JSON record per entry: agent, dialogue, length, hash, prompt."""
        for (agent_id, dialogue_id), entry in self._entries.items():
            digest = hashlib.sha256(entry.prompt.encode("utf-8")).hexdigest()
            yield json.dumps(
                [agent_id, dialogue_id, len(entry.prompt), digest, entry.prompt],
                ensure_ascii=False,
            )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.snapshot_lines():
                fh.write(line + "\n")

    @classmethod
    def from_lines(
        cls,
        lines: Iterable[str],
        capacity: int = DEFAULT_CAPACITY,
        evict_threshold: float = DEFAULT_EVICT_THRESHOLD,
    ) -> "PrefixLedger":
        ledger = cls(capacity=capacity, evict_threshold=evict_threshold)
        for line in lines:
            line = line.strip()
            if not line:
                continue
            agent_id, dialogue_id, length, digest, prompt = json.loads(line)
            if len(prompt) != length or hashlib.sha256(prompt.encode("utf-8")).hexdigest() != digest:
                raise ValueError(f"corrupt ledger record for {(agent_id, dialogue_id)!r}")
            ledger.record_prompt(agent_id, dialogue_id, prompt)
        return ledger

    @classmethod
    def load(cls, path: str, **kwargs) -> "PrefixLedger":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh, **kwargs)
