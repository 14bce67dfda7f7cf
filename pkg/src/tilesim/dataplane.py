"""Partitioned publish/subscribe log with consumer groups.

Records land on partitions by a stable 64-bit FNV-1a hash of the key, get
dense per-partition offsets in broker arrival order, and age out of a fixed
ring buffer.  Consumer groups track committed offsets per partition with
at-least-once semantics: a member that vanishes before committing causes
redelivery to whoever inherits its partitions.  Per-link byte accounting
feeds the jitter coupling of the time-transfer plane.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

from .core import PS_PER_S, SimTime
from .fabric import ConfigurationError

FNV64_OFFSET = 0xcbf29ce484222325
FNV64_PRIME = 0x100000001b3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


class CommitError(ValueError):
    """Commit past the delivery frontier (or malformed)."""


@dataclass(frozen=True)
class Record:
    key: str
    size_bytes: int
    produce_time_ps: SimTime
    producer: str
    offset: int


class _Partition:
    def __init__(self, retention: int):
        self.retention = retention
        self.records: deque[Record] = deque()
        self.next_offset = 0

    @property
    def first_offset(self) -> int:
        return self.next_offset - len(self.records)

    def append(self, key, size_bytes, produce_time_ps, producer) -> int:
        off = self.next_offset
        self.records.append(Record(key, size_bytes, produce_time_ps, producer, off))
        self.next_offset += 1
        if len(self.records) > self.retention:
            self.records.popleft()
        return off

    def read_from(self, offset: int, max_records: int) -> tuple[list[Record], bool]:
        gap = offset < self.first_offset
        start = max(offset, self.first_offset)
        i = start - self.first_offset
        out = list(self.records)[i:i + max_records] if i < len(self.records) else []
        return out, gap


class Topic:
    def __init__(self, name: str, partition_count: int, retention: int):
        if partition_count < 1:
            raise ConfigurationError("a topic needs at least one partition")
        if retention < 1:
            raise ConfigurationError("retention must hold at least one record")
        self.name = name
        self.partitions = [_Partition(retention) for _ in range(partition_count)]
        self.retention = retention


class Broker:
    def __init__(self):
        self.topics: dict[str, Topic] = {}
        self.published = 0
        self.dropped_in_flight = 0
        self.dropped_bytes = 0

    def create_topic(self, name: str, partition_count: int = 1,
                     retention: int = 10_000) -> Topic:
        if name in self.topics:
            raise ConfigurationError(f"topic {name!r} exists")
        t = Topic(name, partition_count, retention)
        self.topics[name] = t
        return t

    def partition_for(self, topic: str, key: str) -> int:
        return fnv1a64(key.encode()) % len(self.topics[topic].partitions)

    def append(self, topic: str, key: str, size_bytes: int,
               produce_time_ps: SimTime, producer: str) -> tuple[int, int]:
        """Arrival-side append; offsets are assigned in call order."""
        t = self.topics[topic]
        p = self.partition_for(topic, key)
        off = t.partitions[p].append(key, size_bytes, produce_time_ps, producer)
        self.published += 1
        return p, off

    def drop_in_flight(self, size_bytes: int) -> None:
        self.dropped_in_flight += 1
        self.dropped_bytes += size_bytes

    def dump_topic(self, name: str) -> str:
        """Newline-delimited JSON of everything currently retained."""
        t = self.topics[name]
        lines = []
        for p, part in enumerate(t.partitions):
            for r in part.records:
                lines.append(json.dumps(
                    {"partition": p, "offset": r.offset, "key": r.key,
                     "size_bytes": r.size_bytes, "produce_time_ps": r.produce_time_ps,
                     "producer": r.producer}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class PollResult:
    records: list[Record]
    gap: bool   # true when eviction skipped past the read position


class ConsumerGroup:
    """Range partition assignment over sorted member ids.

    Poll positions are per-session: any membership change resets every
    member to the committed offsets, which is what produces the
    at-least-once redelivery of uncommitted records.
    """

    def __init__(self, group_id: str, broker: Broker):
        self.group_id = group_id
        self.broker = broker
        self.members: list[str] = []
        self.subscriptions: list[str] = []
        self.committed: dict[tuple[str, int], int] = {}
        self.last_delivered: dict[tuple[str, int], int] = {}
        self._positions: dict[str, dict[tuple[str, int], int]] = {}
        self.rebalances: list[dict] = []

    def subscribe(self, topic: str) -> None:
        if topic not in self.broker.topics:
            raise ConfigurationError(f"unknown topic {topic!r}")
        if topic not in self.subscriptions:
            self.subscriptions.append(topic)
            self.subscriptions.sort()

    def join(self, member_id: str) -> None:
        if member_id in self.members:
            raise ConfigurationError(f"{member_id} already in group")
        self.members.append(member_id)
        self.members.sort()
        self._rebalance("join", member_id)

    def leave(self, member_id: str) -> None:
        self.members.remove(member_id)
        self._rebalance("leave", member_id)

    def _rebalance(self, why: str, member_id: str) -> None:
        self._positions = {}
        self.rebalances.append({"why": why, "member": member_id,
                                "assignment": {t: self.assignment(t)
                                               for t in self.subscriptions}})

    def assignment(self, topic: str) -> dict[str, list[int]]:
        """Contiguous partition ranges over sorted members; the first
        (count mod members) members absorb the remainder."""
        parts = list(range(len(self.broker.topics[topic].partitions)))
        if not self.members:
            return {}
        per, extra = divmod(len(parts), len(self.members))
        out = {}
        i = 0
        for k, m in enumerate(self.members):
            n = per + (1 if k < extra else 0)
            out[m] = parts[i:i + n]
            i += n
        return out

    def partitions_of(self, member_id: str, topic: str) -> list[int]:
        return self.assignment(topic).get(member_id, [])

    def poll(self, member_id: str, max_records: int = 500) -> PollResult:
        if member_id not in self.members:
            raise ConfigurationError(f"{member_id} is not a group member")
        pos = self._positions.setdefault(member_id, {})
        out: list[Record] = []
        gap = False
        budget = max_records
        for topic in self.subscriptions:
            t = self.broker.topics[topic]
            for p in self.partitions_of(member_id, topic):
                if budget <= 0:
                    break
                key = (topic, p)
                start = pos.get(key, self.committed.get(key, 0))
                recs, g = t.partitions[p].read_from(start, budget)
                gap = gap or g
                if recs:
                    out.extend(recs)
                    budget -= len(recs)
                    pos[key] = recs[-1].offset + 1
                    prev = self.last_delivered.get(key, -1)
                    self.last_delivered[key] = max(prev, recs[-1].offset)
                elif g:
                    pos[key] = t.partitions[p].first_offset
        return PollResult(out, gap)

    def commit(self, topic: str, partition: int, offset: int) -> None:
        key = (topic, partition)
        if offset < 0:
            raise CommitError("negative offset")
        frontier = self.last_delivered.get(key, -1) + 1
        if offset > frontier:
            raise CommitError(
                f"commit {offset} past delivery frontier {frontier} on "
                f"{topic}[{partition}]")
        self.committed[key] = offset


def publish(broker: Broker, topic: str, key: str, size_bytes: int,
            produce_time_ps: SimTime, producer: str) -> tuple[int, int]:
    return broker.append(topic, key, size_bytes, produce_time_ps, producer)


def poll(group: ConsumerGroup, member_id: str, max_records: int = 500) -> PollResult:
    return group.poll(member_id, max_records)


def commit(group: ConsumerGroup, topic: str, partition: int, offset: int) -> None:
    group.commit(topic, partition, offset)


class LinkLoadTracker:
    """Sliding-window byte accounting per link."""

    def __init__(self, window_ps: SimTime):
        self.window_ps = window_ps
        self._events: dict[str, deque[tuple[SimTime, int]]] = {}
        self.total_bytes: dict[str, int] = {}

    def record(self, link_id: str, t: SimTime, nbytes: int) -> None:
        self._events.setdefault(link_id, deque()).append((t, nbytes))
        self.total_bytes[link_id] = self.total_bytes.get(link_id, 0) + nbytes

    def bits_per_second(self, link_id: str, now: SimTime,
                        window_ps: SimTime | None = None) -> float:
        w = window_ps or self.window_ps
        q = self._events.get(link_id)
        if not q:
            return 0.0
        while q and q[0][0] <= now - w:
            q.popleft()
        return sum(n for _, n in q) * 8 * PS_PER_S / w

    def utilization(self, link_id: str, now: SimTime, bandwidth_bps: float) -> float:
        return min(1.0, self.bits_per_second(link_id, now) / bandwidth_bps)


def link_load(tracker: LinkLoadTracker, link_id: str, now: SimTime,
              window_ps: SimTime | None = None) -> float:
    return tracker.bits_per_second(link_id, now, window_ps)
