"""Grouping strategies and the outcome protocol they speak.

A strategy owns the barrier buffer.  The collector feeds it one validated,
deduplicated member at a time through :meth:`Strategy.collect`, calls
:meth:`Strategy.flush` when input goes quiet, and acts on the returned
:class:`CollectorOperation`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable

from push0.model import TaskEnvelope, extract_group_key
from push0.routing import partition_of


@dataclass
class Member:
    """One buffered input: the delivery plus where it came from."""

    envelope: TaskEnvelope
    handle: Any
    queue: str
    arrival: float = field(default_factory=time.monotonic)

    @property
    def payload(self) -> dict:
        return self.envelope.payload

    @property
    def message_id(self) -> int:
        return self.envelope.message_id

    def size(self) -> int:
        return len(repr(self.envelope.payload))


@dataclass
class BufferEntry:
    key: int
    label: Any
    expected: int
    members: list[Member] = field(default_factory=list)
    first_arrival: float = field(default_factory=time.monotonic)
    last_arrival: float = 0.0

    def message_ids(self) -> set[tuple[str, int]]:
        return {(m.queue, m.message_id) for m in self.members}

    @property
    def complete(self) -> bool:
        return len(self.members) >= self.expected


class CollectorOperation:
    """Base of the four strategy outcomes."""


@dataclass
class InProgress(CollectorOperation):
    pass


@dataclass
class Finished(CollectorOperation):
    groups: list[BufferEntry]
    partial: bool = False

    def __post_init__(self):
        if not self.groups or any(not g.members for g in self.groups):
            raise ValueError("Finished needs at least one non-empty group")


@dataclass
class Postpone(CollectorOperation):
    member: Member
    timeout: float


@dataclass
class Skip(CollectorOperation):
    member: Member
    reason: str = ""


class Strategy:
    """Base strategy keyed by ``grouping_field``, completing at ``num_inputs`` members."""

    name = "base"

    def __init__(self, num_inputs: int, grouping_field: str, allow_partial: bool = False):
        if num_inputs < 1:
            raise ValueError("num_inputs must be >= 1")
        self.num_inputs = num_inputs
        self.grouping_field = grouping_field
        self.allow_partial = allow_partial
        self.buffer: dict[int, BufferEntry] = {}

    def group_of(self, member: Member) -> tuple[int, Any]:
        """(group key, label written to the output's grouping field)."""
        key = extract_group_key(member.payload, self.grouping_field)
        return key, member.payload[self.grouping_field]

    def expected_for(self, member: Member) -> int:
        exp = member.payload.get("expected_inputs")
        if isinstance(exp, int) and not isinstance(exp, bool) and exp >= 1:
            return exp
        return self.num_inputs

    def select_collector(self, key: int, num_collectors: int) -> int:
        return partition_of(key, num_collectors)

    def collect(self, member: Member) -> CollectorOperation:
        key, label = self.group_of(member)
        entry = self.buffer.get(key)
        if entry is None:
            entry = self.buffer[key] = BufferEntry(key, label, self.expected_for(member))
        entry.members.append(member)
        entry.last_arrival = member.arrival
        if entry.complete:
            del self.buffer[key]
            return Finished([entry])
        return InProgress()

    def flush(self) -> CollectorOperation:
        if not self.allow_partial or not self.buffer:
            return InProgress()
        groups = [self.buffer.pop(k) for k in sorted(self.buffer)]
        return Finished(groups, partial=True)

    def discard(self, key: int) -> BufferEntry | None:
        return self.buffer.pop(key, None)

    def adopt(self, member: Member) -> bool:
        """Swap in a redelivered copy of a member we already buffer."""
        for entry in self.buffer.values():
            for i, m in enumerate(entry.members):
                if m.queue == member.queue and m.message_id == member.message_id:
                    member.arrival = m.arrival
                    entry.members[i] = member
                    return True
        return False

    def members(self) -> list[Member]:
        return [m for e in self.buffer.values() for m in e.members]


class MatchStrategy(Strategy):
    """Completes a group once ``num_inputs`` distinct members share a grouping value."""

    name = "Match"


class SequentialStrategy(Strategy):
    """Groups consecutive blocks: group = block // k, complete when all k blocks arrived."""

    name = "Sequential"

    def group_of(self, member: Member) -> tuple[int, Any]:
        block = extract_group_key(member.payload, self.grouping_field)
        g = block // self.num_inputs
        return g, g

    def expected_for(self, member: Member) -> int:
        return self.num_inputs

    def collect(self, member: Member) -> CollectorOperation:
        key, _ = self.group_of(member)
        entry = self.buffer.get(key)
        block = member.payload[self.grouping_field]
        if entry is not None and any(m.payload[self.grouping_field] == block for m in entry.members):
            return Skip(member, f"block {block} already in group {key}")
        op = super().collect(member)
        if isinstance(op, Finished):
            for g in op.groups:
                g.members.sort(key=lambda m: m.payload[self.grouping_field])
        return op


class OrderedCommitStrategy(Strategy):
    """Releases one group per block in strictly increasing block order.

    Blocks that arrive early wait in the buffer; blocks beyond ``window`` past
    the next expected block are postponed; blocks already committed are
    skipped.
    """

    name = "Ordered"

    def __init__(self, num_inputs: int = 1, grouping_field: str = "block_num", allow_partial: bool = False,
                 start: int = 0, window: int = 1024, postpone_delay: float = 0.5):
        super().__init__(1, grouping_field, allow_partial)
        self.next_block = start
        self.window = window
        self.postpone_delay = postpone_delay

    def collect(self, member: Member) -> CollectorOperation:
        key, label = self.group_of(member)
        if key < self.next_block or key in self.buffer:
            return Skip(member, f"block {key} already committed or buffered")
        if key >= self.next_block + self.window:
            return Postpone(member, self.postpone_delay)
        self.buffer[key] = BufferEntry(key, label, 1, [member], member.arrival, member.arrival)
        ready = []
        while self.next_block in self.buffer:
            ready.append(self.buffer.pop(self.next_block))
            self.next_block += 1
        return Finished(ready) if ready else InProgress()

    def flush(self) -> CollectorOperation:
        return InProgress()


STRATEGIES: dict[str, Callable[..., Strategy]] = {
    "match": MatchStrategy,
    "sequential": SequentialStrategy,
    "ordered": OrderedCommitStrategy,
}


def register_strategy(name: str, factory: Callable[..., Strategy]) -> None:
    key = name.lower()
    if key in STRATEGIES:
        raise ValueError(f"strategy {name!r} already registered")
    STRATEGIES[key] = factory


@dataclass
class StrategySpec:
    kind: str = "Match"
    num_inputs: int = 1
    grouping_field: str = "block_num"
    allow_partial: bool = False
    options: dict = field(default_factory=dict)

    def build(self) -> Strategy:
        factory = STRATEGIES.get(self.kind.lower())
        if factory is None:
            raise ValueError(f"unknown strategy {self.kind!r}")
        return factory(self.num_inputs, self.grouping_field, self.allow_partial, **self.options)


def fragmentation_probability(num_collectors: int, k: int) -> float:
    """Chance that k independently, uniformly routed members meet at one collector: C^-(k-1)."""
    if num_collectors < 1 or k < 1:
        raise ValueError("need C >= 1 and k >= 1")
    return float(num_collectors) ** -(k - 1)
