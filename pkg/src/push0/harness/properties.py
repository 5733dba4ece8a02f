"""Randomized schedule checks for delivery and routing guarantees.

Each ``*_case`` function builds a fresh, thread-free bus, drives it through a
schedule derived from ``seed`` and returns a :class:`CaseResult`.  The test
suite feeds these from hypothesis; ``push0 verify`` runs them over a seed
range.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from push0.bus.core import Bus, NotInflight, QueueConfig
from push0.collector import Collector, CollectorConfig
from push0.model import extract_group_key
from push0.routing import PartitionAssignment, partition_of, rebalance


class FakeClock:
    def __init__(self, start: float = 1000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, dt: float) -> None:
        self.now += dt


@dataclass
class CaseResult:
    ok: bool
    detail: str = ""
    stats: dict = field(default_factory=dict)


def starvation_case(seed: int) -> CaseResult:
    """Finite arrivals, random consumer misbehaviour, bounded retries.

    Afterwards a healthy consumer drains the queue for a bounded number of
    sweep rounds; every published message must have been delivered and must
    end acked or dead-lettered.
    """
    rng = random.Random(seed)
    clock = FakeClock()
    bus = Bus(clock=clock, start_sweeper=False)
    ack_timeout = 1.0
    max_retries = rng.randint(0, 3)
    bus.declare_queue(QueueConfig("q", priority_field="block_num", ack_timeout=ack_timeout,
                                  max_retries=max_retries, max_depth=10_000))
    consumers = [bus.subscribe("q", max_inflight=rng.randint(1, 3)) for _ in range(rng.randint(1, 4))]
    n = rng.randint(1, 40)
    published: set[int] = set()
    delivered: set[int] = set()
    acked: set[int] = set()
    held: dict[int, list[int]] = {c.consumer_id: [] for c in consumers}
    remaining = n

    def take(c) -> None:
        env = bus.next(c, timeout=0)
        if env is not None:
            delivered.add(env.message_id)
            held[c.consumer_id].append(env.message_id)

    while remaining or rng.random() < 0.3:
        r = rng.random()
        if remaining and r < 0.35:
            published.add(bus.publish("q", {"block_num": rng.randint(0, 5)}))
            remaining -= 1
        elif r < 0.65:
            take(rng.choice(consumers))
        elif r < 0.85:
            c = rng.choice(consumers)
            if held[c.consumer_id]:
                mid = held[c.consumer_id].pop(rng.randrange(len(held[c.consumer_id])))
                action = rng.random()
                try:
                    if action < 0.5:
                        bus.ack(c, mid)
                        acked.add(mid)
                    elif action < 0.75:
                        bus.nak(c, mid)
                    # else: the consumer silently loses the message
                except NotInflight:
                    pass
        else:
            clock.advance(rng.uniform(0, 1.5 * ack_timeout))
            bus.sweep()

    # Healthy phase: forget everything still held and let leases expire.
    rounds = (n + 1) * (max_retries + 2) + 10
    healthy = bus.subscribe("q", max_inflight=n + 1)
    for _ in range(rounds):
        clock.advance(ack_timeout)
        bus.sweep()
        while True:
            env = bus.next(healthy, timeout=0)
            if env is None:
                break
            delivered.add(env.message_id)
            bus.ack(healthy, env.message_id)
            acked.add(env.message_id)
        if bus.stream_state("q").depth == 0:
            break
    dlq = {int(e.headers["x-dlq-message-id"]) for e in bus.peek("q.dlq")}
    state = bus.stream_state("q")
    bus.close()
    missing = published - delivered
    lost = published - acked - dlq
    ok = not missing and not lost and state.depth == 0
    detail = "" if ok else f"undelivered={sorted(missing)} lost={sorted(lost)} depth={state.depth}"
    return CaseResult(ok, detail, {"published": len(published), "dlq": len(dlq)})


def _group_messages(rng: random.Random, groups: int, k: int, string_keys: bool) -> list[dict]:
    keys: list = []
    while len(keys) < groups:
        key = f"grp-{rng.randrange(10**6)}" if string_keys else rng.randrange(10**4)
        if key not in keys:
            keys.append(key)
    msgs = [{"gid": g, "task_id": f"{g}/{j}", "j": j} for g in keys for j in range(k)]
    rng.shuffle(msgs)
    return msgs


def _poll_until_quiet(collectors: list[Collector], tags: dict, rng: random.Random, limit: int = 100_000) -> None:
    idle_rounds = 0
    steps = 0
    while idle_rounds < 2 and steps < limit:
        progressed = False
        order = list(range(len(collectors)))
        rng.shuffle(order)
        for i in order:
            while _poll(collectors[i], i, tags):
                progressed = True
                steps += 1
        idle_rounds = 0 if progressed else idle_rounds + 1


def _poll(c: Collector, index: int, tags: dict) -> bool:
    got = c._next(0)
    if got is None:
        return False
    tags.setdefault(got[1].message_id, set()).add(index)
    c._on_message(*got)
    return True


def locality_case(seed: int) -> CaseResult:
    """Every completed group was consumed entirely by the collector its key routes to."""
    rng = random.Random(seed)
    C = rng.choice([1, 2, 3, 4, 5, 8])
    k = rng.randint(1, 5)
    groups = rng.randint(1, 12)
    string_keys = rng.random() < 0.3
    bus = Bus(start_sweeper=False)
    bus.declare_queue(QueueConfig("parts", partitions=C, partition_field="gid", ack_timeout=3600))
    bus.declare_queue("out")
    collectors = [
        Collector(bus, CollectorConfig(["parts"], "out", num_inputs=k, grouping_field="gid", num_collectors=C,
                                       collector_index=i, collect_timeout=3600)).attach()
        for i in range(C)
    ]
    tags: dict[int, set[int]] = {}
    msgs = _group_messages(rng, groups, k, string_keys)
    ids_by_group: dict = {}
    for m in msgs:
        mid = bus.publish("parts", m)
        ids_by_group.setdefault(m["gid"], set()).add(mid)
        if rng.random() < 0.5:
            i = rng.randrange(C)
            _poll(collectors[i], i, tags)
    _poll_until_quiet(collectors, tags, rng)

    problems = []
    emitted: dict = {}
    for i, c in enumerate(collectors):
        for em in c.emissions:
            emitted.setdefault(em.label, []).append(i)
    for g, ids in ids_by_group.items():
        consumers = set().union(*(tags.get(mid, set()) for mid in ids))
        expected = partition_of(extract_group_key({"gid": g}, "gid"), C)
        if consumers != {expected}:
            problems.append(f"group {g!r} consumed by {sorted(consumers)}, routes to {expected}")
        if emitted.get(g) != [expected]:
            problems.append(f"group {g!r} emitted by {emitted.get(g)}")
    bus.close()
    return CaseResult(not problems, "; ".join(problems[:5]), {"C": C, "k": k, "groups": groups})


def continuity_case(seed: int, start: int = 4, target: int = 2) -> CaseResult:
    """Scale collectors from ``start`` to ``target`` mid-run; no barrier is lost or split."""
    rng = random.Random(seed)
    k = rng.randint(2, 5)
    groups = rng.randint(2, 16)
    bus = Bus(start_sweeper=False)
    bus.declare_queue(QueueConfig("parts", partitions=start, partition_field="gid", ack_timeout=3600))
    bus.declare_queue("out")
    collectors = [
        Collector(bus, CollectorConfig(["parts"], "out", num_inputs=k, grouping_field="gid", num_collectors=start,
                                       collector_index=i, collect_timeout=3600)).attach()
        for i in range(start)
    ]
    tags: dict[int, set[int]] = {}
    msgs = _group_messages(rng, groups, k, string_keys=False)
    cut = rng.randint(0, len(msgs))
    for m in msgs[:cut]:
        bus.publish("parts", m)
        if rng.random() < 0.6:
            i = rng.randrange(start)
            _poll(collectors[i], i, tags)

    assignment = rebalance(PartitionAssignment(start, start), target)
    bus.set_routing("parts", target)
    leaving = collectors[target:]
    for c in leaving:
        c.begin_drain()
    # Draining collectors may still finish pending groups while publishers move on.
    for m in msgs[cut:cut + rng.randint(0, len(msgs) - cut)]:
        cut += 1
        bus.publish("parts", m)
        if rng.random() < 0.5:
            i = rng.randrange(len(collectors))
            _poll(collectors[i], i, tags)
    for _ in range(rng.randint(0, 20)):
        i = rng.randrange(len(collectors))
        _poll(collectors[i], i, tags)
    abandoned = sum(c.finish_drain().abandoned_unacked for c in leaving)
    for i, c in enumerate(collectors[:target]):
        c.set_partitions(assignment.owned(i))
    for m in msgs[cut:]:
        bus.publish("parts", m)
        if rng.random() < 0.5:
            i = rng.randrange(target)
            _poll(collectors[i], i, tags)
    _poll_until_quiet(collectors[:target], tags, rng)

    problems = []
    emitted: dict = {}
    for i, c in enumerate(collectors):
        for em in c.emissions:
            emitted.setdefault(em.label, []).append((i, len(em.message_ids)))
    for g in {m["gid"] for m in msgs}:
        e = emitted.get(g)
        if e is None or len(e) != 1:
            problems.append(f"group {g} emitted {e}")
        elif e[0][1] != k:
            problems.append(f"group {g} emitted with {e[0][1]}/{k} members")
    depth = bus.stream_state("parts").depth
    if depth:
        problems.append(f"{depth} messages left unconsumed")
    bus.close()
    return CaseResult(not problems, "; ".join(problems[:5]),
                      {"k": k, "groups": groups, "abandoned": abandoned})


def run_suite(cases: int = 1000, seed: int = 0) -> dict[str, dict]:
    out = {}
    for name, fn in (("starvation", starvation_case), ("locality", locality_case), ("continuity", continuity_case)):
        failures = []
        for s in range(seed, seed + cases):
            r = fn(s)
            if not r.ok:
                failures.append({"seed": s, "detail": r.detail})
        out[name] = {"cases": cases, "failures": failures}
    return out
