import time

import pytest

from push0.bus import Bus, QueueConfig
from push0.collector import Collector, CollectorConfig, StrategySpec, route_for
from push0.harness.properties import FakeClock


def drive(*collectors, rounds=3):
    for _ in range(rounds):
        for c in collectors:
            while c.step(0):
                pass


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def lbus(clock):
    b = Bus(clock=clock, start_sweeper=False)
    b.declare_queue(QueueConfig("parts", ack_timeout=2.0))
    b.declare_queue("out")
    yield b
    b.close()


def collector(bus, **kw):
    kw.setdefault("num_inputs", 3)
    return Collector(bus, CollectorConfig(kw.pop("inputs", ["parts"]), "out", **kw)).attach()


def test_groups_and_acks(lbus):
    c = collector(lbus)
    for j in range(3):
        lbus.publish("parts", {"block_num": 7, "task_id": f"t{j}", "j": j})
    lbus.publish("parts", {"block_num": 8, "task_id": "x"})
    drive(c)
    [out] = lbus.peek("out")
    assert out.payload["block_num"] == 7
    assert sorted(m["j"] for m in out.payload["members"]) == [0, 1, 2]
    assert c.stats.groups_completed == 1
    # Only the unfinished group's member is still unacked.
    assert lbus.stream_state("parts").depth == 1
    assert list(c.strategy.buffer.values())[0].label == 8


def test_string_labels_round_trip(lbus):
    c = collector(lbus, num_inputs=2, grouping_field="batch_id")
    lbus.publish("parts", {"batch_id": "b-1", "task_id": 1})
    lbus.publish("parts", {"batch_id": "b-1", "task_id": 2})
    drive(c)
    assert lbus.peek("out")[0].payload["batch_id"] == "b-1"
    assert c.emissions[0].label == "b-1"


def test_dedup_by_task_id_and_rejects(lbus):
    c = collector(lbus, num_inputs=2, grouping_field="gid")
    lbus.publish("parts", {"gid": 1, "task_id": "a"})
    lbus.publish("parts", {"gid": 1, "task_id": "a"})  # duplicate publish
    lbus.publish("parts", {"task_id": "nokey"})
    lbus.publish("parts", {"gid": [1, 2], "task_id": "badkey"})
    lbus.publish("parts", {"gid": 1, "task_id": "b"})
    drive(c)
    assert c.stats.duplicates_dropped == 1
    assert c.stats.mismatches_rejected == 2
    assert c.stats.groups_completed == 1
    assert len(lbus.peek("out")) == 1
    assert lbus.stream_state("parts").depth == 0


def test_multi_input_groups_across_queues(lbus):
    lbus.declare_queue("other")
    c = collector(lbus, num_inputs=2, inputs=["parts", "other"])
    lbus.publish("parts", {"block_num": 3, "task_id": "same"})
    lbus.publish("other", {"block_num": 3, "task_id": "same"})
    drive(c)
    [out] = lbus.peek("out")
    assert len(out.payload["members"]) == 2


def test_misrouted_partition_rejected():
    b = Bus(start_sweeper=False)
    b.declare_queue(QueueConfig("parts", partitions=2, partition_field="block_num"))
    b.declare_queue("out")
    right = route_for({"block_num": 5}, "block_num", 2)
    c = Collector(b, CollectorConfig(["parts"], "out", num_inputs=1, num_collectors=2,
                                     collector_index=1 - right)).attach()
    b.publish("parts", {"block_num": 5}, {"x-partitions": "2"}, partition=1 - right)
    drive(c)
    assert c.stats.mismatches_rejected == 1 and not b.peek("out")
    b.close()


def test_redelivery_is_adopted_not_double_counted(lbus, clock):
    c = collector(lbus, num_inputs=2)
    lbus.publish("parts", {"block_num": 1, "task_id": "a"})
    drive(c)
    clock.advance(5)
    lbus.sweep()
    drive(c)
    assert c.stats.adopted == 1
    assert len(c.strategy.members()) == 1
    lbus.publish("parts", {"block_num": 1, "task_id": "b"})
    drive(c)
    assert len(lbus.peek("out")[0].payload["members"]) == 2
    assert lbus.stream_state("parts").depth == 0


def test_ttl_eviction_leaves_leases_to_expire(lbus, clock):
    c = collector(lbus, num_inputs=2, barrier_ttl=1.0)
    lbus.publish("parts", {"block_num": 1, "task_id": "a"})
    drive(c)
    c._evict_stale(time.monotonic() + 10)
    assert c.stats.evicted == 1 and not c.strategy.buffer
    clock.advance(5)
    lbus.sweep()
    drive(c)
    # The message came back and was accepted as new rather than deduplicated.
    assert len(c.strategy.members()) == 1 and c.stats.duplicates_dropped == 0


def test_partial_emission_on_timeout():
    b = Bus()
    b.declare_queue("parts")
    b.declare_queue("out")
    c = Collector(b, CollectorConfig(["parts"], "out", num_inputs=3, collect_timeout=0.2,
                                     allow_partial=True)).start()
    try:
        b.publish("parts", {"block_num": 1, "task_id": "a"})
        deadline = time.monotonic() + 5
        while not b.peek("out") and time.monotonic() < deadline:
            time.sleep(0.02)
        [out] = b.peek("out")
        assert out.headers.get("x-partial") == "true" and len(out.payload["members"]) == 1
        assert c.stats.partial_emissions == 1
    finally:
        c.stop(5)
        b.close()


def test_sequential_strategy_in_collector(lbus):
    c = collector(lbus, num_inputs=1, strategy=StrategySpec("sequential", 4))
    for n in (6, 4, 7, 5):
        lbus.publish("parts", {"block_num": n})
    drive(c)
    [out] = lbus.peek("out")
    assert out.payload["block_num"] == 1
    assert [m["block_num"] for m in out.payload["members"]] == [4, 5, 6, 7]


def test_drain_empty_buffer_is_immediate(lbus):
    c = collector(lbus)
    c.begin_drain()
    r = c.finish_drain()
    assert r.completed == 0 and r.abandoned_unacked == 0


def test_drain_completes_pending_and_abandons_rest(lbus, clock):
    a = collector(lbus, num_inputs=2)
    for g in (1, 2):
        lbus.publish("parts", {"block_num": g, "task_id": f"{g}a"})
    drive(a)
    a.begin_drain()
    lbus.publish("parts", {"block_num": 3, "task_id": "new"})  # new group: refused while draining
    lbus.publish("parts", {"block_num": 1, "task_id": "1b"})
    drive(a)
    report = a.finish_drain()
    assert report.completed == 1 and report.abandoned_unacked == 1
    # The abandoned member and the refused new group go to the takeover owner straight away.
    b = collector(lbus, num_inputs=2)
    drive(b)
    assert sorted(e.label for e in b.strategy.buffer.values()) == [2, 3]
    lbus.publish("parts", {"block_num": 2, "task_id": "2b"})
    drive(b)
    assert [e.label for e in b.emissions] == [2]


def test_kill_recovers_via_lease_expiry(lbus, clock):
    a = collector(lbus, num_inputs=2)
    lbus.publish("parts", {"block_num": 9, "task_id": "x"})
    drive(a)
    a.kill()
    a._unsubscribe()
    b = collector(lbus, num_inputs=2)
    assert not b.step(0)
    clock.advance(3)
    lbus.sweep()
    lbus.publish("parts", {"block_num": 9, "task_id": "y"})
    drive(b)
    assert [e.label for e in b.emissions] == [9]
    assert lbus.stream_state("parts").depth == 0


def test_on_event_fires_for_arrivals(lbus):
    events = []
    c = Collector(lbus, CollectorConfig(["parts"], "out", num_inputs=2),
                  on_event=lambda col: events.append(len(col.strategy.buffer))).attach()
    lbus.publish("parts", {"block_num": 1})
    drive(c)
    assert events and events[-1] == 1


def test_threaded_drain_call(bus):
    bus.declare_queue("parts")
    bus.declare_queue("out")
    c = Collector(bus, CollectorConfig(["parts"], "out", num_inputs=2, collect_timeout=0.05)).start()
    bus.publish("parts", {"block_num": 1, "task_id": "a"})
    time.sleep(0.2)
    report = c.drain(grace=0.2)
    assert report.abandoned_unacked == 1
    c.join(5)
    assert not c.alive
