import threading
import time

import pytest

from push0.bus import Bus, NotInflight, QueueConfig, QueueNotFound, WouldBlock
from push0.bus.core import Paused, PayloadTooLarge
from push0.executor import ExecutorSpec
from push0.dispatcher import Dispatcher, DispatcherConfig
from push0.harness.properties import FakeClock
from push0.model import MissingField


def fake_bus(**qkw):
    clock = FakeClock()
    bus = Bus(clock=clock, start_sweeper=False)
    bus.declare_queue(QueueConfig("q", priority_field="block_num", **qkw))
    return bus, clock


def test_ids_are_monotone(bus):
    bus.declare_queue("q")
    assert [bus.publish("q", {"i": i}) for i in range(3)] == [1, 2, 3]


def test_unknown_queue(bus):
    with pytest.raises(QueueNotFound):
        bus.publish("nope", {})


def test_priority_order(bus):
    bus.declare_queue(QueueConfig("q", priority_field="block_num"))
    for b in (3, 1, 2):
        bus.publish("q", {"block_num": b})
    h = bus.subscribe("q", max_inflight=3)
    assert [bus.next(h, 0).payload["block_num"] for _ in range(3)] == [1, 2, 3]


def test_priority_field_required(bus):
    bus.declare_queue(QueueConfig("q", priority_field="block_num"))
    with pytest.raises(MissingField):
        bus.publish("q", {"task_id": "x"})


def test_fifo_without_priority(bus):
    bus.declare_queue("q")
    for i in range(5):
        bus.publish("q", {"i": i})
    h = bus.subscribe("q", max_inflight=5)
    assert [bus.next(h, 0).payload["i"] for _ in range(5)] == list(range(5))


def test_worker_group_exclusive_delivery(bus):
    bus.declare_queue("q")
    for i in range(10):
        bus.publish("q", {"i": i})
    a = bus.subscribe("q", "g", max_inflight=10)
    b = bus.subscribe("q", "g", max_inflight=10)
    seen = {"a": [], "b": []}
    for _ in range(5):
        seen["a"].append(bus.next(a, 0).message_id)
        seen["b"].append(bus.next(b, 0).message_id)
    assert bus.next(a, 0) is None and bus.next(b, 0) is None
    assert not set(seen["a"]) & set(seen["b"])
    assert sorted(seen["a"] + seen["b"]) == list(range(1, 11))


def test_separate_groups_each_see_everything(bus):
    bus.declare_queue("q")
    bus.publish("q", {"i": 1})
    g1 = bus.subscribe("q", "g1")
    g2 = bus.subscribe("q", "g2")
    e1, e2 = bus.next(g1, 0), bus.next(g2, 0)
    assert e1.message_id == e2.message_id
    bus.ack(g1, e1.message_id)
    assert bus.stream_state("q").depth == 1
    bus.ack(g2, e2.message_id)
    assert bus.stream_state("q").depth == 0


def test_concurrent_consumers_exactly_once(bus):
    bus.declare_queue("q")
    n = 400
    for i in range(n):
        bus.publish("q", {"i": i})
    got = []
    lock = threading.Lock()

    def worker():
        h = bus.subscribe("q", "g")
        while True:
            env = bus.next(h, 0.05)
            if env is None:
                return
            bus.ack(h, env.message_id)
            with lock:
                got.append(env.message_id)

    ts = [threading.Thread(target=worker) for _ in range(6)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert sorted(got) == list(range(1, n + 1))


def test_redelivery_after_timeout_with_retry_priority():
    bus, clock = fake_bus(ack_timeout=2.0)
    first = bus.publish("q", {"block_num": 5})
    h = bus.subscribe("q", max_inflight=2)
    assert bus.next(h, 0).message_id == first
    bus.publish("q", {"block_num": 5})
    clock.advance(2.0)
    assert bus.sweep() == 1
    env = bus.next(h, 0)
    # The redelivered copy outranks the fresh same-block message.
    assert env.message_id == first and env.retry_count == 1
    bus.close()


def test_ack_removes_message():
    bus, clock = fake_bus(ack_timeout=1.0)
    mid = bus.publish("q", {"block_num": 0})
    h = bus.subscribe("q")
    bus.ack(h, bus.next(h, 0).message_id)
    clock.advance(5)
    bus.sweep()
    assert bus.next(h, 0) is None
    with pytest.raises(NotInflight):
        bus.ack(h, mid)
    bus.close()


def test_ack_after_expiry_is_not_inflight():
    bus, clock = fake_bus(ack_timeout=1.0)
    bus.publish("q", {"block_num": 0})
    a = bus.subscribe("q", "g")
    b = bus.subscribe("q", "g")
    env = bus.next(a, 0)
    clock.advance(1.5)
    bus.sweep()
    with pytest.raises(NotInflight):
        bus.ack(a, env.message_id)
    again = bus.next(b, 0)
    assert again.message_id == env.message_id and again.retry_count == 1
    bus.close()


def test_heartbeat_extends_lease():
    bus, clock = fake_bus(ack_timeout=2.0)
    bus.publish("q", {"block_num": 0})
    h = bus.subscribe("q")
    env = bus.next(h, 0)
    for _ in range(10):
        clock.advance(1.0)
        bus.heartbeat(h, env.message_id)
        bus.sweep()
    assert bus.stream_state("q").redelivered_total == 0
    bus.ack(h, env.message_id)
    with pytest.raises(NotInflight):
        bus.heartbeat(h, env.message_id)
    bus.close()


def test_real_heartbeating_sleep_prover_is_never_redelivered():
    bus = Bus()
    bus.declare_queue(QueueConfig("q", priority_field="block_num", ack_timeout=0.4))
    bus.declare_queue("out")
    d = Dispatcher(bus, DispatcherConfig("q", "out", ExecutorSpec.sleep(2.0, heartbeat_interval=0.2))).start()
    bus.publish("q", {"block_num": 0, "task_id": "t"})
    assert _wait(lambda: bus.stream_state("out").depth == 1, 5)
    d.stop()
    assert bus.stream_state("q").redelivered_total == 0
    bus.close()


def test_no_heartbeat_long_task_is_redelivered():
    bus = Bus()
    bus.declare_queue(QueueConfig("q", priority_field="block_num", ack_timeout=0.4))
    bus.declare_queue("out")
    d = Dispatcher(bus, DispatcherConfig("q", "out", ExecutorSpec.sleep(1.5, heartbeat_interval=60))).start()
    bus.publish("q", {"block_num": 0, "task_id": "t"})
    assert _wait(lambda: bus.stream_state("q").redelivered_total >= 1, 5)
    d.stop()
    bus.close()


def _wait(pred, timeout):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.01)
    return pred()


def test_dead_letter_after_max_retries():
    bus, clock = fake_bus(ack_timeout=1.0, max_retries=3)
    mid = bus.publish("q", {"block_num": 0})
    h = bus.subscribe("q")
    for _ in range(4):
        env = bus.next(h, 0)
        assert env is not None and env.message_id == mid
        clock.advance(1.0)
        bus.sweep()
    assert bus.next(h, 0) is None
    dlq = bus.peek("q.dlq")
    assert len(dlq) == 1 and dlq[0].headers["x-dlq-message-id"] == str(mid)
    assert dlq[0].headers["x-dlq-deliveries"] == "4"
    st = bus.stream_state("q")
    assert st.depth == 0 and st.dlq_depth == 1 and st.dead_lettered_total == 1
    assert "q.dlq.dlq" not in bus.queues()
    bus.close()


def test_nak_with_delay():
    bus, clock = fake_bus()
    bus.publish("q", {"block_num": 0})
    h = bus.subscribe("q")
    env = bus.next(h, 0)
    bus.nak(h, env.message_id, delay=5)
    assert bus.next(h, 0) is None
    clock.advance(5)
    again = bus.next(h, 0)
    assert again.message_id == env.message_id and again.retry_count == 1
    bus.close()


def test_all_crashed_recovery_time_is_ack_timeout():
    bus = Bus()
    bus.declare_queue(QueueConfig("q", ack_timeout=1.0))
    bus.publish("q", {"i": 0})
    dead = bus.subscribe("q", "g")
    bus.next(dead, 0)
    t0 = time.monotonic()
    bus.unsubscribe(dead)
    live = bus.subscribe("q", "g")
    env = bus.next(live, 3)
    elapsed = time.monotonic() - t0
    assert env is not None
    assert 1.0 <= elapsed <= 1.0 + bus.sweep_interval() + 0.2
    bus.close()


def test_backpressure_blocks_and_reports():
    bus = Bus()
    bus.declare_queue(QueueConfig("q", max_depth=3))
    for i in range(3):
        bus.publish("q", {"i": i})
    with pytest.raises(WouldBlock):
        bus.publish("q", {"i": 3}, block=False)
    with pytest.raises(WouldBlock):
        bus.publish("q", {"i": 3}, timeout=0.05)
    h = bus.subscribe("q")
    done = threading.Event()
    t = threading.Thread(target=lambda: (bus.publish("q", {"i": 4}), done.set()))
    t.start()
    assert not done.wait(0.1)
    bus.ack(h, bus.next(h, 0).message_id)
    assert done.wait(2)
    st = bus.stream_state("q")
    assert st.producer_blocks >= 2 and st.peak_depth == 3
    bus.close()


def test_payload_too_large(bus):
    bus.declare_queue(QueueConfig("q", max_payload_bytes=32))
    with pytest.raises(PayloadTooLarge):
        bus.publish("q", {"x": "y" * 64})


def test_pause_and_resume(bus):
    bus.declare_queue("q")
    bus.resume("q")  # no-op
    bus.publish("q", {"i": 0})
    h = bus.subscribe("q")
    bus.pause("q")
    assert bus.stream_state("q").paused
    with pytest.raises(Paused):
        bus.publish("q", {"i": 1}, block=False)
    assert bus.next(h, 0.05) is None
    bus.resume("q")
    assert bus.next(h, 0.05) is not None


def test_timed_pause_expires():
    bus, clock = fake_bus()
    bus.publish("q", {"block_num": 0})
    h = bus.subscribe("q")
    bus.pause(None, 10)
    assert bus.next(h, 0) is None
    clock.advance(10)
    assert bus.next(h, 0) is not None
    bus.close()


def test_pause_freezes_lease_expiry():
    bus, clock = fake_bus(ack_timeout=1.0)
    bus.publish("q", {"block_num": 0})
    h = bus.subscribe("q")
    env = bus.next(h, 0)
    bus.pause("q", 5)
    clock.advance(3)
    assert bus.sweep() == 0
    bus.resume("q")
    bus.ack(h, env.message_id)
    bus.close()


def test_stream_state_counts(bus):
    bus.declare_queue("q")
    assert (lambda s: (s.depth, s.inflight, s.delivered_total, s.dlq_depth))(bus.stream_state("q")) == (0, 0, 0, 0)
    for i in range(5):
        bus.publish("q", {"i": i})
    h = bus.subscribe("q", max_inflight=5)
    for _ in range(5):
        bus.ack(h, bus.next(h, 0).message_id)
    st = bus.stream_state("q")
    assert st.depth == 0 and st.delivered_total == 5 and st.acked_total == 5


def test_partition_filter_and_routing(bus):
    bus.declare_queue(QueueConfig("p", partitions=4, partition_field="g"))
    for g in range(8):
        bus.publish("p", {"g": g})
    envs = bus.peek("p")
    assert [e.partition for e in envs] == [g % 4 for g in range(8)]
    assert all(e.headers["x-partitions"] == "4" for e in envs)
    h = bus.subscribe("p", partition_filter=[3], max_inflight=8)
    got = []
    while (e := bus.next(h, 0)) is not None:
        got.append(e.payload["g"])
    assert got == [3, 7]
    bus.set_routing("p", 2)
    bus.publish("p", {"g": 7})
    assert bus.peek("p")[-1].partition == 1
    assert bus.routing("p") == 2


def test_fair_waiters_in_a_group(bus):
    bus.declare_queue("q")
    a = bus.subscribe("q", "g")
    b = bus.subscribe("q", "g")
    results = {}

    def wait(name, h):
        results[name] = bus.next(h, 2)

    ta = threading.Thread(target=wait, args=("a", a))
    ta.start()
    time.sleep(0.05)
    tb = threading.Thread(target=wait, args=("b", b))
    tb.start()
    time.sleep(0.05)
    bus.publish("q", {"i": 1})
    ta.join(3)
    bus.publish("q", {"i": 2})
    tb.join(3)
    assert results["a"].payload["i"] == 1 and results["b"].payload["i"] == 2


def test_durable_recovery(tmp_path):
    bus = Bus(tmp_path)
    bus.declare_queue(QueueConfig("q", priority_field="block_num"))
    h = bus.subscribe("q", "g", max_inflight=10)
    for i in range(10):
        bus.publish("q", {"block_num": i})
    for _ in range(4):
        bus.ack(h, bus.next(h, 0).message_id)
    bus.next(h, 0)  # leased but never acked
    bus.close()

    bus = Bus.recover(tmp_path)
    assert bus.stream_state("q").depth == 6
    h = bus.subscribe("q", "g", max_inflight=10)
    got = []
    while (e := bus.next(h, 0)) is not None:
        got.append(e.payload["block_num"])
    assert got == [4, 5, 6, 7, 8, 9]
    assert bus.publish("q", {"block_num": 0}) == 11
    bus.close()


def test_recover_empty_directory(tmp_path):
    bus = Bus.recover(tmp_path)
    assert bus.queues() == []
    bus.close()


def test_torn_publish_tail_is_discarded(tmp_path):
    bus = Bus(tmp_path)
    bus.declare_queue("q")
    for i in range(3):
        bus.publish("q", {"i": i})
    bus.close()
    log = tmp_path / "q" / "log.bin"
    log.write_bytes(log.read_bytes()[:-5])
    bus = Bus.recover(tmp_path)
    assert [e.payload["i"] for e in bus.peek("q")] == [0, 1]
    assert bus.recovery_report["q"]["log_discarded_bytes"] > 0
    bus.close()


def test_closed_bus_wakes_consumers():
    bus = Bus()
    bus.declare_queue("q")
    h = bus.subscribe("q")
    errors = []

    def consume():
        try:
            bus.next(h, 5)
        except Exception as exc:
            errors.append(type(exc).__name__)

    t = threading.Thread(target=consume)
    t.start()
    time.sleep(0.05)
    bus.close()
    t.join(2)
    assert errors == ["Closed"]
