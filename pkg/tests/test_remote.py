import subprocess
import sys
import time

import pytest

from push0.bus import Bus, NotInflight, QueueConfig, QueueNotFound
from push0.bus.core import Closed
from push0.bus.remote import BusServer, RemoteBus


@pytest.fixture
def served():
    bus = Bus()
    server = BusServer(bus).start()
    client = RemoteBus(*server.address)
    yield bus, server, client
    client.close()
    server.stop()
    bus.close()


def test_round_trip(served):
    bus, server, client = served
    assert client.ping() == "pong"
    client.declare_queue(QueueConfig("q", priority_field="block_num"))
    for b in (2, 0, 1):
        client.publish("q", {"block_num": b}, {"traceparent": "x"})
    h = client.subscribe("q", "g", max_inflight=3)
    got = [client.next(h, 1) for _ in range(3)]
    assert [e.payload["block_num"] for e in got] == [0, 1, 2]
    client.heartbeat(h, got[0].message_id)
    client.ack(h, got[0].message_id)
    client.nak(h, got[1].message_id)
    st = client.stream_state("q")
    assert st.depth == 2 and st.acked_total == 1
    assert client.next(h, 0.05).message_id == got[1].message_id


def test_errors_cross_the_wire(served):
    bus, server, client = served
    with pytest.raises(QueueNotFound):
        client.publish("missing", {})
    bus.declare_queue("q")
    h = client.subscribe("q")
    with pytest.raises(NotInflight):
        client.ack(h, 99)
    with pytest.raises(ValueError):
        client.subscribe("q", accept=lambda e: True)


def test_disconnect_releases_consumer_but_keeps_lease(served):
    bus, server, client = served
    bus.declare_queue(QueueConfig("q", ack_timeout=0.5))
    bus.publish("q", {"i": 1})
    h = client.subscribe("q", "g")
    assert client.next(h, 1) is not None
    client.close()
    with pytest.raises(Closed):
        client.ping()
    local = bus.subscribe("q", "g")
    time.sleep(0.1)
    assert bus.stream_state("q").inflight == 1
    env = bus.next(local, 2)
    assert env is not None and env.retry_count == 1


def test_worker_process_against_served_bus(served):
    bus, server, client = served
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num"))
    bus.declare_queue("results")
    for b in range(5):
        bus.publish("tasks", {"block_num": b, "task_id": f"t{b}"})
    address = "%s:%d" % server.address
    proc = subprocess.Popen([sys.executable, "-m", "push0", "worker", "dispatcher", "--connect", address,
                             "--input", "tasks", "--output", "results", "--sim", "echo"])
    try:
        deadline = time.monotonic() + 20
        while bus.stream_state("results").depth < 5 and time.monotonic() < deadline:
            time.sleep(0.05)
        assert sorted(e.payload["block_num"] for e in bus.peek("results")) == list(range(5))
        assert all(e.payload["proved"] for e in bus.peek("results"))
    finally:
        proc.terminate()
        proc.wait(5)
