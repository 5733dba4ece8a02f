import pytest

from push0.bus import Bus, QueueConfig
from push0.collector import Collector, CollectorConfig
from push0.dispatcher import Dispatcher, DispatcherConfig, Redundancy, ResultStore
from push0.executor import ExecutorSpec, SimBehavior
from push0.harness.experiments import exp_redundancy, wait_for
from push0.observability import MetricsRegistry, SpanLog


def make_bus(ack_timeout=30.0):
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", ack_timeout=ack_timeout))
    bus.declare_queue("results")
    return bus


def test_config_validation():
    with pytest.raises(ValueError):
        DispatcherConfig("a", "a", ExecutorSpec.echo())
    with pytest.raises(ValueError):
        DispatcherConfig("a", None, ExecutorSpec.echo())
    with pytest.raises(ValueError):
        DispatcherConfig("a", "b", ExecutorSpec.echo(), max_inflight=0)
    cfg = DispatcherConfig("a", "b", ExecutorSpec.echo(), idempotency=True)
    assert isinstance(cfg.result_store, ResultStore) and cfg.group == "a"


def test_execute_publish_ack():
    bus = make_bus()
    metrics = MetricsRegistry()
    done = []
    d = Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo()), metrics=metrics,
                   on_complete=lambda d, e, o: done.append(o)).start()
    for b in range(5):
        bus.publish("tasks", {"block_num": b, "task_id": f"t{b}", "extra": "x"})
    assert wait_for(lambda: len(done) == 5, 5)
    d.stop()
    out = bus.peek("results")
    assert [e.payload["block_num"] for e in out] == list(range(5))
    assert all(e.payload["proved"] and e.payload["task_id"] == f"t{i}" for i, e in enumerate(out))
    assert bus.stream_state("tasks").depth == 0
    assert d.stats.acks == 5 and d.stats.tasks_executed == 5
    assert metrics.total("tasks_processed_total") == 5
    bus.close()


def test_execution_error_leaves_input_for_redelivery():
    bus = make_bus(ack_timeout=0.3)
    spec = ExecutorSpec.sleep(1.0, timeout=0.05)
    d = Dispatcher(bus, DispatcherConfig("tasks", "results", spec)).start()
    bus.publish("tasks", {"block_num": 0, "task_id": "t"})
    assert wait_for(lambda: d.stats.failures >= 2, 5)
    d.stop()
    assert bus.stream_state("results").depth == 0
    assert bus.stream_state("tasks").redelivered_total >= 1
    bus.close()


def test_simulated_crash_kills_dispatcher_and_work_moves():
    bus = make_bus(ack_timeout=0.5)
    crasher = Dispatcher(bus, DispatcherConfig("tasks", "results",
                                               ExecutorSpec("simulated", behavior=SimBehavior("crash", at_nth=1))),
                         name="crasher").start()
    bus.publish("tasks", {"block_num": 0, "task_id": "t"})
    assert wait_for(lambda: not crasher.alive, 5)
    assert crasher.stats.crashed and crasher.killed
    healthy = Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo())).start()
    assert wait_for(lambda: bus.stream_state("results").depth == 1, 5)
    healthy.stop()
    assert bus.peek("results")[0].payload["task_id"] == "t"
    bus.close()


def test_crash_between_publish_and_ack_duplicates_are_deduped():
    bus = make_bus(ack_timeout=0.5)
    bus.declare_queue("final")
    first = Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo(), ack_delay=5.0),
                       name="slow-acker").start()
    coll = Collector(bus, CollectorConfig(["results"], "final", num_inputs=1)).start()
    bus.publish("tasks", {"block_num": 0, "task_id": "t"})
    assert wait_for(lambda: first.stats.results_published == 1, 5)
    first.kill()
    first.join(2)
    second = Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo()), name="second").start()
    assert wait_for(lambda: second.stats.acks == 1, 5)
    assert wait_for(lambda: coll.stats.duplicates_dropped == 1, 5)
    second.stop()
    coll.stop()
    assert bus.stream_state("results").published_total == 2
    assert len(bus.peek("final")) == 1
    bus.close()


def test_idempotent_dispatch_skips_redundant_executions():
    bus = make_bus(ack_timeout=0.05)
    store = ResultStore()
    spec = ExecutorSpec.echo()
    ds = [Dispatcher(bus, DispatcherConfig("tasks", "results", spec, idempotency=True, result_store=store,
                                           ack_delay=0.08), name=f"d{i}").start() for i in range(4)]
    n = 150
    for b in range(n):
        bus.publish("tasks", {"block_num": b, "task_id": f"t{b}"})
    assert wait_for(lambda: bus.stream_state("tasks").depth == 0, 30)
    for d in ds:
        d.stop()
    skipped = sum(d.stats.tasks_skipped_idempotent for d in ds)
    deliveries = sum(d.stats.deliveries for d in ds)
    invocations = sum(d.executor.invocations for d in ds)
    assert skipped >= 1
    assert invocations < deliveries
    assert len(store) == n
    bus.close()


def test_result_store_persists(tmp_path):
    s = ResultStore(tmp_path / "r.jsonl")
    d1 = s.put("a", {"x": 1})
    s.put("a", {"x": 2})
    assert s.get("a") == d1 and len(d1) == 64
    s.close()
    with open(tmp_path / "r.jsonl", "a") as fh:
        fh.write('{"task_id": "torn"')
    s2 = ResultStore(tmp_path / "r.jsonl")
    assert "a" in s2 and "torn" not in s2 and len(s2) == 1


def test_spans_per_task(tmp_path):
    bus = make_bus()
    log = SpanLog(tmp_path / "spans.jsonl")
    d = Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo()), name="prove", span_log=log).start()
    bus.publish("tasks", {"block_num": 0, "task_id": "t"},
                {"traceparent": "00-0af7651916cd43dd8448eb211c80319c-b7ad6b7169203331-01"})
    assert wait_for(lambda: bus.stream_state("results").depth == 1, 5)
    d.stop()
    names = sorted(r["stage"] for r in log.read())
    assert names == ["prove.process", "prove.receive", "prove.send"]
    assert {r["trace_id"] for r in log.read()} == {"0af7651916cd43dd8448eb211c80319c"}
    assert bus.peek("results")[0].trace_context.split("-")[1] == "0af7651916cd43dd8448eb211c80319c"
    log.close()
    bus.close()


def test_redundancy_fanout_n1_is_plain_dispatch():
    bus = make_bus()
    bus.declare_queue(QueueConfig("copy.0", priority_field="block_num"))
    d = Dispatcher(bus, DispatcherConfig("tasks", redundancy=Redundancy(1, "copy"))).start()
    bus.publish("tasks", {"block_num": 4, "task_id": "t"})
    assert wait_for(lambda: bus.stream_state("copy.0").depth == 1, 5)
    d.stop()
    assert bus.peek("copy.0")[0].payload == {"block_num": 4, "task_id": "t"}
    bus.close()


def test_redundancy_first_valid_result_wins():
    r = exp_redundancy(latencies=(0.2, 1.0, 5.0))
    assert r.passed, r.summary
    assert r.summary["accepted_latency_s"] < 0.7


def test_redundancy_survives_a_crashed_copy():
    r = exp_redundancy(latencies=(0.1, 0.4, 0.8), crash_index=0)
    assert r.passed, r.summary
    assert 0.4 <= r.summary["accepted_latency_s"] < 0.9
