import math
import time
import urllib.request

import pytest
from hypothesis import given
from hypothesis import strategies as st

from push0.bus import Bus
from push0.observability import (
    BUCKET_BOUNDS,
    CONTENT_TYPE,
    Histogram,
    MalformedParent,
    MetricsRegistry,
    SpanLog,
    TraceContext,
    child_span,
    serve_metrics,
    trace_id_of,
    watch_bus,
)


def bucket_width_at(x):
    i = next(i for i, b in enumerate(BUCKET_BOUNDS) if b >= x)
    return BUCKET_BOUNDS[i] - (BUCKET_BOUNDS[i - 1] if i else 0.0)


def test_constant_samples_give_exact_quantiles():
    r = MetricsRegistry()
    for _ in range(1000):
        r.observe_latency("dispatch_latency_seconds", 0.005)
    q = r.quantiles("dispatch_latency_seconds")
    assert abs(q["p50"] - 0.005) <= bucket_width_at(0.005)
    assert r.value("dispatch_latency_seconds") == 1000


def test_quantile_matches_sorted_oracle_within_bucket():
    import random
    rng = random.Random(3)
    xs = [rng.lognormvariate(-5, 1) for _ in range(5000)]
    h = Histogram()
    for x in xs:
        h.observe(x)
    xs.sort()
    for q in (0.5, 0.95, 0.99):
        true = xs[math.ceil(q * len(xs)) - 1]
        assert abs(h.quantile(q) - true) <= bucket_width_at(true)


def test_histogram_rejects_bad_samples():
    h = Histogram()
    with pytest.raises(ValueError):
        h.observe(-1)
    assert math.isnan(h.quantile(0.5))


@given(st.lists(st.floats(min_value=0, max_value=1e6, allow_nan=False), max_size=50))
def test_counters_monotone(values):
    r = MetricsRegistry(register_defaults=False)
    r.counter("c_total")
    last = 0.0
    for v in values:
        r.inc("c_total", v)
        assert r.value("c_total") >= last
        last = r.value("c_total")
    with pytest.raises(ValueError):
        r.inc("c_total", -1)


def test_gauges_track_stream_state():
    bus = Bus()
    bus.declare_queue("q", ack_timeout=0.4)
    r = MetricsRegistry()
    watch_bus(r, bus)
    assert r.value("queue_depth", queue="q") == 0
    for i in range(3):
        bus.publish("q", {"i": i})
    deadline = time.monotonic() + 5
    while r.value("queue_depth", queue="q") != 3 and time.monotonic() < deadline:
        time.sleep(0.02)
    assert r.value("queue_depth", queue="q") == bus.stream_state("q").depth == 3
    bus.close()


def test_empty_exposition_and_format():
    assert MetricsRegistry(register_defaults=False).exposition() == ""
    r = MetricsRegistry(register_defaults=False)
    r.counter("jobs_total", "Jobs")
    r.inc("jobs_total", stage='a"b')
    r.histogram("lat_seconds")
    r.observe_latency("lat_seconds", 0.01)
    text = r.exposition()
    assert "# TYPE jobs_total counter" in text
    assert 'jobs_total{stage="a\\"b"} 1' in text
    assert 'lat_seconds_bucket{le="+Inf"} 1' in text
    assert "lat_seconds_count 1" in text


def test_scrape_endpoint():
    r = MetricsRegistry()
    r.inc("tasks_processed_total")
    srv = serve_metrics(r)
    try:
        with urllib.request.urlopen(srv.url, timeout=5) as resp:
            assert resp.headers["Content-Type"] == CONTENT_TYPE
            assert "tasks_processed_total 1" in resp.read().decode()
    finally:
        srv.close()


def test_root_traceparent_valid():
    ctx = TraceContext.new_root()
    assert TraceContext.parse(ctx.traceparent) == ctx
    assert trace_id_of(ctx.traceparent) == ctx.trace_id


@pytest.mark.parametrize("bad", ["", "garbage", "00-" + "0" * 32 + "-" + "1" * 16 + "-01",
                                 "ff-" + "1" * 32 + "-" + "1" * 16 + "-01", "00-abc-def-01"])
def test_malformed_parent_starts_new_root(bad):
    with pytest.raises(MalformedParent):
        TraceContext.parse(bad)
    r = MetricsRegistry()
    span = child_span(bad, "stage", registry=r)
    assert span.parent_id is None
    assert r.value("trace_malformed_parents_total") == 1


def test_child_span_chain_logged(tmp_path):
    log = SpanLog(tmp_path / "spans.jsonl")
    with child_span(None, "enqueue", log) as root:
        pass
    with child_span(root.traceparent, "work", log) as kid:
        pass
    recs = log.read()
    log.close()
    assert [r["stage"] for r in recs] == ["enqueue", "work"]
    assert recs[1]["parent_id"] == root.context.span_id and recs[1]["trace_id"] == recs[0]["trace_id"]
    assert all(r["start"] <= r["end"] for r in recs)
    assert kid.context.span_id != root.context.span_id
