"""Metrics registry, Prometheus text exposition and trace-context propagation."""

from __future__ import annotations

import bisect
import json
import logging
import math
import os
import re
import secrets
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

CONTENT_TYPE = "text/plain; version=0.0.4; charset=utf-8"

# 31 log-spaced upper bounds from 0.1 ms to 60 s (seconds).
BUCKET_BOUNDS: tuple[float, ...] = tuple(1e-4 * (60 / 1e-4) ** (i / 30) for i in range(31))

_NAME_RE = re.compile(r"^[a-zA-Z_:][a-zA-Z0-9_:]*$")


class UnknownMetric(KeyError):
    pass


class BindError(OSError):
    pass


class MalformedParent(ValueError):
    pass


def _label_key(labels: dict[str, str]) -> tuple[tuple[str, str], ...]:
    return tuple(sorted((k, str(v)) for k, v in labels.items()))


def _fmt_labels(key: tuple[tuple[str, str], ...], extra: tuple[tuple[str, str], ...] = ()) -> str:
    items = key + extra
    if not items:
        return ""
    body = ",".join(f'{k}="{_escape(v)}"' for k, v in items)
    return "{" + body + "}"


def _escape(v: str) -> str:
    return v.replace("\\", "\\\\").replace("\n", "\\n").replace('"', '\\"')


def _fmt_value(v: float) -> str:
    if math.isinf(v):
        return "+Inf" if v > 0 else "-Inf"
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


class Histogram:
    """Fixed-bucket histogram with interpolated quantiles."""

    def __init__(self, bounds: Iterable[float] = BUCKET_BOUNDS):
        self.bounds = tuple(bounds)
        self.counts = [0] * (len(self.bounds) + 1)
        self.count = 0
        self.sum = 0.0
        self.min = math.inf
        self.max = -math.inf

    def observe(self, value: float) -> None:
        if value < 0 or math.isnan(value):
            raise ValueError(f"histogram samples must be non-negative, got {value}")
        self.counts[bisect.bisect_left(self.bounds, value)] += 1
        self.count += 1
        self.sum += value
        self.min = min(self.min, value)
        self.max = max(self.max, value)

    def quantile(self, q: float) -> float:
        """Estimate the ``q`` quantile by linear interpolation within its bucket."""
        if not 0 <= q <= 1:
            raise ValueError("quantile must be in [0, 1]")
        if self.count == 0:
            return math.nan
        rank = q * self.count
        seen = 0
        for i, c in enumerate(self.counts):
            if c and seen + c >= rank:
                lo = self.bounds[i - 1] if i > 0 else 0.0
                hi = self.bounds[i] if i < len(self.bounds) else self.max
                lo = max(lo, self.min)
                hi = min(hi, self.max)
                frac = (rank - seen) / c
                return lo + (hi - lo) * max(0.0, min(1.0, frac))
            seen += c
        return self.max

    def copy(self) -> "Histogram":
        h = Histogram(self.bounds)
        h.counts = list(self.counts)
        h.count, h.sum, h.min, h.max = self.count, self.sum, self.min, self.max
        return h


@dataclass
class _Family:
    name: str
    kind: str
    help: str
    series: dict


class MetricsRegistry:
    """Thread-safe counters, gauges and histograms, optionally labelled."""

    def __init__(self, register_defaults: bool = True):
        self._lock = threading.Lock()
        self._families: dict[str, _Family] = {}
        if register_defaults:
            for name, doc in [
                ("tasks_processed_total", "Tasks executed successfully by dispatchers"),
                ("tasks_skipped_idempotent_total", "Deliveries skipped because a result already existed"),
                ("task_failures_total", "Executor failures left for redelivery"),
                ("redeliveries_total", "Messages requeued after lease expiry or nak"),
                ("dedup_drops_total", "Collector inputs dropped as duplicates"),
                ("grouping_mismatches_total", "Collector inputs rejected by grouping validation"),
                ("groups_completed_total", "Barriers completed and emitted"),
                ("trace_malformed_parents_total", "Incoming trace headers that failed to parse"),
            ]:
                self.counter(name, doc)
            for name, doc in [
                ("queue_depth", "Retained messages per queue"),
                ("queue_inflight", "Leased messages per queue"),
                ("collector_buffer_groups", "Incomplete groups held per collector"),
            ]:
                self.gauge(name, doc)
            for name, doc in [
                ("dispatch_latency_seconds", "Publish-to-completion latency of dispatched tasks"),
                ("collection_latency_seconds", "First-arrival-to-emit latency of collected groups"),
                ("barrier_completion_seconds", "Time for a barrier to gather all members"),
                ("prover_duration_seconds", "Executor wall time"),
            ]:
                self.histogram(name, doc)

    def _register(self, name: str, kind: str, doc: str) -> _Family:
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid metric name {name!r}")
        with self._lock:
            fam = self._families.get(name)
            if fam is None:
                fam = self._families[name] = _Family(name, kind, doc, {})
            elif fam.kind != kind:
                raise ValueError(f"{name} already registered as {fam.kind}")
            return fam

    def counter(self, name: str, doc: str = "") -> None:
        self._register(name, "counter", doc)

    def gauge(self, name: str, doc: str = "") -> None:
        self._register(name, "gauge", doc)

    def histogram(self, name: str, doc: str = "") -> None:
        self._register(name, "histogram", doc)

    def _family(self, name: str, kind: str | None = None) -> _Family:
        fam = self._families.get(name)
        if fam is None or (kind is not None and fam.kind != kind):
            raise UnknownMetric(name)
        return fam

    def inc(self, name: str, value: float = 1.0, **labels) -> None:
        if value < 0:
            raise ValueError("counters only increase")
        with self._lock:
            fam = self._family(name, "counter")
            key = _label_key(labels)
            fam.series[key] = fam.series.get(key, 0.0) + value

    def set(self, name: str, value: float, **labels) -> None:
        with self._lock:
            self._family(name, "gauge").series[_label_key(labels)] = float(value)

    def record(self, name: str, value: float, **labels) -> None:
        """Update ``name`` according to its kind (add, set or observe)."""
        kind = self._family(name).kind
        if kind == "counter":
            self.inc(name, value, **labels)
        elif kind == "gauge":
            self.set(name, value, **labels)
        else:
            self.observe_latency(name, value, **labels)

    def observe_latency(self, name: str, seconds: float, **labels) -> None:
        with self._lock:
            fam = self._family(name, "histogram")
            key = _label_key(labels)
            h = fam.series.get(key)
            if h is None:
                h = fam.series[key] = Histogram()
            h.observe(seconds)

    def value(self, name: str, **labels) -> float:
        with self._lock:
            fam = self._family(name)
            v = fam.series.get(_label_key(labels))
            if fam.kind == "histogram":
                return v.count if v else 0
            return v or 0.0

    def total(self, name: str) -> float:
        with self._lock:
            fam = self._family(name)
            if fam.kind == "histogram":
                return sum(h.count for h in fam.series.values())
            return sum(fam.series.values())

    def histogram_snapshot(self, name: str, **labels) -> Histogram:
        with self._lock:
            h = self._family(name, "histogram").series.get(_label_key(labels))
            return h.copy() if h is not None else Histogram()

    def quantiles(self, name: str, **labels) -> dict[str, float]:
        h = self.histogram_snapshot(name, **labels)
        return {"p50": h.quantile(0.5), "p95": h.quantile(0.95), "p99": h.quantile(0.99)}

    def exposition(self) -> str:
        """Render every metric in Prometheus text format 0.0.4."""
        lines: list[str] = []
        with self._lock:
            for fam in sorted(self._families.values(), key=lambda f: f.name):
                if fam.help:
                    lines.append(f"# HELP {fam.name} {fam.help.replace(chr(92), chr(92) * 2)}")
                lines.append(f"# TYPE {fam.name} {fam.kind}")
                for key in sorted(fam.series):
                    v = fam.series[key]
                    if fam.kind != "histogram":
                        lines.append(f"{fam.name}{_fmt_labels(key)} {_fmt_value(v)}")
                        continue
                    cum = 0
                    for bound, c in zip(v.bounds, v.counts):
                        cum += c
                        lines.append(f"{fam.name}_bucket{_fmt_labels(key, (('le', repr(bound)),))} {cum}")
                    lines.append(f"{fam.name}_bucket{_fmt_labels(key, (('le', '+Inf'),))} {v.count}")
                    lines.append(f"{fam.name}_sum{_fmt_labels(key)} {_fmt_value(v.sum)}")
                    lines.append(f"{fam.name}_count{_fmt_labels(key)} {v.count}")
        return "\n".join(lines) + ("\n" if lines else "")


def watch_bus(registry: MetricsRegistry, bus) -> None:
    """Refresh queue gauges from ``bus`` after each of its sweeps."""

    def refresh(b) -> None:
        for q in b.queues():
            st = b.stream_state(q)
            registry.set("queue_depth", st.depth, queue=q)
            registry.set("queue_inflight", st.inflight, queue=q)

    bus.add_sweep_hook(refresh)
    refresh(bus)


class MetricsServer:
    def __init__(self, httpd: ThreadingHTTPServer):
        self.httpd = httpd
        self.thread = threading.Thread(target=httpd.serve_forever, kwargs={"poll_interval": 0.1},
                                       name="metrics-http", daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/metrics"

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


def serve_metrics(registry: MetricsRegistry, host: str = "127.0.0.1", port: int = 0) -> MetricsServer:
    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            if self.path.split("?")[0] != "/metrics":
                self.send_error(404)
                return
            body = registry.exposition().encode()
            self.send_response(200)
            self.send_header("Content-Type", CONTENT_TYPE)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            logger.debug("metrics: " + fmt, *args)

    try:
        httpd = ThreadingHTTPServer((host, port), Handler)
    except OSError as exc:
        raise BindError(f"cannot bind metrics endpoint on {host}:{port}: {exc}") from exc
    httpd.daemon_threads = True
    return MetricsServer(httpd)


# -- trace context --------------------------------------------------------

_TRACEPARENT_RE = re.compile(r"^([0-9a-f]{2})-([0-9a-f]{32})-([0-9a-f]{16})-([0-9a-f]{2})$")


@dataclass(frozen=True)
class TraceContext:
    trace_id: str
    span_id: str
    flags: str = "01"

    @classmethod
    def parse(cls, header: str) -> "TraceContext":
        m = _TRACEPARENT_RE.match(header.strip().lower()) if isinstance(header, str) else None
        if m is None:
            raise MalformedParent(f"malformed traceparent {header!r}")
        version, trace_id, span_id, flags = m.groups()
        if version == "ff" or trace_id == "0" * 32 or span_id == "0" * 16:
            raise MalformedParent(f"invalid traceparent {header!r}")
        return cls(trace_id, span_id, flags)

    @classmethod
    def new_root(cls) -> "TraceContext":
        return cls(_nonzero_hex(16), _nonzero_hex(8))

    def child(self) -> "TraceContext":
        return TraceContext(self.trace_id, _nonzero_hex(8), self.flags)

    @property
    def traceparent(self) -> str:
        return f"00-{self.trace_id}-{self.span_id}-{self.flags}"

    def __str__(self) -> str:
        return self.traceparent


def _nonzero_hex(nbytes: int) -> str:
    while True:
        v = secrets.token_hex(nbytes)
        if v.strip("0"):
            return v


class SpanLog:
    """Appends one JSON record per finished span to a file (``spans.jsonl``)."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            if not self._fh.closed:
                self._fh.write(line)
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def read(self) -> list[dict]:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


class Span:
    def __init__(self, context: TraceContext, parent_id: str | None, stage: str, log: SpanLog | None):
        self.context = context
        self.parent_id = parent_id
        self.stage = stage
        self.log = log
        self.start = time.time_ns()
        self.end_time: int | None = None

    @property
    def traceparent(self) -> str:
        return self.context.traceparent

    def finish(self) -> dict:
        if self.end_time is None:
            self.end_time = time.time_ns()
            if self.log is not None:
                self.log.write(self.record())
        return self.record()

    def record(self) -> dict:
        return {
            "trace_id": self.context.trace_id,
            "span_id": self.context.span_id,
            "parent_id": self.parent_id,
            "stage": self.stage,
            "start": self.start,
            "end": self.end_time,
        }

    def __enter__(self) -> "Span":
        return self

    def __exit__(self, *exc) -> None:
        self.finish()


def child_span(
    parent: str | TraceContext | None,
    stage: str,
    log: SpanLog | None = None,
    registry: MetricsRegistry | None = None,
) -> Span:
    """Open a span under ``parent``; an absent or malformed parent starts a new trace."""
    if isinstance(parent, str):
        try:
            parent = TraceContext.parse(parent)
        except MalformedParent as exc:
            logger.warning("%s; starting a new trace", exc)
            if registry is not None:
                registry.inc("trace_malformed_parents_total")
            parent = None
    if parent is None:
        return Span(TraceContext.new_root(), None, stage, log)
    return Span(parent.child(), parent.span_id, stage, log)


def trace_id_of(header: str | None) -> str | None:
    if not header:
        return None
    try:
        return TraceContext.parse(header).trace_id
    except MalformedParent:
        return None
