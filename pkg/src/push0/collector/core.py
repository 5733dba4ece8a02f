"""Barrier-synchronizing collector.

One collector instance reads the partitions it owns from each input queue,
drops duplicates, rejects inputs whose grouping field is missing or
misrouted, and hands the rest to its strategy.  A finished group is published
as ``{grouping_field: g, "members": [...]}`` and only then are its members
acked, so a crash in between duplicates output but never loses it.
"""

from __future__ import annotations

import logging
import math
import queue as queue_mod
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Any

from push0.bus.core import Closed, NotInflight, Paused, QueueNotFound
from push0.collector.strategies import (
    BufferEntry,
    Finished,
    Member,
    Postpone,
    Skip,
    Strategy,
    StrategySpec,
)
from push0.model import MissingField, TaskEnvelope, extract_group_key
from push0.observability import MetricsRegistry, SpanLog, child_span
from push0.routing import partition_of

logger = logging.getLogger(__name__)


@dataclass
class CollectorConfig:
    input_queues: list[str]
    output_queue: str
    num_inputs: int = 1
    grouping_field: str = "block_num"
    strategy: StrategySpec | str = "Match"
    collect_timeout: float = 1.0
    one_consumer_per_subject: bool = False
    num_collectors: int = 1
    collector_index: int = 0
    dedup_capacity: int = 65_536
    allow_partial: bool = False
    barrier_ttl: float | None = None
    max_inflight: int = 4096
    worker_group: str | None = None
    routing: str = "affine"
    partitions: frozenset[int] | None = None
    heartbeat_interval: float | None = None

    def __post_init__(self):
        if isinstance(self.input_queues, str):
            self.input_queues = [q.strip() for q in self.input_queues.split(",") if q.strip()]
        if not self.input_queues:
            raise ValueError("a collector needs at least one input queue")
        if self.output_queue in self.input_queues:
            raise ValueError("output_queue must differ from the input queues")
        if self.num_collectors < 1 or not 0 <= self.collector_index < self.num_collectors:
            raise ValueError(f"collector_index {self.collector_index} outside [0, {self.num_collectors})")
        if self.num_inputs < 1:
            raise ValueError("num_inputs must be >= 1")
        if self.collect_timeout <= 0:
            raise ValueError("collect_timeout must be > 0")
        if self.routing not in ("affine", "shared"):
            raise ValueError("routing must be 'affine' or 'shared'")
        if isinstance(self.strategy, str):
            self.strategy = StrategySpec(self.strategy, self.num_inputs, self.grouping_field, self.allow_partial)
        if self.barrier_ttl is None:
            self.barrier_ttl = 10 * self.collect_timeout

    @property
    def group(self) -> str:
        return self.worker_group or f"collect.{self.output_queue}"

    def owned_partitions(self) -> frozenset[int] | None:
        if self.routing == "shared":
            return None
        if self.partitions is not None:
            return frozenset(self.partitions)
        return frozenset({self.collector_index})


@dataclass
class CollectorStats:
    groups_completed: int = 0
    duplicates_dropped: int = 0
    mismatches_rejected: int = 0
    postponed: int = 0
    skipped: int = 0
    partial_emissions: int = 0
    evicted: int = 0
    adopted: int = 0
    late_acks: int = 0
    received: int = 0
    peak_buffer_entries: int = 0
    peak_buffer_bytes: int = 0


@dataclass
class DrainReport:
    completed: int
    abandoned_unacked: int
    elapsed: float = 0.0


@dataclass
class Emission:
    key: int
    label: Any
    collector_index: int
    message_ids: list[tuple[str, int]]
    partial: bool = False
    at: float = field(default_factory=time.monotonic)


class _LRU:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._d: OrderedDict = OrderedDict()

    def __contains__(self, key) -> bool:
        if key in self._d:
            self._d.move_to_end(key)
            return True
        return False

    def add(self, key) -> None:
        self._d[key] = None
        self._d.move_to_end(key)
        while len(self._d) > self.capacity:
            self._d.popitem(last=False)

    def discard(self, key) -> None:
        self._d.pop(key, None)

    def __len__(self) -> int:
        return len(self._d)


class Collector:
    def __init__(
        self,
        bus,
        config: CollectorConfig,
        *,
        name: str | None = None,
        metrics: MetricsRegistry | None = None,
        span_log: SpanLog | None = None,
        on_emit=None,
        on_event=None,
    ):
        self.bus = bus
        self.config = config
        self.name = name or f"collector-{config.output_queue}-{config.collector_index}"
        self.metrics = metrics
        self.span_log = span_log
        self.on_emit = on_emit
        self.on_event = on_event
        self.strategy: Strategy = config.strategy.build()
        self.stats = CollectorStats()
        self.emissions: list[Emission] = []
        self._seen_ids = _LRU(config.dedup_capacity)
        self._seen_tasks = _LRU(config.dedup_capacity)
        self._partitions = config.owned_partitions()
        self._handles: list = []
        self._rr = 0
        self._barrier_times: deque[float] = deque(maxlen=512)
        self._commands: queue_mod.Queue = queue_mod.Queue()
        self._shutdown = threading.Event()
        self._killed = threading.Event()
        self._draining = False
        self._thread: threading.Thread | None = None
        self._last_input = time.monotonic()
        self._last_beat = time.monotonic()
        self.lock = threading.Lock()

    # -- lifecycle -----------------------------------------------------

    def start(self) -> "Collector":
        self._subscribe()
        self._thread = threading.Thread(target=self.run, name=self.name, daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float | None = None) -> CollectorStats:
        self._shutdown.set()
        self.join(timeout)
        return self.stats

    def kill(self) -> None:
        """Die without acking anything; buffered members come back via lease expiry."""
        self._killed.set()
        self._shutdown.set()

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout)

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    @property
    def partitions(self) -> frozenset[int] | None:
        return self._partitions

    def attach(self) -> "Collector":
        """Subscribe without starting the loop (for driving :meth:`step` by hand)."""
        self._subscribe()
        return self

    def _subscribe(self) -> None:
        if self._handles:
            return
        cfg = self.config
        parts = self._partitions
        for q in cfg.input_queues:
            if cfg.one_consumer_per_subject and parts is not None:
                for p in sorted(parts):
                    self._handles.append(self.bus.subscribe(
                        q, cfg.group, partition_filter=[p], max_inflight=cfg.max_inflight))
            else:
                self._handles.append(self.bus.subscribe(
                    q, cfg.group, partition_filter=parts, max_inflight=cfg.max_inflight))

    def _unsubscribe(self) -> None:
        for h in self._handles:
            try:
                self.bus.unsubscribe(h)
            except Exception:
                pass
        self._handles = []

    def _heartbeat_interval(self) -> float:
        if self.config.heartbeat_interval is not None:
            return self.config.heartbeat_interval
        try:
            t = min(self.bus.queue_config(q).ack_timeout for q in self.config.input_queues)
        except (AttributeError, QueueNotFound):
            t = 30.0
        return max(0.05, t / 3)

    # -- control requests (run on the collector thread) ---------------

    def set_partitions(self, partitions, timeout: float | None = 10.0) -> None:
        """Read ``partitions`` from now on (used for takeover after scale-down)."""
        self._request("partitions", frozenset(partitions), timeout)

    def drain(self, grace: float | None = None, timeout: float | None = None) -> DrainReport:
        """Finish pending groups within ``grace`` seconds, give the rest back, and stop."""
        if grace is None:
            grace = self.drain_grace()
        if not self.alive:
            return DrainReport(0, 0)
        return self._request("drain", grace, timeout if timeout is not None else grace + 30)

    def _request(self, kind: str, arg, timeout: float | None):
        if not self.alive:
            if kind == "partitions":
                if self._handles:
                    self._apply_partitions(arg)
                else:
                    self._partitions = arg
            return None
        done = threading.Event()
        box: dict = {}
        self._commands.put((kind, arg, done, box))
        if not done.wait(timeout):
            raise TimeoutError(f"{self.name} did not handle {kind} in time")
        return box.get("result")

    def barrier_p95(self) -> float:
        if not self._barrier_times:
            return self.config.collect_timeout
        xs = sorted(self._barrier_times)
        return xs[min(len(xs) - 1, math.ceil(0.95 * len(xs)) - 1)]

    def drain_grace(self) -> float:
        return 2 * self.barrier_p95()

    # -- main loop -----------------------------------------------------

    def run(self, shutdown: threading.Event | None = None) -> CollectorStats:
        if shutdown is not None:
            self._shutdown = shutdown
        self._subscribe()
        beat_every = self._heartbeat_interval()
        try:
            while not self._shutdown.is_set():
                self._handle_commands()
                if self._shutdown.is_set():
                    break
                now = time.monotonic()
                wait = min(self.config.collect_timeout, beat_every, 0.25)
                got = self._next(wait)
                if self._killed.is_set():
                    break
                now = time.monotonic()
                if got is not None:
                    self._last_input = now
                    self._on_message(*got)
                elif now - self._last_input >= self.config.collect_timeout:
                    self._last_input = now
                    self._apply(self.strategy.flush())
                if now - self._last_beat >= beat_every:
                    self._last_beat = now
                    self._heartbeat_buffered()
                    self._evict_stale(now)
        except Closed:
            pass
        finally:
            self._unsubscribe()
            self._fail_pending_commands()
        return self.stats

    def _next(self, timeout: float):
        if not self._handles:
            time.sleep(timeout)
            return None
        start = self._rr if self.config.one_consumer_per_subject else 0
        self._rr += 1
        try:
            return self.bus.next_any(self._handles, timeout=timeout, start=start)
        except Paused:
            time.sleep(timeout)
            return None

    def _handle_commands(self) -> None:
        while True:
            try:
                kind, arg, done, box = self._commands.get_nowait()
            except queue_mod.Empty:
                return
            try:
                if kind == "partitions":
                    self._apply_partitions(arg)
                elif kind == "drain":
                    box["result"] = self._drain(arg)
                    self._shutdown.set()
            except Exception as exc:
                logger.exception("%s: %s request failed", self.name, kind)
                box["error"] = exc
            finally:
                done.set()

    def _fail_pending_commands(self) -> None:
        while True:
            try:
                kind, arg, done, box = self._commands.get_nowait()
            except queue_mod.Empty:
                return
            if kind == "drain":
                box["result"] = DrainReport(0, 0)
            done.set()

    def _apply_partitions(self, parts: frozenset[int]) -> None:
        self._partitions = parts
        cfg = self.config
        if cfg.one_consumer_per_subject:
            have = {(h.queue, next(iter(h.partition_filter))) for h in self._handles if h.partition_filter}
            for q in cfg.input_queues:
                for p in sorted(parts):
                    if (q, p) not in have:
                        self._handles.append(self.bus.subscribe(q, cfg.group, partition_filter=[p],
                                                                max_inflight=cfg.max_inflight))
        else:
            for h in self._handles:
                self.bus.update_consumer(h, partition_filter=parts)
        logger.info("%s now reads partitions %s", self.name, sorted(parts))

    # -- message handling ----------------------------------------------

    def _on_message(self, handle, env: TaskEnvelope) -> None:
        self.stats.received += 1
        cfg = self.config
        member = Member(env, handle, handle.queue)
        id_key = (handle.queue, env.message_id)
        if id_key in self._seen_ids:
            if self.strategy.adopt(member):
                self.stats.adopted += 1
                return
            self._drop_duplicate(member, "message id")
            return

        try:
            key = extract_group_key(env.payload, cfg.grouping_field)
        except (MissingField, TypeError, ValueError) as exc:
            self._reject(member, str(exc))
            return
        modulus = env.headers.get("x-partitions")
        if cfg.routing == "affine" and modulus is not None:
            expected = self.strategy.select_collector(key, int(modulus))
            if env.partition != expected:
                self._reject(member, f"partition {env.partition} but group routes to {expected} mod {modulus}")
                return

        task_id = env.payload.get("task_id")
        task_key = (task_id, handle.queue) if task_id is not None else None
        if task_key is not None and task_key in self._seen_tasks:
            self._drop_duplicate(member, f"task {task_id}")
            return

        self._seen_ids.add(id_key)
        if task_key is not None:
            self._seen_tasks.add(task_key)
        with child_span(env.trace_context, f"{self.name}.receive", self.span_log, self.metrics):
            pass
        try:
            op = self.strategy.collect(member)
        except Exception:
            logger.exception("%s: strategy failed on message %d; leaving it for redelivery", self.name,
                             env.message_id)
            self._forget(member)
            return
        self._apply(op)
        self._track_buffer()

    def _apply(self, op) -> None:
        if isinstance(op, Finished):
            for entry in op.groups:
                self._emit(entry, op.partial)
        elif isinstance(op, Postpone):
            self.stats.postponed += 1
            self._forget(op.member)
            self._nak(op.member, op.timeout)
        elif isinstance(op, Skip):
            self.stats.skipped += 1
            self._ack(op.member)
        self._event()

    def _emit(self, entry: BufferEntry, partial: bool) -> None:
        cfg = self.config
        members = entry.members
        payload = {cfg.grouping_field: entry.label, "members": [m.payload for m in members]}
        parent = next((m.envelope.trace_context for m in members if m.envelope.trace_context), None)
        with child_span(parent, f"{self.name}.process", self.span_log, self.metrics) as proc:
            pass
        with child_span(proc.context, f"{self.name}.send", self.span_log, self.metrics) as send:
            headers = {"traceparent": send.traceparent, "x-collector": str(cfg.collector_index)}
            if partial:
                headers["x-partial"] = "true"
            self.bus.publish(cfg.output_queue, payload, headers, trace_context=send.traceparent)
        for m in members:
            self._ack(m)
        now = time.monotonic()
        self.stats.groups_completed += 1
        if partial:
            self.stats.partial_emissions += 1
        barrier_time = max(0.0, entry.last_arrival - entry.first_arrival)
        self._barrier_times.append(barrier_time)
        em = Emission(entry.key, entry.label, cfg.collector_index,
                      [(m.queue, m.message_id) for m in members], partial)
        with self.lock:
            self.emissions.append(em)
        if self.metrics:
            self.metrics.inc("groups_completed_total", collector=self.name)
            self.metrics.observe_latency("barrier_completion_seconds", barrier_time)
            self.metrics.observe_latency("collection_latency_seconds", max(0.0, now - entry.first_arrival))
        if self.on_emit is not None:
            self.on_emit(self, em, payload)

    def _event(self) -> None:
        if self.on_event is not None:
            self.on_event(self)

    def _track_buffer(self) -> None:
        members = self.strategy.members()
        n = len(members)
        if n > self.stats.peak_buffer_entries:
            self.stats.peak_buffer_entries = n
        if n >= self.stats.peak_buffer_entries * 0.9:
            size = sum(m.size() for m in members)
            self.stats.peak_buffer_bytes = max(self.stats.peak_buffer_bytes, size)
        if self.metrics:
            self.metrics.set("collector_buffer_groups", len(self.strategy.buffer), collector=self.name)
        self._event()

    def _drop_duplicate(self, member: Member, why: str) -> None:
        self.stats.duplicates_dropped += 1
        if self.metrics:
            self.metrics.inc("dedup_drops_total", collector=self.name)
        logger.debug("%s: dropping duplicate %s", self.name, why)
        self._ack(member)

    def _reject(self, member: Member, why: str) -> None:
        self.stats.mismatches_rejected += 1
        if self.metrics:
            self.metrics.inc("grouping_mismatches_total", collector=self.name)
        logger.warning("%s: rejected message %d from %s: %s", self.name, member.message_id, member.queue, why)
        self._ack(member)

    def _forget(self, member: Member) -> None:
        self._seen_ids.discard((member.queue, member.message_id))
        task_id = member.payload.get("task_id")
        if task_id is not None:
            self._seen_tasks.discard((task_id, member.queue))

    def _ack(self, member: Member) -> None:
        try:
            self.bus.ack(member.handle, member.message_id)
        except NotInflight:
            self.stats.late_acks += 1

    def _nak(self, member: Member, delay: float = 0.0) -> None:
        try:
            self.bus.nak(member.handle, member.message_id, delay)
        except NotInflight:
            pass

    def _heartbeat_buffered(self) -> None:
        for m in self.strategy.members():
            try:
                self.bus.heartbeat(m.handle, m.message_id)
            except NotInflight:
                pass
            except Paused:
                return

    def _evict_stale(self, now: float) -> None:
        ttl = self.config.barrier_ttl
        for key in [k for k, e in self.strategy.buffer.items() if now - e.first_arrival > ttl]:
            entry = self.strategy.discard(key)
            self.stats.evicted += 1
            for m in entry.members:
                self._forget(m)
            logger.warning("%s: evicting group %s after %.1fs with %d/%d members; leases left to expire",
                           self.name, entry.label, now - entry.first_arrival, len(entry.members), entry.expected)

    # -- drain ---------------------------------------------------------

    def _drain(self, grace: float) -> DrainReport:
        start = time.monotonic()
        self.begin_drain()
        deadline = start + grace
        while self.strategy.buffer and time.monotonic() < deadline and not self._killed.is_set():
            self.step(min(0.05, max(0.001, deadline - time.monotonic())))
        report = self.finish_drain()
        report.elapsed = time.monotonic() - start
        logger.info("%s drained: %s", self.name, report)
        return report

    def begin_drain(self) -> None:
        """Stop taking new groups: only members of already-pending groups are accepted."""
        pending = frozenset(self.strategy.buffer)
        field_name = self.config.grouping_field

        def accept(env: TaskEnvelope) -> bool:
            try:
                return extract_group_key(env.payload, field_name) in pending
            except (MissingField, TypeError, ValueError):
                return False

        self._draining = True
        self._drain_start_completed = self.stats.groups_completed
        for h in self._handles:
            self.bus.update_consumer(h, accept=accept)

    def finish_drain(self) -> DrainReport:
        """Give every member of an unfinished group back to the bus and unsubscribe."""
        for h in self._handles:
            self.bus.update_consumer(h, accept=lambda env: False)
        abandoned = 0
        for key in list(self.strategy.buffer):
            entry = self.strategy.discard(key)
            for m in entry.members:
                self._forget(m)
                self._nak(m)
                abandoned += 1
        self._unsubscribe()
        completed = self.stats.groups_completed - getattr(self, "_drain_start_completed", self.stats.groups_completed)
        return DrainReport(completed, abandoned)

    def step(self, timeout: float = 0.0) -> bool:
        """Process at most one delivery; returns whether one arrived."""
        got = self._next(timeout)
        if got is None:
            return False
        self._on_message(*got)
        return True


def route_for(payload: dict, grouping_field: str, num_collectors: int) -> int:
    return partition_of(extract_group_key(payload, grouping_field), num_collectors)
