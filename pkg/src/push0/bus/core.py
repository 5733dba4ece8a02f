"""Embedded persistent priority message bus.

Queues hold messages until every worker group that should see them has
acknowledged them (or routed them to the dead-letter queue).  Within a worker
group each message is held by at most one consumer at a time; unacknowledged
messages come back after ``ack_timeout`` with ``retry_count`` incremented.

All public methods take one bus-wide lock, so operations on a queue are
linearizable.  A sweeper thread expires leases; tests can instead pass
``start_sweeper=False`` plus a fake ``clock`` and call :meth:`Bus.sweep`.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable

from sortedcontainers import SortedList

from push0.bus import log as durable
from push0.model import (
    MissingField,
    Payload,
    PayloadError,
    PriorityKey,
    TaskEnvelope,
    decode_payload,
    encode_payload,
    extract_group_key,
)
from push0.routing import partition_of

logger = logging.getLogger(__name__)

DEFAULT_ACK_WAIT = 30.0
MAX_SWEEP_INTERVAL = 0.25


def default_ack_wait() -> float:
    raw = os.environ.get("ACK_WAIT")
    if raw:
        try:
            value = float(raw)
        except ValueError:
            logger.warning("ignoring malformed ACK_WAIT=%r", raw)
        else:
            if value > 0:
                return value
    return DEFAULT_ACK_WAIT


class BusError(Exception):
    pass


class QueueNotFound(BusError):
    pass


class PayloadTooLarge(BusError):
    pass


class Closed(BusError):
    pass


class WouldBlock(BusError):
    pass


class Paused(BusError):
    pass


class NotInflight(BusError):
    """The message is no longer leased to this consumer (acked, expired or redelivered)."""


@dataclass
class QueueConfig:
    name: str
    max_depth: int = 10_000
    ack_timeout: float = field(default_factory=default_ack_wait)
    max_retries: int = 5
    priority_field: str | None = None
    durable_path: str | None = None
    partitions: int = 1
    partition_field: str | None = None
    max_payload_bytes: int = 1 << 20
    producer_rate: float | None = None
    producer_burst: int = 100
    dead_letter: bool = True

    def __post_init__(self):
        if not self.name:
            raise ValueError("queue name must be non-empty")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.ack_timeout <= 0:
            raise ValueError("ack_timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")

    @property
    def dlq_name(self) -> str:
        return f"{self.name}.dlq"

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(eq=False)
class ConsumerHandle:
    consumer_id: int
    queue: str
    worker_group: str
    partition_filter: frozenset[int] | None = None
    max_inflight: int = 1
    accept: Callable[[TaskEnvelope], bool] | None = None
    inflight: set[int] = field(default_factory=set)
    closed: bool = False

    def wants(self, env: TaskEnvelope) -> bool:
        if self.closed or len(self.inflight) >= self.max_inflight:
            return False
        if self.partition_filter is not None and env.partition not in self.partition_filter:
            return False
        return self.accept is None or self.accept(env)


@dataclass
class InflightRecord:
    message_id: int
    consumer_id: int
    deadline: float
    deliveries: int


@dataclass
class QueueState:
    depth: int = 0
    inflight: int = 0
    delivered_total: int = 0
    dlq_depth: int = 0
    published_total: int = 0
    acked_total: int = 0
    redelivered_total: int = 0
    dead_lettered_total: int = 0
    peak_depth: int = 0
    producer_blocks: int = 0
    paused: bool = False

    def as_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


class _Message:
    __slots__ = ("envelope", "pending", "size")

    def __init__(self, envelope: TaskEnvelope, size: int):
        self.envelope = envelope
        self.pending: set[str] = set()
        self.size = size


class _Group:
    def __init__(self, name: str):
        self.name = name
        self.ready: dict[int, SortedList] = {}
        self.ready_key: dict[int, tuple] = {}
        self.inflight: dict[int, InflightRecord] = {}
        self.delayed: dict[int, float] = {}
        self.deliveries: dict[int, int] = {}
        self.waiters: list[tuple[object, ConsumerHandle]] = []
        self.consumers: set[int] = set()


class _TokenBucket:
    def __init__(self, rate: float, burst: int, now: float):
        self.rate = rate
        self.capacity = float(max(1, burst))
        self.tokens = self.capacity
        self.stamp = now

    def wait_time(self, now: float) -> float:
        self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
        self.stamp = now
        if self.tokens >= 1.0:
            return 0.0
        return (1.0 - self.tokens) / self.rate

    def take(self) -> None:
        self.tokens -= 1.0


class _Queue:
    def __init__(self, config: QueueConfig):
        self.config = config
        self.messages: dict[int, _Message] = {}
        self.groups: dict[str, _Group] = {}
        self.next_id = 1
        self.route_partitions = config.partitions
        self.paused = False
        self.paused_until: float | None = None
        self.state = QueueState()
        self.buckets: dict[str, _TokenBucket] = {}
        self.log: durable.RecordFile | None = None
        self.consumed: durable.RecordFile | None = None

    def sort_key(self, env: TaskEnvelope, retry_count: int) -> tuple:
        if self.config.priority_field:
            block = extract_group_key(env.payload, self.config.priority_field)
            return (PriorityKey.build(block, retry_count, env.enqueue_time), env.message_id)
        return (env.message_id,)


def _ranges(ids: Iterable[int]) -> list[list[int]]:
    out: list[list[int]] = []
    for i in sorted(ids):
        if out and out[-1][1] == i - 1:
            out[-1][1] = i
        else:
            out.append([i, i])
    return out


class Bus:
    """In-process message bus.  See module docstring for semantics."""

    def __init__(
        self,
        durable_path: str | os.PathLike | None = None,
        *,
        clock: Callable[[], float] = time.monotonic,
        start_sweeper: bool = True,
        ack_sync_every: int = 32,
    ):
        self.durable_path = Path(durable_path) if durable_path is not None else None
        self.clock = clock
        self.ack_sync_every = ack_sync_every
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queues: dict[str, _Queue] = {}
        self._consumers: dict[int, ConsumerHandle] = {}
        self._ids = itertools.count(1)
        self._closed = False
        self._sweeper: threading.Thread | None = None
        self._sweep_hooks: list[Callable[["Bus"], None]] = []
        self.recovery_report: dict[str, Any] = {}
        if self.durable_path is not None:
            self.durable_path.mkdir(parents=True, exist_ok=True)
        if start_sweeper:
            self._sweeper = threading.Thread(target=self._sweep_loop, name="bus-sweeper", daemon=True)
            self._sweeper.start()

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def recover(cls, durable_path: str | os.PathLike, **kwargs) -> "Bus":
        """Rebuild a bus from a durable directory.

        Unconsumed messages come back deliverable, including those that were
        leased at crash time; consumed ones never reappear.
        """
        bus = cls(durable_path, **kwargs)
        root = Path(durable_path)
        for qdir in sorted(p for p in root.iterdir() if p.is_dir()):
            cfg_file = qdir / "config.json"
            if not cfg_file.exists():
                continue
            cfg = QueueConfig(**json.loads(cfg_file.read_text()))
            cfg.durable_path = str(root)
            bus.declare_queue(cfg)
        return bus

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify_all()
        if self._sweeper is not None and self._sweeper is not threading.current_thread():
            self._sweeper.join(timeout=2)
        with self._lock:
            for q in self._queues.values():
                for f in (q.log, q.consumed):
                    if f is not None:
                        f.close()

    def __enter__(self) -> "Bus":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def closed(self) -> bool:
        return self._closed

    def add_sweep_hook(self, hook: Callable[["Bus"], None]) -> None:
        """Run ``hook(bus)`` after every background sweep (used for gauges)."""
        self._sweep_hooks.append(hook)

    # -- queues ------------------------------------------------------------

    def declare_queue(self, config: QueueConfig | str, **overrides) -> QueueConfig:
        """Create a queue (and its dead-letter queue) if it does not exist yet."""
        if isinstance(config, str):
            config = QueueConfig(name=config, **overrides)
        elif overrides:
            config = replace(config, **overrides)
        with self._cond:
            self._check_open()
            existing = self._queues.get(config.name)
            if existing is not None:
                return existing.config
            if config.durable_path is None and self.durable_path is not None:
                config = replace(config, durable_path=str(self.durable_path))
            q = _Queue(config)
            self._queues[config.name] = q
            if config.durable_path:
                self._open_store(q)
            if config.dead_letter and config.dlq_name not in self._queues:
                dlq = QueueConfig(
                    name=config.dlq_name,
                    max_depth=2**62,
                    ack_timeout=config.ack_timeout,
                    max_retries=config.max_retries,
                    durable_path=config.durable_path,
                    max_payload_bytes=config.max_payload_bytes + 4096,
                    dead_letter=False,
                )
                dq = _Queue(dlq)
                self._queues[dlq.name] = dq
                if dlq.durable_path:
                    self._open_store(dq)
            return config

    def queues(self) -> list[str]:
        with self._lock:
            return list(self._queues)

    def queue_config(self, queue: str) -> QueueConfig:
        with self._lock:
            return self._queue(queue).config

    def set_routing(self, queue: str, partitions: int) -> None:
        """Switch publishers of ``queue`` to ``partitions``-way routing."""
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        with self._cond:
            self._queue(queue).route_partitions = partitions

    def routing(self, queue: str) -> int:
        with self._lock:
            return self._queue(queue).route_partitions

    def _queue(self, name: str) -> _Queue:
        q = self._queues.get(name)
        if q is None:
            raise QueueNotFound(name)
        return q

    def _check_open(self) -> None:
        if self._closed:
            raise Closed("bus is closed")

    # -- durability --------------------------------------------------------

    def _open_store(self, q: _Queue) -> None:
        qdir = Path(q.config.durable_path) / q.config.name
        qdir.mkdir(parents=True, exist_ok=True)
        cfg_path = qdir / "config.json"
        cfg = q.config.to_dict()
        cfg.pop("durable_path", None)
        cfg_path.write_text(json.dumps(cfg, sort_keys=True))
        q.log = durable.RecordFile(qdir / "log.bin", sync_every=1)
        q.consumed = durable.RecordFile(qdir / "consumed.bin", sync_every=self.ack_sync_every)
        report = {
            "log_records": len(q.log.replayed.records),
            "log_discarded_bytes": q.log.replayed.discarded_bytes,
            "consumed_discarded_bytes": q.consumed.replayed.discarded_bytes,
        }
        self.recovery_report[q.config.name] = report
        self._replay(q)

    def _replay(self, q: _Queue) -> None:
        assert q.log is not None and q.consumed is not None
        envelopes: list[TaskEnvelope] = []
        for kind, body in q.log.replayed.records:
            if kind != durable.KIND_PUBLISH:
                raise durable.CorruptLog(f"{q.config.name}: unexpected record kind {kind} in log")
            envelopes.append(TaskEnvelope.from_dict(json.loads(body)))
        groups: dict[str, dict[str, Any]] = {}
        done: dict[str, set[int]] = {}
        deliveries: dict[str, dict[int, int]] = {}
        for kind, body in q.consumed.replayed.records:
            rec = json.loads(body)
            if kind == durable.KIND_GROUP:
                groups.setdefault(rec["g"], rec)
            elif kind in (durable.KIND_ACK, durable.KIND_DLQ):
                done.setdefault(rec["g"], set()).add(rec["id"])
            elif kind == durable.KIND_REDELIVER:
                deliveries.setdefault(rec["g"], {})[rec["id"]] = rec["n"]
            else:
                raise durable.CorruptLog(f"{q.config.name}: unexpected record kind {kind} in sidecar")
        for name in groups:
            q.groups[name] = _Group(name)
        for env in envelopes:
            q.next_id = max(q.next_id, env.message_id + 1)
            eligible = []
            for name, rec in groups.items():
                adopted = env.message_id > rec["at"] or any(lo <= env.message_id <= hi for lo, hi in rec["adopted"])
                if adopted and env.message_id not in done.get(name, ()):
                    eligible.append(name)
            if groups and not eligible:
                continue
            msg = _Message(env, len(encode_payload(env.payload)))
            q.messages[env.message_id] = msg
            for name in eligible:
                g = q.groups[name]
                n = deliveries.get(name, {}).get(env.message_id, 0)
                if n:
                    g.deliveries[env.message_id] = n
                msg.pending.add(name)
                self._push_ready(q, g, msg, n)
        q.state.depth = len(q.messages)
        q.state.peak_depth = q.state.depth
        if q.messages:
            logger.info("%s: recovered %d unconsumed messages", q.config.name, len(q.messages))

    # -- publish -----------------------------------------------------------

    def publish(
        self,
        queue: str,
        payload: Payload,
        headers: dict[str, str] | None = None,
        *,
        trace_context: str | None = None,
        partition: int | None = None,
        block: bool = True,
        timeout: float | None = None,
        producer: str | None = None,
    ) -> int:
        """Append ``payload`` to ``queue`` and return its message id.

        Blocks while the queue is at ``max_depth`` or paused; with
        ``block=False`` raises :class:`WouldBlock` / :class:`Paused` instead.
        """
        data = encode_payload(payload)
        headers = dict(headers or {})
        if trace_context is None:
            trace_context = headers.get("traceparent")
        with self._cond:
            self._check_open()
            q = self._queue(queue)
            if len(data) > q.config.max_payload_bytes:
                raise PayloadTooLarge(f"{len(data)} bytes > {q.config.max_payload_bytes} on {queue}")
            if q.config.priority_field:
                extract_group_key(payload, q.config.priority_field)
            self._await_capacity(q, block, timeout, producer)
            return self._append(q, decode_payload(data), data, headers, trace_context, partition)

    def _await_capacity(self, q: _Queue, block: bool, timeout: float | None, producer: str | None) -> None:
        deadline = None if timeout is None else self.clock() + timeout
        counted = False
        while True:
            self._check_open()
            now = self.clock()
            wait = None
            if self._paused(q, now):
                if not block:
                    raise Paused(q.config.name)
                wait = self._pause_remaining(q, now)
            elif q.state.depth >= q.config.max_depth:
                if not counted:
                    q.state.producer_blocks += 1
                    counted = True
                if not block:
                    raise WouldBlock(f"{q.config.name} at max_depth={q.config.max_depth}")
            elif producer is not None and q.config.producer_rate:
                bucket = q.buckets.get(producer)
                if bucket is None:
                    bucket = q.buckets[producer] = _TokenBucket(q.config.producer_rate, q.config.producer_burst, now)
                delay = bucket.wait_time(now)
                if delay <= 0:
                    bucket.take()
                    return
                if not block:
                    raise WouldBlock(f"producer {producer} rate-limited on {q.config.name}")
                wait = delay
            else:
                return
            if deadline is not None:
                remaining = deadline - now
                if remaining <= 0:
                    raise WouldBlock(f"timed out waiting to publish to {q.config.name}")
                wait = remaining if wait is None else min(wait, remaining)
            self._cond.wait(wait if wait is not None else 0.5)

    def _append(
        self,
        q: _Queue,
        payload: Payload,
        data: bytes,
        headers: dict[str, str],
        trace_context: str | None,
        partition: int | None,
    ) -> int:
        if partition is None:
            partition = 0
            if q.config.partition_field and q.route_partitions > 1:
                key = extract_group_key(payload, q.config.partition_field)
                partition = partition_of(key, q.route_partitions)
        if q.config.partition_field:
            headers.setdefault("x-partitions", str(q.route_partitions))
        env = TaskEnvelope(
            message_id=q.next_id,
            payload=payload,
            enqueue_time=time.time_ns(),
            trace_context=trace_context,
            headers=headers,
            queue=q.config.name,
            partition=partition,
        )
        if q.log is not None:
            q.log.append(durable.KIND_PUBLISH, json.dumps(env.to_dict(), sort_keys=True).encode())
        q.next_id += 1
        msg = _Message(env, len(data))
        q.messages[env.message_id] = msg
        for g in q.groups.values():
            msg.pending.add(g.name)
            self._push_ready(q, g, msg, 0)
        st = q.state
        st.published_total += 1
        st.depth = len(q.messages)
        st.peak_depth = max(st.peak_depth, st.depth)
        self._cond.notify_all()
        return env.message_id

    # -- consumers ---------------------------------------------------------

    def subscribe(
        self,
        queue: str,
        worker_group: str | None = None,
        *,
        partition_filter: Iterable[int] | None = None,
        max_inflight: int = 1,
        accept: Callable[[TaskEnvelope], bool] | None = None,
    ) -> ConsumerHandle:
        """Join ``worker_group`` on ``queue``; a new group sees every retained message."""
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        worker_group = worker_group or queue
        with self._cond:
            self._check_open()
            q = self._queue(queue)
            g = q.groups.get(worker_group)
            if g is None:
                g = self._create_group(q, worker_group)
            handle = ConsumerHandle(
                consumer_id=next(self._ids),
                queue=queue,
                worker_group=worker_group,
                partition_filter=frozenset(partition_filter) if partition_filter is not None else None,
                max_inflight=max_inflight,
                accept=accept,
            )
            self._consumers[handle.consumer_id] = handle
            g.consumers.add(handle.consumer_id)
            return handle

    def _create_group(self, q: _Queue, name: str) -> _Group:
        g = _Group(name)
        q.groups[name] = g
        if q.consumed is not None:
            rec = {"g": name, "at": q.next_id - 1, "adopted": _ranges(q.messages)}
            q.consumed.append(durable.KIND_GROUP, json.dumps(rec).encode(), sync=True)
        for msg in q.messages.values():
            msg.pending.add(name)
            self._push_ready(q, g, msg, 0)
        self._cond.notify_all()
        return g

    def unsubscribe(self, handle: ConsumerHandle) -> None:
        """Detach a consumer.  Its leases stay held until they expire."""
        with self._cond:
            handle.closed = True
            self._consumers.pop(handle.consumer_id, None)
            q = self._queues.get(handle.queue)
            if q is not None:
                g = q.groups.get(handle.worker_group)
                if g is not None:
                    g.consumers.discard(handle.consumer_id)
            self._cond.notify_all()

    def update_consumer(
        self,
        handle: ConsumerHandle,
        *,
        partition_filter: Iterable[int] | None | type(...) = ...,
        accept: Callable[[TaskEnvelope], bool] | None | type(...) = ...,
    ) -> None:
        with self._cond:
            if partition_filter is not ...:
                handle.partition_filter = frozenset(partition_filter) if partition_filter is not None else None
            if accept is not ...:
                handle.accept = accept
            self._cond.notify_all()

    def next(self, handle: ConsumerHandle, timeout: float | None = None) -> TaskEnvelope | None:
        """Lease the next eligible message, waiting up to ``timeout`` seconds.

        Returns ``None`` on timeout.  ``timeout=None`` waits indefinitely.
        """
        got = self.next_any([handle], timeout=timeout)
        return None if got is None else got[1]

    def try_next(self, handle: ConsumerHandle) -> TaskEnvelope | None:
        return self.next(handle, timeout=0)

    def next_any(
        self, handles: list[ConsumerHandle], timeout: float | None = None, start: int = 0
    ) -> tuple[ConsumerHandle, TaskEnvelope] | None:
        """Lease from whichever of ``handles`` has an eligible message first.

        Handles are tried round-robin from ``start``.  Consumers waiting in the
        same worker group are served in arrival order.
        """
        if not handles:
            raise ValueError("no consumers given")
        deadline = None if timeout is None else self.clock() + timeout
        order = handles[start % len(handles):] + handles[: start % len(handles)]
        ticket = object()
        with self._cond:
            groups = []
            for h in order:
                g = self._queue(h.queue).groups[h.worker_group]
                g.waiters.append((ticket, h))
                groups.append(g)
            delivered = False
            try:
                while True:
                    self._check_open()
                    now = self.clock()
                    wait_cap = None
                    for h, g in zip(order, groups):
                        if h.closed:
                            raise Closed(f"consumer {h.consumer_id} is closed")
                        q = self._queues[h.queue]
                        if self._paused(q, now):
                            wait_cap = _min(wait_cap, self._pause_remaining(q, now))
                            continue
                        if g.delayed:
                            self._promote_delayed(q, g, now)
                            if g.delayed:
                                wait_cap = _min(wait_cap, max(0.001, min(g.delayed.values()) - now))
                        if len(h.inflight) >= h.max_inflight:
                            continue
                        cand = self._candidate(q, g, h)
                        if cand is None or self._earlier_waiter_wants(g, ticket, cand):
                            continue
                        delivered = True
                        return h, self._deliver(q, g, h, cand, now)
                    if deadline is not None:
                        remaining = deadline - now
                        if remaining <= 0:
                            return None
                        wait_cap = _min(wait_cap, remaining)
                    self._cond.wait(wait_cap if wait_cap is not None else 1.0)
            finally:
                for g in groups:
                    for i, (t, _) in enumerate(g.waiters):
                        if t is ticket:
                            del g.waiters[i]
                            break
                if delivered or groups:
                    self._cond.notify_all()

    def _candidate(self, q: _Queue, g: _Group, h: ConsumerHandle) -> TaskEnvelope | None:
        parts = g.ready.keys() if h.partition_filter is None else [p for p in h.partition_filter if p in g.ready]
        best = None
        best_key = None
        for p in parts:
            sl = g.ready[p]
            if not sl:
                continue
            if h.accept is None:
                key = sl[0]
                if best_key is None or key < best_key:
                    best_key = key
                    best = q.messages[key[-1]].envelope
                continue
            for key in sl:
                if best_key is not None and key >= best_key:
                    break
                env = q.messages[key[-1]].envelope
                if h.accept(env):
                    best_key, best = key, env
                    break
        return best

    @staticmethod
    def _earlier_waiter_wants(g: _Group, ticket: object, env: TaskEnvelope) -> bool:
        for t, other in g.waiters:
            if t is ticket:
                return False
            if other.wants(env):
                return True
        return False

    def _deliver(self, q: _Queue, g: _Group, h: ConsumerHandle, env: TaskEnvelope, now: float) -> TaskEnvelope:
        mid = env.message_id
        self._pop_ready(g, mid)
        n = g.deliveries.get(mid, 0) + 1
        g.deliveries[mid] = n
        g.inflight[mid] = InflightRecord(mid, h.consumer_id, now + q.config.ack_timeout, n)
        h.inflight.add(mid)
        q.state.delivered_total += 1
        q.state.inflight = sum(len(x.inflight) for x in q.groups.values())
        return env.with_retry(n - 1) if n > 1 else env

    def _push_ready(self, q: _Queue, g: _Group, msg: _Message, retry_count: int) -> None:
        env = msg.envelope
        key = q.sort_key(env, retry_count)
        g.ready_key[env.message_id] = (env.partition, key)
        sl = g.ready.get(env.partition)
        if sl is None:
            sl = g.ready[env.partition] = SortedList()
        sl.add(key)

    @staticmethod
    def _pop_ready(g: _Group, mid: int) -> None:
        entry = g.ready_key.pop(mid, None)
        if entry is not None:
            part, key = entry
            g.ready[part].remove(key)

    def _promote_delayed(self, q: _Queue, g: _Group, now: float) -> None:
        due = [mid for mid, t in g.delayed.items() if t <= now]
        for mid in due:
            del g.delayed[mid]
            msg = q.messages.get(mid)
            if msg is not None and g.name in msg.pending:
                self._push_ready(q, g, msg, g.deliveries.get(mid, 0))
        if due:
            self._cond.notify_all()

    # -- lease operations --------------------------------------------------

    def _lease(self, handle: ConsumerHandle, message_id: int, block: bool = True) -> tuple[_Queue, _Group, InflightRecord]:
        while True:
            self._check_open()
            q = self._queue(handle.queue)
            now = self.clock()
            if not self._paused(q, now):
                break
            if not block:
                raise Paused(q.config.name)
            self._cond.wait(self._pause_remaining(q, now))
        g = q.groups[handle.worker_group]
        rec = g.inflight.get(message_id)
        if rec is None or rec.consumer_id != handle.consumer_id:
            raise NotInflight(f"message {message_id} is not leased to consumer {handle.consumer_id}")
        return q, g, rec

    def ack(self, handle: ConsumerHandle, message_id: int) -> None:
        """Mark the message consumed for the handle's group; it is never redelivered."""
        with self._cond:
            q, g, rec = self._lease(handle, message_id)
            del g.inflight[message_id]
            handle.inflight.discard(message_id)
            g.deliveries.pop(message_id, None)
            if q.consumed is not None:
                q.consumed.append(durable.KIND_ACK, json.dumps({"g": g.name, "id": message_id}).encode())
            q.state.acked_total += 1
            self._settle(q, g, message_id)

    def nak(self, handle: ConsumerHandle, message_id: int, delay: float = 0.0) -> None:
        """Give the message back for redelivery, after ``delay`` seconds."""
        with self._cond:
            q, g, rec = self._lease(handle, message_id)
            del g.inflight[message_id]
            handle.inflight.discard(message_id)
            self._requeue(q, g, rec, self.clock(), delay)
            self._cond.notify_all()

    def heartbeat(self, handle: ConsumerHandle, message_id: int) -> None:
        """Extend the lease on ``message_id`` to now + ack_timeout."""
        with self._cond:
            q, g, rec = self._lease(handle, message_id)
            rec.deadline = self.clock() + q.config.ack_timeout

    def _requeue(self, q: _Queue, g: _Group, rec: InflightRecord, now: float, delay: float = 0.0) -> None:
        msg = q.messages[rec.message_id]
        if q.consumed is not None:
            body = {"g": g.name, "id": rec.message_id, "n": rec.deliveries}
            q.consumed.append(durable.KIND_REDELIVER, json.dumps(body).encode())
        q.state.redelivered_total += 1
        if delay > 0:
            g.delayed[rec.message_id] = now + delay
        else:
            self._push_ready(q, g, msg, rec.deliveries)
        q.state.inflight = sum(len(x.inflight) for x in q.groups.values())

    def _settle(self, q: _Queue, g: _Group, message_id: int) -> None:
        msg = q.messages.get(message_id)
        if msg is not None:
            msg.pending.discard(g.name)
            if not msg.pending:
                del q.messages[message_id]
        q.state.depth = len(q.messages)
        q.state.inflight = sum(len(x.inflight) for x in q.groups.values())
        self._cond.notify_all()

    # -- sweeping ----------------------------------------------------------

    def sweep(self, now: float | None = None) -> int:
        """Expire overdue leases; returns how many messages were requeued or dead-lettered."""
        with self._cond:
            return self._sweep_locked(self.clock() if now is None else now)

    def _sweep_locked(self, now: float) -> int:
        count = 0
        for q in list(self._queues.values()):
            if self._paused(q, now):
                continue
            for g in q.groups.values():
                if g.delayed:
                    self._promote_delayed(q, g, now)
                expired = [r for r in g.inflight.values() if r.deadline <= now]
                for rec in expired:
                    del g.inflight[rec.message_id]
                    owner = self._consumers.get(rec.consumer_id)
                    if owner is not None:
                        owner.inflight.discard(rec.message_id)
                    if q.config.dead_letter and rec.deliveries > q.config.max_retries:
                        self._dead_letter(q, g, rec)
                    else:
                        self._requeue(q, g, rec, now)
                    count += 1
            if q.consumed is not None:
                q.consumed.sync()
        if count:
            self._cond.notify_all()
        return count

    def _dead_letter(self, q: _Queue, g: _Group, rec: InflightRecord) -> None:
        msg = q.messages[rec.message_id]
        env = msg.envelope
        headers = dict(env.headers)
        headers.update({
            "x-dlq-source": q.config.name,
            "x-dlq-group": g.name,
            "x-dlq-message-id": str(env.message_id),
            "x-dlq-deliveries": str(rec.deliveries),
        })
        dlq = self._queues[q.config.dlq_name]
        self._append(dlq, env.payload, encode_payload(env.payload), headers, env.trace_context, 0)
        g.deliveries.pop(rec.message_id, None)
        if q.consumed is not None:
            q.consumed.append(durable.KIND_DLQ, json.dumps({"g": g.name, "id": rec.message_id}).encode(), sync=True)
        q.state.dead_lettered_total += 1
        logger.warning(
            "%s: message %d exceeded %d retries in group %s; moved to %s",
            q.config.name, rec.message_id, q.config.max_retries, g.name, dlq.config.name,
        )
        self._settle(q, g, rec.message_id)

    def sweep_interval(self) -> float:
        with self._lock:
            timeouts = [q.config.ack_timeout / 4 for q in self._queues.values()]
        return min([MAX_SWEEP_INTERVAL, *timeouts])

    def _sweep_loop(self) -> None:
        while True:
            interval = self.sweep_interval()
            with self._cond:
                if self._closed:
                    return
                self._cond.wait_for(lambda: self._closed, timeout=interval)
                if self._closed:
                    return
                self._sweep_locked(self.clock())
            for hook in self._sweep_hooks:
                try:
                    hook(self)
                except Exception:
                    logger.exception("sweep hook failed")

    # -- pause / inspection ------------------------------------------------

    def _paused(self, q: _Queue, now: float) -> bool:
        if not q.paused:
            return False
        if q.paused_until is not None and now >= q.paused_until:
            q.paused = False
            q.paused_until = None
            q.state.paused = False
            self._cond.notify_all()
            return False
        return True

    @staticmethod
    def _pause_remaining(q: _Queue, now: float) -> float:
        if q.paused_until is None:
            return 0.5
        return max(0.001, q.paused_until - now)

    def pause(self, queue: str | None = None, duration: float | None = None) -> None:
        """Freeze ``queue`` (all queues when None) for ``duration`` seconds or until resume()."""
        with self._cond:
            targets = self._queues.values() if queue is None else [self._queue(queue)]
            until = None if duration is None else self.clock() + duration
            for q in targets:
                q.paused = True
                q.paused_until = until
                q.state.paused = True

    def resume(self, queue: str | None = None) -> None:
        with self._cond:
            targets = self._queues.values() if queue is None else [self._queue(queue)]
            for q in targets:
                q.paused = False
                q.paused_until = None
                q.state.paused = False
            self._cond.notify_all()

    def stream_state(self, queue: str) -> QueueState:
        with self._lock:
            q = self._queue(queue)
            self._paused(q, self.clock())
            st = replace(q.state)
            st.depth = len(q.messages)
            st.inflight = sum(len(g.inflight) for g in q.groups.values())
            dlq = self._queues.get(q.config.dlq_name)
            st.dlq_depth = len(dlq.messages) if dlq is not None else 0
            return st

    def peek(self, queue: str) -> list[TaskEnvelope]:
        """Retained messages of ``queue`` in id order (for inspection and tests)."""
        with self._lock:
            q = self._queue(queue)
            return [q.messages[i].envelope for i in sorted(q.messages)]

    def groups(self, queue: str) -> list[str]:
        with self._lock:
            return list(self._queue(queue).groups)


def _min(a: float | None, b: float) -> float:
    return b if a is None else min(a, b)


__all__ = [
    "Bus",
    "BusError",
    "Closed",
    "ConsumerHandle",
    "InflightRecord",
    "MissingField",
    "NotInflight",
    "Paused",
    "PayloadError",
    "PayloadTooLarge",
    "QueueConfig",
    "QueueNotFound",
    "QueueState",
    "WouldBlock",
    "default_ack_wait",
]
