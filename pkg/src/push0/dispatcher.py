"""Stateless worker loop: pull a task, run the prover, publish the result, then ack.

The ack always comes last.  A dispatcher that dies anywhere before it leaves
the input leased; the bus redelivers it after the ack timeout, so work is
never lost, only possibly repeated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from push0.bus.core import Closed, NotInflight, Paused, QueueNotFound
from push0.executor import ExecutionError, Executor, ExecutorSpec, SimulatedCrash
from push0.model import Payload, TaskEnvelope, encode_payload
from push0.observability import MetricsRegistry, SpanLog, child_span

logger = logging.getLogger(__name__)

PASS_THROUGH = ("block_num", "task_id")


class ResultStore:
    """task_id -> output digest, optionally persisted as JSON lines."""

    def __init__(self, path: str | os.PathLike | None = None):
        self._lock = threading.Lock()
        self._data: dict[str, str] = {}
        self._fh = None
        if path is not None:
            p = Path(path)
            p.parent.mkdir(parents=True, exist_ok=True)
            if p.exists():
                for line in p.read_text().splitlines():
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("%s: skipping torn result-store line", p)
                        continue
                    self._data[rec["task_id"]] = rec["digest"]
            self._fh = open(p, "a", encoding="utf-8")

    def get(self, task_id: str) -> str | None:
        with self._lock:
            return self._data.get(task_id)

    def __contains__(self, task_id: str) -> bool:
        return self.get(task_id) is not None

    def put(self, task_id: str, output: Payload) -> str:
        digest = hashlib.sha256(encode_payload(output)).hexdigest()
        with self._lock:
            if task_id not in self._data:
                self._data[task_id] = digest
                if self._fh is not None:
                    self._fh.write(json.dumps({"task_id": task_id, "digest": digest}) + "\n")
                    self._fh.flush()
                    os.fsync(self._fh.fileno())
        return digest

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class Redundancy:
    n: int
    prefix: str

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("redundancy fan-out n must be >= 1")

    def queues(self) -> list[str]:
        return [f"{self.prefix}.{i}" for i in range(self.n)]


@dataclass
class DispatcherConfig:
    input_queue: str
    output_queue: str | None = None
    executor: ExecutorSpec | None = None
    worker_group: str | None = None
    idempotency: bool = False
    result_store: ResultStore | None = None
    max_inflight: int = 1
    redundancy: Redundancy | None = None
    poll_timeout: float = 0.2
    ack_delay: float = 0.0

    def __post_init__(self):
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        if self.redundancy is None:
            if self.executor is None or self.output_queue is None:
                raise ValueError("a dispatcher needs an executor and an output queue")
            if self.input_queue == self.output_queue:
                raise ValueError("input_queue and output_queue must differ")
        elif self.input_queue in self.redundancy.queues():
            raise ValueError("fan-out queues must differ from the input queue")
        if self.idempotency and self.result_store is None:
            self.result_store = ResultStore()

    @property
    def group(self) -> str:
        return self.worker_group or self.input_queue


@dataclass
class RunStats:
    tasks_executed: int = 0
    tasks_skipped_idempotent: int = 0
    results_published: int = 0
    acks: int = 0
    failures: int = 0
    late_acks: int = 0
    deliveries: int = 0
    crashed: bool = False


class Dispatcher:
    """One dispatcher instance; run it in a thread with :meth:`start` or call :meth:`run`."""

    def __init__(
        self,
        bus,
        config: DispatcherConfig,
        *,
        name: str | None = None,
        metrics: MetricsRegistry | None = None,
        span_log: SpanLog | None = None,
        on_pickup: Callable[["Dispatcher", TaskEnvelope], None] | None = None,
        on_complete: Callable[["Dispatcher", TaskEnvelope, Payload], None] | None = None,
    ):
        self.bus = bus
        self.config = config
        self.name = name or f"dispatcher-{config.input_queue}"
        self.metrics = metrics
        self.span_log = span_log
        self.on_pickup = on_pickup
        self.on_complete = on_complete
        self.executor = Executor(config.executor) if config.executor is not None else None
        self.stats = RunStats()
        self._shutdown = threading.Event()
        self._killed = threading.Event()
        self._thread: threading.Thread | None = None
        self._handle = None

    # -- lifecycle -----------------------------------------------------

    def start(self) -> "Dispatcher":
        self._handle = self.bus.subscribe(
            self.config.input_queue, self.config.group, max_inflight=self.config.max_inflight
        )
        self._thread = threading.Thread(target=self.run, name=self.name, daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float | None = None) -> RunStats:
        """Finish the current task, then exit."""
        self._shutdown.set()
        self.join(timeout)
        return self.stats

    def kill(self) -> None:
        """Die immediately: abandon the current task without publishing or acking."""
        self._killed.set()
        self._shutdown.set()

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout)

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    @property
    def killed(self) -> bool:
        return self._killed.is_set()

    def run(self, shutdown: threading.Event | None = None) -> RunStats:
        if shutdown is not None:
            self._shutdown = shutdown
        if self._handle is None:
            self._handle = self.bus.subscribe(
                self.config.input_queue, self.config.group, max_inflight=self.config.max_inflight
            )
        try:
            while not self._shutdown.is_set():
                try:
                    env = self.bus.next(self._handle, timeout=self.config.poll_timeout)
                except Paused:
                    time.sleep(self.config.poll_timeout)
                    continue
                except (Closed, QueueNotFound):
                    break
                if env is None:
                    continue
                if self._killed.is_set():
                    break
                self.stats.deliveries += 1
                if self.on_pickup is not None:
                    self.on_pickup(self, env)
                try:
                    self._process(env)
                except Closed:
                    break
        finally:
            try:
                self.bus.unsubscribe(self._handle)
            except Exception:
                pass
        return self.stats

    # -- one task ------------------------------------------------------

    def _process(self, env: TaskEnvelope) -> None:
        if self.config.redundancy is not None:
            self.dispatch_redundant(env)
            return
        cfg = self.config
        handle = self._handle
        task_id = env.payload.get("task_id")
        receive = child_span(env.trace_context, f"{self.name}.receive", self.span_log, self.metrics)
        receive.finish()

        if cfg.idempotency and task_id is not None and task_id in cfg.result_store:
            self.stats.tasks_skipped_idempotent += 1
            if self.metrics:
                self.metrics.inc("tasks_skipped_idempotent_total", stage=cfg.input_queue)
            self._ack(env)
            return

        def beat() -> None:
            self.bus.heartbeat(handle, env.message_id)

        process = child_span(receive.context, f"{self.name}.process", self.span_log, self.metrics)
        try:
            result = self.executor.execute(env.payload, heartbeat_hook=beat, cancel=self._killed)
        except SimulatedCrash:
            logger.error("%s: crashed while holding message %d", self.name, env.message_id)
            self.stats.crashed = True
            self.kill()
            return
        except ExecutionError as exc:
            if self._killed.is_set():
                return
            self.stats.failures += 1
            if self.metrics:
                self.metrics.inc("task_failures_total", stage=cfg.input_queue)
            logger.warning("%s: task %s failed (%s); leaving it for redelivery", self.name, task_id, exc)
            return
        finally:
            process.finish()
        if self._killed.is_set():
            return
        self.stats.tasks_executed += 1
        if self.metrics:
            self.metrics.observe_latency("prover_duration_seconds", result.wall_time, stage=cfg.input_queue)

        out = dict(result.output)
        for key in PASS_THROUGH:
            if key in env.payload:
                out[key] = env.payload[key]
        with child_span(process.context, f"{self.name}.send", self.span_log, self.metrics) as send:
            self.bus.publish(cfg.output_queue, out, {"traceparent": send.traceparent},
                             trace_context=send.traceparent)
        self.stats.results_published += 1
        if cfg.idempotency and task_id is not None:
            cfg.result_store.put(task_id, out)
        if cfg.ack_delay > 0 and self._killed.wait(cfg.ack_delay):
            return
        if self._killed.is_set():
            return
        self._ack(env)
        done_ns = time.time_ns()
        if self.metrics:
            self.metrics.inc("tasks_processed_total", stage=cfg.input_queue)
            self.metrics.observe_latency("dispatch_latency_seconds", (done_ns - env.enqueue_time) / 1e9,
                                         stage=cfg.input_queue)
        if self.on_complete is not None:
            self.on_complete(self, env, out)

    def _ack(self, env: TaskEnvelope) -> None:
        try:
            self.bus.ack(self._handle, env.message_id)
            self.stats.acks += 1
        except NotInflight:
            # Lease expired first; the redelivered copy is handled by dedup downstream.
            self.stats.late_acks += 1

    def dispatch_redundant(self, env: TaskEnvelope) -> None:
        """Copy the task to every ``<prefix>.i`` queue, then ack the original."""
        red = self.config.redundancy
        with child_span(env.trace_context, f"{self.name}.fanout", self.span_log, self.metrics) as span:
            for q in red.queues():
                self.bus.publish(q, env.payload, {"traceparent": span.traceparent}, trace_context=span.traceparent)
                self.stats.results_published += 1
        if self._killed.is_set():
            return
        self._ack(env)


def worker_main(args) -> int:
    """Entry point for ``push0 worker dispatcher``: a dispatcher in its own process."""
    from push0.bus.remote import RemoteBus
    from push0.executor import SimBehavior

    bus = RemoteBus.from_address(args.connect)
    if args.binary:
        spec = ExecutorSpec("subprocess", binary_path=args.binary, extra_args=list(args.extra_arg or []),
                            heartbeat_interval=args.heartbeat)
    else:
        behavior = SimBehavior(
            kind=args.sim,
            duration=args.duration,
            at_nth=args.crash_at,
            probability=args.crash_probability,
            crash_mode="exit",
            seed=args.seed,
        )
        spec = ExecutorSpec("simulated", behavior=behavior, heartbeat_interval=args.heartbeat)
    cfg = DispatcherConfig(args.input, args.output, spec, worker_group=args.group, ack_delay=args.ack_delay)
    d = Dispatcher(bus, cfg, name=args.name or f"worker-{os.getpid()}")
    try:
        d.run()
    except KeyboardInterrupt:
        pass
    finally:
        bus.close()
    logger.info("%s finished: %s", d.name, d.stats)
    return 0


def stats_dict(stats: RunStats) -> dict[str, Any]:
    return dict(stats.__dict__)
