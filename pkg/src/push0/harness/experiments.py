"""Workload injection, fault injection and measurement for each experiment.

Every experiment builds its own bus and workers, runs to completion, tears
everything down and returns an :class:`ExperimentReport` whose verdicts
encode the acceptance thresholds.  Durations use the monotonic clock.
"""

from __future__ import annotations

import logging
import math
import os
import random
import signal
import statistics
import subprocess
import sys
import tempfile
import threading
import time
import urllib.request
from pathlib import Path
from typing import Callable

from push0.bus.core import Bus, QueueConfig
from push0.bus.remote import BusServer
from push0.collector import Collector, CollectorConfig, StrategySpec, fragmentation_probability
from push0.dispatcher import Dispatcher, DispatcherConfig
from push0.executor import ExecutorSpec, SimBehavior
from push0.harness.report import ExperimentReport, describe
from push0.observability import MetricsRegistry, SpanLog, TraceContext, child_span, serve_metrics, trace_id_of, watch_bus
from push0.pipeline import launch, parse
from push0.routing import partition_of

logger = logging.getLogger(__name__)


def wait_for(pred: Callable[[], bool], timeout: float, poll: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while True:
        if pred():
            return True
        if time.monotonic() >= deadline:
            return False
        time.sleep(poll)


def _depth(bus, queue: str) -> int:
    return bus.stream_state(queue).depth


def _stop(workers, kill: bool = False) -> None:
    for w in workers:
        if kill:
            w.kill()
        else:
            w._shutdown.set()
    for w in workers:
        w.join(5)


def _finish(report: ExperimentReport, t0: float) -> ExperimentReport:
    report.duration = time.monotonic() - t0
    logger.info(report.line())
    return report


def binomial_envelope(n: int, p: float, confidence: float = 0.999) -> tuple[int, int]:
    """Central interval [lo, hi] holding at least ``confidence`` of Binomial(n, p)."""
    tail = (1 - confidence) / 2
    pmf = [math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(n + 1)]
    lo, acc = 0, 0.0
    while lo < n and acc + pmf[lo] <= tail:
        acc += pmf[lo]
        lo += 1
    hi, acc = n, 0.0
    while hi > 0 and acc + pmf[hi] <= tail:
        acc += pmf[hi]
        hi -= 1
    return lo, hi


# -- orchestration overhead ------------------------------------------------

def _latency_run(rate: float, n_tasks: int, dispatchers: int) -> dict:
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", max_depth=max(1, n_tasks) + 10))
    bus.declare_queue(QueueConfig("results", max_depth=max(1, n_tasks) * 2 + 10))
    lat: list[float] = []
    lock = threading.Lock()

    def done(d, env, out):
        ms = (time.time_ns() - env.enqueue_time) / 1e6
        with lock:
            lat.append(ms)

    ds = [Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo(), poll_timeout=1.0),
                     name=f"lat-{i}", on_complete=done).start() for i in range(dispatchers)]
    time.sleep(0.1)
    t0 = time.monotonic()
    for i in range(n_tasks):
        target = t0 + i / rate
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        bus.publish("tasks", {"block_num": i, "task_id": f"t{i}"})
    injected = time.monotonic() - t0
    wait_for(lambda: len(lat) >= n_tasks, 30 + n_tasks / rate)
    _stop(ds)
    bus.close()
    actual = (n_tasks - 1) / injected if n_tasks > 1 and injected > 0 else rate
    return {"latencies": lat, "actual_rate": actual, "completed": len(lat)}


def bench_latency(rates=(100.0,), n_tasks: int = 1000, repetitions: int = 1, dispatchers: int = 10,
                  p50_limit_ms: float = 25.0, p99_limit_ms: float = 50.0) -> ExperimentReport:
    """Publish-to-completion latency with a zero-work prover."""
    t0 = time.monotonic()
    report = ExperimentReport("bench_latency", {"rates": list(rates), "n_tasks": n_tasks,
                                                "repetitions": repetitions, "dispatchers": dispatchers})
    if n_tasks <= 0:
        report.notes.append("no tasks requested")
        return _finish(report, t0)
    for rate in rates:
        p50s, p99s = [], []
        for rep in range(repetitions):
            run = _latency_run(rate, n_tasks, dispatchers)
            d = describe(run["latencies"])
            p50s.append(d["p50"])
            p99s.append(d["p99"])
            shortfall = run["actual_rate"] < 0.9 * rate
            report.samples.append({"rate": rate, "rep": rep, "p50_ms": d["p50"], "p99_ms": d["p99"],
                                   "mean_ms": d["mean"], "max_ms": d["max"], "completed": run["completed"],
                                   "actual_rate": run["actual_rate"], "injection_shortfall": shortfall})
            report.check(f"rate{rate:g}.rep{rep}.all_completed", run["completed"] == n_tasks)
            if shortfall:
                report.notes.append(f"injection shortfall at {rate}/s: achieved {run['actual_rate']:.1f}/s")
        s = {"p50_ms": statistics.median(p50s), "p99_ms": statistics.median(p99s),
             "p50_std": statistics.stdev(p50s) if len(p50s) > 1 else 0.0,
             "p99_std": statistics.stdev(p99s) if len(p99s) > 1 else 0.0}
        report.summary[f"{rate:g}"] = s
        if rate == 100:
            report.check("p50_le_limit", s["p50_ms"] <= p50_limit_ms)
            report.check("p99_le_limit", s["p99_ms"] <= p99_limit_ms)
    return _finish(report, t0)


# -- scaling -------------------------------------------------------------------

def _scaling_run(d: int, n: int, latency: float) -> float:
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", max_depth=n + 10))
    bus.declare_queue(QueueConfig("results", max_depth=n + 10))
    for i in range(n):
        bus.publish("tasks", {"block_num": i, "task_id": f"t{i}"})
    spec = ExecutorSpec.sleep(latency) if latency > 0 else ExecutorSpec.echo()
    ds = [Dispatcher(bus, DispatcherConfig("tasks", "results", spec, poll_timeout=0.5), name=f"s{i}")
          for i in range(d)]
    for x in ds:
        x._handle = bus.subscribe("tasks", x.config.group)
    t0 = time.monotonic()
    threads = [threading.Thread(target=x.run, daemon=True) for x in ds]
    for t in threads:
        t.start()
    for x, t in zip(ds, threads):
        x._thread = t
    ok = wait_for(lambda: bus.stream_state("results").depth >= n, 60 + 2 * n * latency, poll=0.001)
    wall = time.monotonic() - t0
    _stop(ds)
    bus.close()
    if not ok:
        raise RuntimeError(f"scaling run D={d} did not finish")
    return wall


def bench_scaling(dispatcher_counts=(1, 2, 4, 8), tasks_per_dispatcher: int = 10, prover_latency: float = 1.0,
                  repetitions: int = 1, min_efficiency: float | None = None) -> ExperimentReport:
    """Efficiency matrix row: N = tasks_per_dispatcher x D tasks on D dispatchers."""
    t0 = time.monotonic()
    report = ExperimentReport("bench_scaling", {"dispatcher_counts": list(dispatcher_counts),
                                                "tasks_per_dispatcher": tasks_per_dispatcher,
                                                "prover_latency": prover_latency, "repetitions": repetitions})
    base = None
    rows = {}
    for d in dispatcher_counts:
        n = tasks_per_dispatcher * d
        walls = [_scaling_run(d, n, prover_latency) for _ in range(repetitions)]
        wall = statistics.median(walls)
        thr = n / wall
        if base is None:
            base = thr / dispatcher_counts[0]
        speedup = thr / base
        eff = speedup / d
        rows[d] = eff
        report.samples.append({"dispatchers": d, "tasks": n, "wall_s": wall, "walls": walls,
                               "throughput": thr, "speedup": speedup, "efficiency": eff})
    report.summary = {"efficiency": rows}
    if min_efficiency is not None:
        for d, eff in rows.items():
            report.check(f"D{d}.efficiency_ge_{min_efficiency:g}", eff >= min_efficiency)
    return _finish(report, t0)


# -- partition affinity / fragmentation -----------------------------------------

def exp_fragmentation(num_collectors: int = 4, k: int = 4, barriers: int = 100, routing: str = "affine",
                      seed: int = 0, accept_range: tuple[int, int] | None = None,
                      timeout: float = 30.0) -> ExperimentReport:
    """``accept_range`` overrides the computed envelope for the shared-group verdict."""
    t0 = time.monotonic()
    rng = random.Random(seed)
    if routing not in ("affine", "round_robin"):
        raise ValueError(f"routing must be affine or round_robin, not {routing!r}")
    affine = routing == "affine"
    report = ExperimentReport(f"fragmentation_{routing}", {"C": num_collectors, "k": k, "barriers": barriers,
                                                           "routing": routing, "seed": seed})
    bus = Bus()
    bus.declare_queue(QueueConfig("parts", partitions=num_collectors if affine else 1,
                                  partition_field="block_num" if affine else None, ack_timeout=600,
                                  max_depth=barriers * k + 10))
    bus.declare_queue(QueueConfig("barriers", max_depth=barriers + 10))
    cs = [Collector(bus, CollectorConfig(["parts"], "barriers", num_inputs=k, collect_timeout=600,
                                         num_collectors=num_collectors, collector_index=i,
                                         routing="affine" if affine else "shared",
                                         max_inflight=barriers * k + 1), name=f"frag-{i}").start()
          for i in range(num_collectors)]
    time.sleep(0.2)
    msgs = [(b, j) for b in range(barriers) for j in range(k)]
    rng.shuffle(msgs)
    for b, j in msgs:
        bus.publish("parts", {"block_num": b, "task_id": f"b{b}-m{j}", "member": j})
    total = barriers * k
    wait_for(lambda: sum(c.stats.received for c in cs) >= total
             and (not affine or sum(c.stats.groups_completed for c in cs) >= barriers), timeout)
    time.sleep(0.2)
    completed = sum(c.stats.groups_completed for c in cs)
    received = [c.stats.received for c in cs]
    _stop(cs, kill=True)
    bus.close()
    p = fragmentation_probability(num_collectors, k)
    lo, hi = binomial_envelope(barriers, p)
    report.summary = {"completed": completed, "barriers": barriers, "rate": completed / barriers,
                      "theoretical_rate": p, "envelope_999": [lo, hi], "received_per_collector": received}
    report.samples.append(dict(report.summary))
    if affine or num_collectors == 1:
        report.check("all_barriers_completed", completed == barriers)
    else:
        a, b = accept_range or (lo, hi)
        report.summary["accept_range"] = [a, b]
        report.check("within_binomial_envelope", a <= completed <= b)
    return _finish(report, t0)


# -- multi-queue vs linear -----------------------------------------------------

class _SkewTracker:
    """Proposer lead over the proving flow, sampled at each collector event."""

    def __init__(self, blocks: int, proposal_queue: str):
        self.blocks = blocks
        self.proposal_queue = proposal_queue
        self.max_proposed = -1
        self.finished: set[int] = set()
        self.max_skew = 0
        self.samples: list[tuple[float, int]] = []
        self.lock = threading.Lock()
        self._seen = 0
        self.lowest = 0

    def on_event(self, collector: Collector) -> None:
        with self.lock:
            for e in list(collector.strategy.buffer.values()):
                for m in e.members:
                    if m.queue == self.proposal_queue or m.payload.get("kind") == "proposal":
                        self.max_proposed = max(self.max_proposed, e.label)
            with collector.lock:
                fresh = collector.emissions[self._seen:]
            self._seen += len(fresh)
            for em in fresh:
                self.finished.add(em.label)
                self.max_proposed = max(self.max_proposed, em.label)
            while self.lowest in self.finished:
                self.lowest += 1
            skew = max(0, self.max_proposed - self.lowest)
            self.max_skew = max(self.max_skew, skew)
            self.samples.append((time.monotonic(), skew))


def _block_tasks(block: int, proofs: int) -> tuple[dict, list[dict]]:
    proposal = {"block_num": block, "task_id": f"b{block}-proposal", "kind": "proposal", "proof_index": -1}
    subtasks = [{"block_num": block, "task_id": f"b{block}-proof{j}", "kind": "proof", "proof_index": j}
                for j in range(proofs)]
    return proposal, subtasks


def exp_multiqueue(blocks: int = 30, proofs_per_block: int = 8, proposer_latency: float = 0.01,
                   prover_latency: float = 0.3, prover_replicas: int = 4, poison: tuple | None = (5, 15.0),
                   mode: str = "multi", timeout: float = 300.0) -> ExperimentReport:
    t_start = time.monotonic()
    report = ExperimentReport(f"multiqueue_{mode}", {
        "blocks": blocks, "proofs_per_block": proofs_per_block, "proposer_latency": proposer_latency,
        "prover_latency": prover_latency, "prover_replicas": prover_replicas, "poison": poison, "mode": mode})
    poison_kw = {}
    if poison is not None:
        poison_kw = {"poison_value": poison[0], "poison_ordinal": 0, "extra_delay": poison[1]}
    k = proofs_per_block + 1
    bus = Bus()
    deep = blocks * k + 10
    workers: list = []
    if mode == "multi":
        tracker = _SkewTracker(blocks, "batches")
        for q in ("blocks", "batches", "chunk_tasks", "thin_proofs"):
            bus.declare_queue(QueueConfig(q, priority_field="block_num", max_depth=deep))
        bus.declare_queue(QueueConfig("finalized", max_depth=deep))
        proposer_done: list[float] = []
        workers.append(Dispatcher(bus, DispatcherConfig("blocks", "batches", ExecutorSpec.sleep(proposer_latency)),
                                  name="proposer", on_complete=lambda d, e, o: proposer_done.append(time.monotonic())))
        behavior = SimBehavior("poison", duration=prover_latency, **poison_kw)
        for i in range(prover_replicas):
            workers.append(Dispatcher(bus, DispatcherConfig("chunk_tasks", "thin_proofs",
                                                            ExecutorSpec("simulated", behavior=behavior)),
                                      name=f"prover-{i}"))
        coll = Collector(bus, CollectorConfig(["thin_proofs", "batches"], "finalized", num_inputs=k,
                                              one_consumer_per_subject=True, collect_timeout=1.0,
                                              barrier_ttl=timeout), name="aggregator", on_event=tracker.on_event)
        workers.append(coll)
        for w in workers:
            w.start()
        t0 = time.monotonic()
        for b in range(blocks):
            proposal, subtasks = _block_tasks(b, proofs_per_block)
            bus.publish("blocks", proposal)
            for s in subtasks:
                bus.publish("chunk_tasks", s)
        ok = wait_for(lambda: _depth(bus, "finalized") >= blocks, timeout, poll=0.005)
        total = time.monotonic() - t0
        proposer_time = (max(proposer_done) - t0) if len(proposer_done) >= blocks else math.nan
    elif mode == "linear":
        tracker = _SkewTracker(blocks, "work")
        bus.declare_queue(QueueConfig("work", priority_field="block_num", max_depth=deep))
        bus.declare_queue(QueueConfig("done", priority_field="block_num", max_depth=deep))
        bus.declare_queue(QueueConfig("finalized", max_depth=deep))
        behavior = SimBehavior("poison", duration=prover_latency, duration_field="duration", **poison_kw)
        workers.append(Dispatcher(bus, DispatcherConfig("work", "done", ExecutorSpec("simulated", behavior=behavior)),
                                  name="lane"))
        coll = Collector(bus, CollectorConfig(["done"], "finalized", num_inputs=k, collect_timeout=1.0,
                                              barrier_ttl=timeout), name="gate-collector", on_event=tracker.on_event)
        workers.append(coll)
        for w in workers:
            w.start()
        gate = bus.subscribe("finalized", "gate")
        t0 = time.monotonic()
        ok = True
        proposer_time = math.nan
        gated: set[int] = set()
        for b in range(blocks):
            proposal, subtasks = _block_tasks(b, proofs_per_block)
            proposal["duration"] = proposer_latency
            bus.publish("work", proposal)
            for s in subtasks:
                bus.publish("work", s)
            env = bus.next(gate, timeout=timeout)
            if env is None:
                ok = False
                break
            gated.add(env.payload["block_num"])
            bus.ack(gate, env.message_id)
        total = time.monotonic() - t0
        if ok:
            proposer_time = total
    else:
        raise ValueError(f"unknown mode {mode!r}")
    _stop(workers)
    if mode == "multi":
        completed = len({e.payload["block_num"] for e in bus.peek("finalized")})
    else:
        completed = len(gated)
    bus.close()
    report.summary = {
        "total_s": total, "completed_blocks": completed, "max_finality_skew": tracker.max_skew,
        "proposer_throughput": blocks / proposer_time if proposer_time and not math.isnan(proposer_time) else None,
    }
    report.samples = [{"t": t - t0, "skew": s} for t, s in tracker.samples]
    report.check("all_blocks_completed", ok and completed == blocks)
    return _finish(report, t_start)


def compare_multiqueue(**kw) -> ExperimentReport:
    """Run both modes; speedup = linear total / multi total."""
    t0 = time.monotonic()
    multi = exp_multiqueue(mode="multi", **kw)
    linear = exp_multiqueue(mode="linear", **kw)
    report = ExperimentReport("multiqueue", {**multi.parameters, "mode": "both"})
    m, l = multi.summary["total_s"], linear.summary["total_s"]
    report.summary = {"multi": multi.summary, "linear": linear.summary, "speedup": l / m if m else math.nan}
    report.samples = [{"mode": "multi", **multi.summary}, {"mode": "linear", **linear.summary}]
    report.verdicts.update({f"multi.{k}": v for k, v in multi.verdicts.items()})
    report.verdicts.update({f"linear.{k}": v for k, v in linear.verdicts.items()})
    report.check("speedup_ge_3", report.summary["speedup"] >= 3.0)
    report.check("multi_skew_ge_20", multi.summary["max_finality_skew"] >= 20)
    report.check("linear_ge_multi_plus_12s", l >= m + 12.0)
    return _finish(report, t0)


# -- ordering ------------------------------------------------------------------

def exp_ordering(blocks: int = 100, delay_range=(0.1, 2.0), proofs_per_block: int = 2, dispatchers: int = 16,
                 adversarial: bool = False, seed: int = 0, timeout: float = 150.0) -> ExperimentReport:
    """Random per-task delays; the commit queue must still see blocks in order."""
    t_start = time.monotonic()
    rng = random.Random(seed)
    lo, hi = delay_range
    report = ExperimentReport("ordering", {"blocks": blocks, "delay_range": list(delay_range),
                                           "proofs_per_block": proofs_per_block, "dispatchers": dispatchers,
                                           "adversarial": adversarial, "seed": seed})
    deep = blocks * proofs_per_block + 10
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", max_depth=deep))
    bus.declare_queue(QueueConfig("proved", max_depth=deep))
    bus.declare_queue(QueueConfig("blocks_done", max_depth=deep))
    bus.declare_queue(QueueConfig("committed", max_depth=deep))
    spec = ExecutorSpec("simulated", behavior=SimBehavior("sleep", duration_field="delay"))
    workers: list = [Dispatcher(bus, DispatcherConfig("tasks", "proved", spec), name=f"ord-{i}")
                     for i in range(dispatchers)]
    workers.append(Collector(bus, CollectorConfig(["proved"], "blocks_done", num_inputs=proofs_per_block,
                                                  collect_timeout=1.0, barrier_ttl=timeout), name="match"))
    workers.append(Collector(bus, CollectorConfig(["blocks_done"], "committed", strategy=StrategySpec("Ordered"),
                                                  collect_timeout=1.0, barrier_ttl=timeout), name="commit"))
    for w in workers:
        w.start()
    t0 = time.monotonic()
    for b in range(blocks):
        for j in range(proofs_per_block):
            if adversarial:
                delay = hi - (hi - lo) * (b / max(1, blocks - 1))
            else:
                delay = rng.uniform(lo, hi)
            bus.publish("tasks", {"block_num": b, "task_id": f"b{b}-{j}", "delay": delay})
    ok = wait_for(lambda: _depth(bus, "committed") >= blocks, timeout, poll=0.01)
    total = time.monotonic() - t0
    _stop(workers)
    seq = [e.payload["block_num"] for e in bus.peek("committed")]
    completion_order = [e.payload["block_num"] for e in bus.peek("blocks_done")]
    bus.close()
    violations = sum(1 for a, b in zip(seq, seq[1:]) if b < a)
    report.summary = {"total_s": total, "committed": len(seq), "violations": violations,
                      "completion_inversions": sum(1 for a, b in zip(completion_order, completion_order[1:]) if b < a)}
    report.samples = [{"position": i, "block_num": b} for i, b in enumerate(seq)]
    report.check("all_committed", ok and sorted(seq) == list(range(blocks)))
    report.check("zero_violations", violations == 0)
    return _finish(report, t_start)


# -- collector buffer under skew ---------------------------------------------------

def exp_skew_memory(skew_ratios=(30, 50, 100), blocks: int = 200, proofs_per_block: int = 2,
                    prover_latency: float = 0.05, prover_replicas: int = 4, window: int = 16,
                    timeout: float = 120.0) -> ExperimentReport:
    t_start = time.monotonic()
    report = ExperimentReport("skew_memory", {"skew_ratios": list(skew_ratios), "blocks": blocks,
                                              "proofs_per_block": proofs_per_block, "window": window,
                                              "prover_latency": prover_latency})
    k = proofs_per_block + 1
    for ratio in skew_ratios:
        bus = Bus()
        deep = blocks * k + 10
        for q in ("blocks", "batches", "chunk_tasks", "thin_proofs"):
            bus.declare_queue(QueueConfig(q, priority_field="block_num", max_depth=deep))
        bus.declare_queue(QueueConfig("finalized", max_depth=deep))
        workers: list = [Dispatcher(bus, DispatcherConfig("blocks", "batches",
                                                          ExecutorSpec.sleep(prover_latency / ratio)),
                                    name="proposer")]
        workers += [Dispatcher(bus, DispatcherConfig("chunk_tasks", "thin_proofs", ExecutorSpec.sleep(prover_latency)),
                               name=f"prover-{i}") for i in range(prover_replicas)]
        coll = Collector(bus, CollectorConfig(["thin_proofs", "batches"], "finalized", num_inputs=k,
                                              one_consumer_per_subject=True, max_inflight=window,
                                              collect_timeout=1.0, barrier_ttl=timeout), name="aggregator")
        workers.append(coll)
        for w in workers:
            w.start()
        for b in range(blocks):
            proposal, subtasks = _block_tasks(b, proofs_per_block)
            bus.publish("blocks", proposal)
            for s in subtasks:
                bus.publish("chunk_tasks", s)
        ok = wait_for(lambda: _depth(bus, "finalized") >= blocks, timeout)
        _stop(workers)
        bus.close()
        bound = window * len(coll.config.input_queues)
        row = {"skew": ratio, "peak_entries": coll.stats.peak_buffer_entries,
               "peak_bytes": coll.stats.peak_buffer_bytes, "final_entries": len(coll.strategy.members()),
               "bound": bound, "completed": ok}
        report.samples.append(row)
        report.check(f"skew{ratio}.completed", ok)
        report.check(f"skew{ratio}.bounded", row["peak_entries"] <= bound and row["peak_entries"] < blocks)
        report.check(f"skew{ratio}.drained", row["final_entries"] == 0)
    report.summary = {"max_peak_entries": max((r["peak_entries"] for r in report.samples), default=0)}
    return _finish(report, t_start)


# -- chaos -------------------------------------------------------------------------

def _aggregate_stage(bus, input_queue: str, output_queue: str, ack_timeout: float, name: str = "agg") -> Collector:
    return Collector(bus, CollectorConfig([input_queue], output_queue, num_inputs=1, collect_timeout=1.0,
                                          barrier_ttl=3600), name=name)


def _dlq_total(bus) -> int:
    return sum(bus.stream_state(q).depth for q in bus.queues() if q.endswith(".dlq"))


def _spawn_worker(address: str, args: list[str]) -> subprocess.Popen:
    cmd = [sys.executable, "-m", "push0", "worker", "dispatcher", "--connect", address, *args]
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[2])
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.Popen(cmd, env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)


def chaos_dispatcher_kill(tasks: int = 50, dispatchers: int = 2, prover_latency: float = 1.0,
                          ack_timeout: float = 3.0, kills=((0.2, 1), (0.5, 2)), seed: int = 0,
                          timeout: float = 180.0) -> ExperimentReport:
    """SIGKILL dispatcher processes mid-run and restart them."""
    t_start = time.monotonic()
    rng = random.Random(seed)
    report = ExperimentReport("chaos_dispatcher_kill", {"tasks": tasks, "dispatchers": dispatchers,
                                                        "prover_latency": prover_latency, "ack_timeout": ack_timeout,
                                                        "kills": [list(k) for k in kills], "seed": seed})
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", ack_timeout=ack_timeout))
    bus.declare_queue(QueueConfig("results", ack_timeout=ack_timeout))
    bus.declare_queue(QueueConfig("aggregated"))
    server = BusServer(bus).start()
    address = "%s:%d" % server.address
    agg = _aggregate_stage(bus, "results", "aggregated", ack_timeout).start()
    args = ["--input", "tasks", "--output", "results", "--sim", "sleep", "--duration", str(prover_latency),
            "--heartbeat", str(max(0.2, ack_timeout / 3))]
    procs = [_spawn_worker(address, args) for _ in range(dispatchers)]
    for b in range(tasks):
        bus.publish("tasks", {"block_num": b, "task_id": f"task-{b}"})
    t0 = time.monotonic()
    killed = 0
    events = []
    for fraction, count in kills:
        wait_for(lambda: _depth(bus, "aggregated") >= fraction * tasks, timeout)
        victims = rng.sample(range(len(procs)), min(count, len(procs)))
        for i in victims:
            procs[i].send_signal(signal.SIGKILL)
            procs[i].wait()
            killed += 1
        events.append({"t": time.monotonic() - t0, "killed": len(victims),
                       "aggregated": _depth(bus, "aggregated")})
        for i in victims:
            procs[i] = _spawn_worker(address, args)
    ok = wait_for(lambda: _depth(bus, "aggregated") >= tasks and _depth(bus, "tasks") == 0
                  and _depth(bus, "results") == 0, timeout)
    total = time.monotonic() - t0
    for p in procs:
        p.send_signal(signal.SIGTERM)
    for p in procs:
        try:
            p.wait(5)
        except subprocess.TimeoutExpired:
            p.kill()
    agg.stop()
    outputs = [e.payload["block_num"] for e in bus.peek("aggregated")]
    completions = bus.stream_state("results").published_total
    dlq = _dlq_total(bus)
    server.stop()
    bus.close()
    lost = tasks - len(set(outputs))
    report.summary = {"total_s": total, "killed": killed, "completions": completions,
                      "aggregated": len(outputs), "lost": lost, "duplicates_dropped": agg.stats.duplicates_dropped,
                      "dlq": dlq}
    report.samples = events
    report.check("no_loss", ok and lost == 0)
    report.check("aggregated_exactly_once", len(outputs) == tasks)
    report.check("completions_ge_tasks", completions >= tasks)
    report.check("dlq_empty", dlq == 0)
    return _finish(report, t_start)


def _barrier_run(barriers: int, k: int, prover_latency: float, dispatchers: int, ack_timeout: float,
                 kill_after: int | None, timeout: float) -> dict:
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", ack_timeout=ack_timeout))
    bus.declare_queue(QueueConfig("proofs", ack_timeout=ack_timeout, partitions=1, partition_field="block_num"))
    bus.declare_queue(QueueConfig("aggregated"))
    ds = [Dispatcher(bus, DispatcherConfig("tasks", "proofs", ExecutorSpec.sleep(prover_latency,
                                                                                  heartbeat_interval=ack_timeout / 3)),
                     name=f"bd-{i}").start() for i in range(dispatchers)]
    cfg = CollectorConfig(["proofs"], "aggregated", num_inputs=k, collect_timeout=1.0, barrier_ttl=3600,
                          heartbeat_interval=ack_timeout / 3)
    coll = Collector(bus, cfg, name="barrier-0").start()
    collectors = [coll]
    for b in range(barriers):
        for j in range(k):
            bus.publish("tasks", {"block_num": b, "task_id": f"b{b}-{j}", "proof_index": j})
    t0 = time.monotonic()
    kill_at = None
    if kill_after is not None:
        # Kill while barriers are half-collected so buffered state is really lost.
        wait_for(lambda: _depth(bus, "aggregated") >= kill_after and coll.strategy.members(), timeout,
                 poll=0.001)
        coll.kill()
        coll.join(5)
        kill_at = time.monotonic() - t0
        buffered = len(coll.strategy.members())
        collectors.append(Collector(bus, cfg, name="barrier-1").start())
    else:
        buffered = 0
    ok = wait_for(lambda: _depth(bus, "aggregated") >= barriers and _depth(bus, "proofs") == 0, timeout)
    total = time.monotonic() - t0
    _stop(ds)
    _stop(collectors)
    blocks = [e.payload["block_num"] for e in bus.peek("aggregated")]
    dlq = _dlq_total(bus)
    bus.close()
    return {"total_s": total, "ok": ok, "aggregated": len(blocks), "distinct": len(set(blocks)),
            "kill_at": kill_at, "buffered_at_kill": buffered, "dlq": dlq}


def chaos_collector_kill(barriers: int = 20, k: int = 4, prover_latency: float = 0.2, dispatchers: int = 4,
                         ack_timeout: float = 2.0, kill_after: int = 5, timeout: float = 120.0) -> ExperimentReport:
    t_start = time.monotonic()
    report = ExperimentReport("chaos_collector_kill", {"barriers": barriers, "k": k, "ack_timeout": ack_timeout,
                                                       "kill_after": kill_after, "prover_latency": prover_latency})
    base = _barrier_run(barriers, k, prover_latency, dispatchers, ack_timeout, None, timeout)
    run = _barrier_run(barriers, k, prover_latency, dispatchers, ack_timeout, kill_after, timeout)
    overhead = run["total_s"] - base["total_s"]
    report.summary = {"baseline_s": base["total_s"], "with_kill_s": run["total_s"], "overhead_s": overhead,
                      "completed": run["distinct"], "aggregated": run["aggregated"], "dlq": run["dlq"],
                      "buffered_at_kill": run["buffered_at_kill"]}
    report.samples = [{"run": "baseline", **base}, {"run": "kill", **run}]
    report.check("all_barriers_completed", run["ok"] and run["distinct"] == barriers)
    report.check("aggregated_exactly_once", run["aggregated"] == barriers)
    report.check("overhead_lt_2_ack", overhead < 2 * ack_timeout)
    report.check("dlq_empty", run["dlq"] == 0)
    return _finish(report, t_start)


def chaos_bus_pause(durations=(5.0, 10.0, 20.0), tasks: int = 40, dispatchers: int = 4, prover_latency: float = 0.5,
                    ack_timeout: float = 5.0, pause_at: float = 0.25, timeout: float = 120.0) -> ExperimentReport:
    """Freeze the whole bus mid-run (a simulated network partition) and check completion."""
    t_start = time.monotonic()
    report = ExperimentReport("chaos_bus_pause", {"durations": list(durations), "tasks": tasks,
                                                  "dispatchers": dispatchers, "ack_timeout": ack_timeout})
    for d in durations:
        bus = Bus()
        bus.declare_queue(QueueConfig("tasks", priority_field="block_num", ack_timeout=ack_timeout))
        bus.declare_queue(QueueConfig("results", ack_timeout=ack_timeout))
        bus.declare_queue(QueueConfig("aggregated"))
        ds = [Dispatcher(bus, DispatcherConfig("tasks", "results",
                                               ExecutorSpec.sleep(prover_latency, heartbeat_interval=ack_timeout / 3)),
                         name=f"pd-{i}").start() for i in range(dispatchers)]
        agg = _aggregate_stage(bus, "results", "aggregated", ack_timeout).start()
        for b in range(tasks):
            bus.publish("tasks", {"block_num": b, "task_id": f"t{b}"})
        t0 = time.monotonic()
        wait_for(lambda: _depth(bus, "aggregated") >= pause_at * tasks, timeout)
        paused_at = time.monotonic() - t0
        bus.pause(None, d)
        ok = wait_for(lambda: _depth(bus, "aggregated") >= tasks and _depth(bus, "tasks") == 0
                      and _depth(bus, "results") == 0, timeout + d)
        total = time.monotonic() - t0
        _stop(ds)
        agg.stop()
        outputs = [e.payload["block_num"] for e in bus.peek("aggregated")]
        redelivered = bus.stream_state("tasks").redelivered_total
        dlq = _dlq_total(bus)
        bus.close()
        row = {"pause_s": d, "paused_at_s": paused_at, "total_s": total, "aggregated": len(outputs),
               "distinct": len(set(outputs)), "redelivered": redelivered,
               "duplicates_dropped": agg.stats.duplicates_dropped, "dlq": dlq}
        report.samples.append(row)
        report.check(f"pause{d:g}.all_completed", ok and len(set(outputs)) == tasks)
        report.check(f"pause{d:g}.aggregated_exactly_once", len(outputs) == tasks)
        report.check(f"pause{d:g}.dlq_empty", dlq == 0)
    report.summary = {"completion": {r["pause_s"]: f"{r['distinct']}/{tasks}" for r in report.samples}}
    return _finish(report, t_start)


def _mttr_all_crashed(ack_timeout: float, workers: int = 2) -> list[float]:
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", ack_timeout=ack_timeout))
    bus.declare_queue(QueueConfig("results"))
    crashed_at: dict[int, float] = {}
    recovered_at: dict[int, float] = {}
    crash = ExecutorSpec("simulated", behavior=SimBehavior("crash", at_nth=1))
    crashers = [Dispatcher(bus, DispatcherConfig("tasks", "results", crash), name=f"crasher-{i}",
                           on_pickup=lambda d, e: crashed_at.setdefault(e.message_id, time.monotonic())).start()
                for i in range(workers)]
    for b in range(workers):
        bus.publish("tasks", {"block_num": b, "task_id": f"t{b}"})
    wait_for(lambda: all(not c.alive for c in crashers), 10)
    healthy = [Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.echo(), poll_timeout=0.5),
                          name=f"healthy-{i}",
                          on_pickup=lambda d, e: recovered_at.setdefault(e.message_id, time.monotonic())).start()
               for i in range(workers)]
    wait_for(lambda: len(recovered_at) >= len(crashed_at), ack_timeout + 10)
    _stop(healthy)
    bus.close()
    return [recovered_at[m] - crashed_at[m] for m in crashed_at if m in recovered_at]


def _mttr_healthy(ack_timeout: float, prover_latency: float = 0.5, backlog: int = 10) -> list[float]:
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num", ack_timeout=ack_timeout))
    bus.declare_queue(QueueConfig("results"))
    pickups: list[tuple[str, float]] = []
    lock = threading.Lock()

    def on_pickup(d, e):
        with lock:
            pickups.append((d.name, time.monotonic()))

    crash = ExecutorSpec("simulated", behavior=SimBehavior("crash", at_nth=2, duration=prover_latency))
    crasher = Dispatcher(bus, DispatcherConfig("tasks", "results", crash), name="crasher", on_pickup=on_pickup)
    healthy = Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.sleep(prover_latency)),
                         name="healthy", on_pickup=on_pickup)
    for b in range(backlog):
        bus.publish("tasks", {"block_num": b, "task_id": f"t{b}"})
    crasher.start()
    healthy.start()
    wait_for(lambda: not crasher.alive, 10, poll=0.001)
    crash_time = time.monotonic()
    wait_for(lambda: any(n == "healthy" and t > crash_time for n, t in list(pickups)), 10, poll=0.001)
    _stop([healthy, crasher])
    bus.close()
    after = [t for n, t in pickups if n == "healthy" and t > crash_time]
    return [after[0] - crash_time] if after else []


def exp_mttr(ack_waits=(5.0, 10.0, 20.0), slack: float = 1.0, healthy_limit: float = 1.5) -> ExperimentReport:
    """Crash-to-next-pickup time with and without a surviving dispatcher."""
    t_start = time.monotonic()
    report = ExperimentReport("mttr", {"ack_waits": list(ack_waits), "slack": slack, "healthy_limit": healthy_limit})
    for t_ack in ack_waits:
        xs = _mttr_all_crashed(t_ack)
        hs = _mttr_healthy(t_ack)
        all_mttr = max(xs) if xs else math.inf
        healthy = max(hs) if hs else math.inf
        report.samples.append({"ack_wait": t_ack, "scenario": "all_crashed", "mttr_s": all_mttr,
                               "mttr_min_s": min(xs) if xs else math.inf, "tasks": len(xs)})
        report.samples.append({"ack_wait": t_ack, "scenario": "healthy", "mttr_s": healthy})
        report.check(f"ack{t_ack:g}.all_crashed_within_window",
                     bool(xs) and all(t_ack <= x <= t_ack + slack for x in xs))
        report.check(f"ack{t_ack:g}.healthy_lt_limit", healthy < healthy_limit)
    report.summary = {f"{r['ack_wait']:g}/{r['scenario']}": r["mttr_s"] for r in report.samples}
    return _finish(report, t_start)


# -- dedup and grouping validation -----------------------------------------------

def exp_dedup(groups: int = 100, k: int = 4, duplicates: int = 500, misrouted: int = 100, malformed: int = 100,
              num_collectors: int = 2, seed: int = 0, timeout: float = 30.0) -> ExperimentReport:
    t_start = time.monotonic()
    rng = random.Random(seed)
    report = ExperimentReport("dedup", {"groups": groups, "k": k, "duplicates": duplicates,
                                        "misrouted": misrouted, "malformed": malformed, "C": num_collectors,
                                        "seed": seed})
    C = num_collectors
    bus = Bus()
    bus.declare_queue(QueueConfig("results", partitions=C, partition_field="batch_id", ack_timeout=60,
                                  max_depth=100_000))
    bus.declare_queue(QueueConfig("aggregated", max_depth=100_000))
    cs = [Collector(bus, CollectorConfig(["results"], "aggregated", num_inputs=k, grouping_field="batch_id",
                                         num_collectors=C, collector_index=i, collect_timeout=60),
                    name=f"dedup-{i}").start() for i in range(C)]
    valid = [{"batch_id": g, "task_id": f"g{g}-t{j}", "value": rng.randrange(10**6)}
             for g in range(groups) for j in range(k)]
    bad_values = [True, -3, 1.5, [1], {"x": 1}, ""]
    injected: list[tuple[dict, int | None]] = []
    for _ in range(duplicates):
        injected.append((dict(rng.choice(valid)), None))
    for i in range(misrouted):
        g = rng.randrange(groups)
        wrong = (partition_of(g, C) + 1 + rng.randrange(C - 1)) % C if C > 1 else 0
        injected.append(({"batch_id": g, "task_id": f"mis-{i}"}, wrong))
    for i in range(malformed):
        if i % 2:
            payload = {"task_id": f"missing-{i}"}
        else:
            payload = {"task_id": f"illtyped-{i}", "batch_id": bad_values[i // 2 % len(bad_values)]}
        injected.append((payload, rng.randrange(C)))
    rng.shuffle(injected)
    for p in valid:
        bus.publish("results", p)
    for p, part in injected:
        bus.publish("results", p, partition=part)
    total = len(valid) + len(injected)
    wait_for(lambda: sum(c.stats.received for c in cs) >= total and _depth(bus, "aggregated") >= groups, timeout)
    time.sleep(0.1)
    _stop(cs)
    outputs = [e.payload for e in bus.peek("aggregated")]
    bus.close()
    invalid = 0
    for out in outputs:
        members = out["members"]
        tids = [m["task_id"] for m in members]
        if (len(members) != k or any(m.get("batch_id") != out["batch_id"] for m in members)
                or len(set(tids)) != k or any(not t.startswith(f"g{out['batch_id']}-") for t in tids)):
            invalid += 1
    drops = sum(c.stats.duplicates_dropped for c in cs)
    rejects = sum(c.stats.mismatches_rejected for c in cs)
    report.summary = {"duplicates_dropped": drops, "rejected": rejects, "invalid_aggregations": invalid,
                      "aggregated": len(outputs), "groups": groups}
    report.samples = [dict(c.stats.__dict__, collector=i) for i, c in enumerate(cs)]
    report.check("dedup_drops_exact", drops == duplicates)
    report.check("rejections_exact", rejects == misrouted + malformed)
    report.check("zero_invalid_aggregations", invalid == 0)
    report.check("all_groups_aggregated", len(outputs) == groups and len({o["batch_id"] for o in outputs}) == groups)
    return _finish(report, t_start)


# -- backpressure ------------------------------------------------------------------

def exp_backpressure(max_depth: int = 1000, overload: float = 10.0, dispatchers: int = 2,
                     prover_latency: float = 0.01, total: int | None = None, timeout: float = 60.0) -> ExperimentReport:
    t_start = time.monotonic()
    total = total or 3 * max_depth
    drain_rate = dispatchers / prover_latency
    rate = overload * drain_rate
    report = ExperimentReport("backpressure", {"max_depth": max_depth, "overload": overload,
                                               "drain_rate": drain_rate, "inject_rate": rate, "total": total})
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", max_depth=max_depth, ack_timeout=30))
    bus.declare_queue(QueueConfig("results", max_depth=total + 10))
    ds = [Dispatcher(bus, DispatcherConfig("tasks", "results", ExecutorSpec.sleep(prover_latency)),
                     name=f"bp-{i}").start() for i in range(dispatchers)]
    sampled: list[tuple[float, int]] = []
    stop = threading.Event()

    def sampler():
        while not stop.is_set():
            sampled.append((time.monotonic(), _depth(bus, "tasks")))
            stop.wait(0.005)

    st = threading.Thread(target=sampler, daemon=True)
    st.start()
    t0 = time.monotonic()
    first_block = None
    slow_publishes = 0
    for i in range(total):
        target = t0 + i / rate
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        before = time.monotonic()
        bus.publish("tasks", {"task_id": f"t{i}", "n": i})
        if time.monotonic() - before > 0.005:
            slow_publishes += 1
        if first_block is None and bus.stream_state("tasks").producer_blocks > 0:
            first_block = time.monotonic() - t0
    injected_at = time.monotonic() - t0
    drained = wait_for(lambda: _depth(bus, "tasks") == 0, timeout)
    drain_time = time.monotonic() - t0 - injected_at
    stop.set()
    st.join()
    state = bus.stream_state("tasks")
    _stop(ds)
    bus.close()
    peak_sampled = max((d for _, d in sampled), default=0)
    report.summary = {"time_to_block_s": first_block, "producer_blocks": state.producer_blocks,
                      "slow_publishes": slow_publishes, "peak_depth": state.peak_depth,
                      "peak_depth_sampled": peak_sampled, "injection_s": injected_at,
                      "drain_after_injection_s": drain_time, "final_depth": 0 if drained else None}
    step = max(1, len(sampled) // 500)
    report.samples = [{"t": t - t0, "depth": d} for t, d in sampled[::step]]
    report.check("producer_blocked", state.producer_blocks > 0 and first_block is not None)
    report.check("depth_le_max", state.peak_depth <= max_depth and peak_sampled <= max_depth)
    report.check("drained_to_zero", drained)
    return _finish(report, t_start)


# -- metrics and tracing -----------------------------------------------------------

def exp_metrics(inflight: int = 1000, scrapes: int = 200, limit_ms: float = 10.0) -> ExperimentReport:
    t_start = time.monotonic()
    report = ExperimentReport("metrics_scrape", {"inflight": inflight, "scrapes": scrapes})
    registry = MetricsRegistry()
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", max_depth=inflight + 10, ack_timeout=600))
    bus.declare_queue(QueueConfig("side", max_depth=100_000))
    bus.declare_queue(QueueConfig("side_out", max_depth=1_000_000))
    watch_bus(registry, bus)
    for i in range(inflight):
        bus.publish("tasks", {"task_id": f"t{i}"})
    holder = bus.subscribe("tasks", max_inflight=inflight)
    while bus.next(holder, timeout=0) is not None:
        pass
    ds = [Dispatcher(bus, DispatcherConfig("side", "side_out", ExecutorSpec.echo()), name=f"m{i}",
                     metrics=registry).start() for i in range(4)]
    stop = threading.Event()

    def load():
        i = 0
        while not stop.is_set():
            bus.publish("side", {"task_id": f"s{i}", "block_num": i})
            i += 1
            stop.wait(0.001)

    lt = threading.Thread(target=load, daemon=True)
    lt.start()
    server = serve_metrics(registry)
    time.sleep(0.5)
    durations = []
    body = ""
    for _ in range(scrapes):
        t = time.perf_counter()
        with urllib.request.urlopen(server.url, timeout=5) as resp:
            body = resp.read().decode()
        durations.append((time.perf_counter() - t) * 1000)
    stop.set()
    lt.join()
    _stop(ds)
    server.close()
    state = bus.stream_state("tasks")
    bus.close()
    d = describe(durations)
    report.summary = {"mean_ms": d["mean"], "max_ms": d["max"], "p99_ms": d["p99"], "inflight": state.inflight,
                      "exposition_bytes": len(body.encode())}
    report.samples = [{"scrape": i, "ms": x} for i, x in enumerate(durations)]
    report.check("inflight_reached", state.inflight >= inflight)
    report.check("gauge_reports_inflight", f'queue_inflight{{queue="tasks"}} {inflight}' in body)
    report.check("mean_lt_limit", d["mean"] < limit_ms)
    return _finish(report, t_start)


DEMO_TOPOLOGY = """
[queue blocks]
PRIORITY_FIELD = block_num
[queue traces]
PRIORITY_FIELD = block_num
[queue proofs]
[queue final]
TERMINAL = true
[stage trace]
INPUT_QUEUE: blocks
OUTPUT_QUEUE: traces
SIM_BEHAVIOR = echo
[stage prove]
INPUT_QUEUE: traces
OUTPUT_QUEUE: proofs
SIM_BEHAVIOR = echo
[stage aggregate]
KIND = collector
INPUT_QUEUE: proofs
OUTPUT_QUEUE: final
STRATEGY: Match
NUM_INPUTS: 1
GROUPING_FIELD: block_num
COLLECT_TIMEOUT_PERIOD_MILLIS: 200
"""


def exp_tracing(blocks: int = 5, out_dir: str | None = None, min_spans: int = 9) -> ExperimentReport:
    """Push blocks through the three-stage demo and audit the span log."""
    t_start = time.monotonic()
    report = ExperimentReport("tracing", {"blocks": blocks, "min_spans": min_spans})
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="push0-spans-")
        out_dir = tmp.name
    spans = SpanLog(Path(out_dir) / "spans.jsonl")
    registry = MetricsRegistry()
    handle = launch(parse(DEMO_TOPOLOGY, env={}), metrics=registry, span_log=spans)
    origins: dict[int, str] = {}
    for b in range(blocks):
        root = TraceContext.new_root()
        origins[b] = root.trace_id
        with child_span(root, "enqueue.blocks", spans) as span:
            handle.bus.publish("blocks", {"block_num": b, "task_id": f"block-{b}"},
                               {"traceparent": span.traceparent}, trace_context=span.traceparent)
    ok = wait_for(lambda: _depth(handle.bus, "final") >= blocks, 30)
    outputs = handle.bus.peek("final")
    handle.stop()
    records = spans.read()
    spans.close()
    if tmp is not None:
        tmp.cleanup()
    per_trace: dict[str, int] = {}
    for r in records:
        per_trace[r["trace_id"]] = per_trace.get(r["trace_id"], 0) + 1
    mismatched = [e.payload["block_num"] for e in outputs
                  if trace_id_of(e.trace_context) != origins.get(e.payload["block_num"])]
    counts = [per_trace.get(origins[b], 0) for b in range(blocks)]
    report.summary = {"outputs": len(outputs), "spans_per_block": counts, "trace_mismatches": mismatched}
    report.samples = [{"block_num": b, "trace_id": origins[b], "spans": c} for b, c in zip(range(blocks), counts)]
    report.check("all_blocks_out", ok and len(outputs) == blocks)
    report.check("trace_completeness", not mismatched)
    report.check("spans_per_block", all(c >= min_spans for c in counts))
    return _finish(report, t_start)


def exp_redundancy(latencies=(0.2, 1.0, 5.0), crash_index: int | None = None, timeout: float = 30.0) -> ExperimentReport:
    """k=1-of-n speculative dispatch: the first valid result wins."""
    t_start = time.monotonic()
    n = len(latencies)
    report = ExperimentReport("redundancy", {"latencies": list(latencies), "crash_index": crash_index})
    bus = Bus()
    bus.declare_queue(QueueConfig("tasks", priority_field="block_num"))
    for i in range(n):
        bus.declare_queue(QueueConfig(f"prove.{i}", priority_field="block_num"))
    bus.declare_queue(QueueConfig("results"))
    bus.declare_queue(QueueConfig("accepted"))
    from push0.dispatcher import Redundancy
    workers: list = [Dispatcher(bus, DispatcherConfig("tasks", redundancy=Redundancy(n, "prove")), name="fanout")]
    for i, lat in enumerate(latencies):
        if i == crash_index:
            spec = ExecutorSpec("simulated", behavior=SimBehavior("crash", at_nth=1, duration=lat))
        else:
            spec = ExecutorSpec.sleep(lat)
        workers.append(Dispatcher(bus, DispatcherConfig(f"prove.{i}", "results", spec), name=f"prover-{i}"))
    first = Collector(bus, CollectorConfig(["results"], "accepted", num_inputs=1, grouping_field="block_num",
                                           collect_timeout=1.0), name="first-valid")
    workers.append(first)
    for w in workers:
        w.start()
    t0 = time.monotonic()
    bus.publish("tasks", {"block_num": 0, "task_id": "spec-0"})
    ok = wait_for(lambda: _depth(bus, "accepted") >= 1, timeout, poll=0.002)
    accepted_after = time.monotonic() - t0
    # Let the slower copies land so dedup can be observed.
    live = [lat for i, lat in enumerate(latencies) if i != crash_index]
    wait_for(lambda: first.stats.duplicates_dropped >= len(live) - 1, max(live) + 2)
    _stop(workers, kill=True)
    accepted = len(bus.peek("accepted"))
    bus.close()
    expected = min(live)
    report.summary = {"accepted_latency_s": accepted_after, "oracle_s": expected, "accepted": accepted,
                      "duplicates_dropped": first.stats.duplicates_dropped}
    report.check("accepted_once", ok and accepted == 1)
    report.check("latency_near_fastest", expected <= accepted_after <= expected + 0.5)
    return _finish(report, t_start)
