"""Declarative pipelines: stage sections wired together by queue names.

A pipeline document is INI-style text.  Keys use the same names as the
environment-variable listings operators already know, and either ``:`` or
``=`` separates key from value::

    [defaults]
    ACK_WAIT = 30

    [queue blocks]
    PRIORITY_FIELD = block_num

    [queue proofs]
    TERMINAL = true

    [stage prove]
    KIND = dispatcher
    INPUT_QUEUE: blocks
    OUTPUT_QUEUE: proofs
    REPLICAS: 8

Any stage key can be overridden from the environment as
``<STAGE>__<KEY>=value`` (stage name upper-cased, non-alphanumerics as ``_``).
"""

from __future__ import annotations

import configparser
import logging
import os
import re
import shlex
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from push0.bus.core import Bus, QueueConfig, default_ack_wait
from push0.collector import Collector, CollectorConfig, StrategySpec
from push0.dispatcher import Dispatcher, DispatcherConfig, ResultStore
from push0.executor import ExecutorSpec, SimBehavior
from push0.observability import MetricsRegistry, SpanLog, child_span
from push0.routing import PartitionAssignment, rebalance

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class LaunchError(RuntimeError):
    def __init__(self, failures: dict[str, Exception]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in failures.items()))
        self.failures = failures


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


def _bool(value: str, where: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ParseError(f"{where}: expected a boolean, got {value!r}")


def _int(value: str, where: str) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise ParseError(f"{where}: expected an integer, got {value!r}") from None


def _float(value: str, where: str) -> float:
    try:
        return float(value.strip())
    except ValueError:
        raise ParseError(f"{where}: expected a number, got {value!r}") from None


def env_key(stage: str, key: str) -> str:
    return re.sub(r"[^A-Za-z0-9]", "_", stage).upper() + "__" + key.upper()


@dataclass
class StageSpec:
    name: str
    kind: str
    replicas: int = 1
    dispatcher: DispatcherConfig | None = None
    collector: CollectorConfig | None = None

    @property
    def inputs(self) -> list[str]:
        if self.dispatcher is not None:
            return [self.dispatcher.input_queue]
        return list(self.collector.input_queues)

    @property
    def outputs(self) -> list[str]:
        if self.dispatcher is not None:
            if self.dispatcher.redundancy is not None:
                return self.dispatcher.redundancy.queues()
            return [self.dispatcher.output_queue]
        return [self.collector.output_queue]


@dataclass
class PipelineSpec:
    queues: list[QueueConfig]
    stages: list[StageSpec]
    defaults: dict[str, Any] = field(default_factory=dict)
    terminal: set[str] = field(default_factory=set)

    def queue(self, name: str) -> QueueConfig:
        for q in self.queues:
            if q.name == name:
                return q
        raise KeyError(name)

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def validate(self) -> list[str]:
        """Raise on broken wiring; return soundness warnings."""
        names = [q.name for q in self.queues]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValidationError(f"queue(s) declared twice: {sorted(dupes)}")
        declared = set(names)
        stage_names = [s.name for s in self.stages]
        if len(set(stage_names)) != len(stage_names):
            raise ValidationError("stage names must be unique")
        for s in self.stages:
            for q in s.inputs + s.outputs:
                if q not in declared:
                    raise ValidationError(f"stage {s.name!r} references undeclared queue {q!r}")
            if set(s.inputs) & set(s.outputs):
                raise ValidationError(f"stage {s.name!r} reads and writes the same queue")
        consumed = {q for s in self.stages for q in s.inputs}
        warnings = []
        for q in names:
            if q not in consumed and q not in self.terminal:
                warnings.append(f"queue {q!r} has no consumer stage and is not marked TERMINAL")
        return warnings


_DISPATCHER_KEYS = {
    "KIND", "INPUT_QUEUE", "OUTPUT_QUEUE", "REPLICAS", "EXECUTOR", "WORKER_GROUP", "MAX_INFLIGHT",
    "IDEMPOTENT", "HEARTBEAT_INTERVAL", "ACK_WAIT", "PROVER_BINARY", "PROVER_ARGS", "PROVER_CALLABLE",
    "PROVER_TIMEOUT", "REDUNDANCY", "REDUNDANCY_PREFIX",
}
_COLLECTOR_KEYS = {
    "KIND", "INPUT_QUEUE", "OUTPUT_QUEUE", "REPLICAS", "NUM_INPUTS", "GROUPING_FIELD", "STRATEGY",
    "COLLECT_TIMEOUT_PERIOD_MILLIS", "ONE_CONSUMER_PER_SUBJECT", "ALLOW_PARTIAL", "BARRIER_TTL_MILLIS",
    "DEDUP_CAPACITY", "MAX_INFLIGHT", "NUM_COLLECTORS", "COLLECTOR_INDEX", "ROUTING",
}


def _executor_spec(sec: Mapping[str, str], where: str, heartbeat: float) -> ExecutorSpec:
    mode = sec.get("EXECUTOR", "simulated").strip().lower()
    hb = _float(sec["HEARTBEAT_INTERVAL"], where) if "HEARTBEAT_INTERVAL" in sec else heartbeat
    timeout = _float(sec["PROVER_TIMEOUT"], where) if "PROVER_TIMEOUT" in sec else None
    if mode == "subprocess":
        if "PROVER_BINARY" not in sec:
            raise ParseError(f"{where}: subprocess executor needs PROVER_BINARY")
        return ExecutorSpec("subprocess", binary_path=sec["PROVER_BINARY"].strip(),
                            extra_args=shlex.split(sec.get("PROVER_ARGS", "")), heartbeat_interval=hb,
                            timeout=timeout)
    if mode in ("in_process", "inprocess"):
        if "PROVER_CALLABLE" not in sec:
            raise ParseError(f"{where}: in_process executor needs PROVER_CALLABLE")
        return ExecutorSpec("in_process", callable_name=sec["PROVER_CALLABLE"].strip(), heartbeat_interval=hb,
                            timeout=timeout)
    if mode != "simulated":
        raise ParseError(f"{where}: unknown EXECUTOR {mode!r}")
    kw: dict[str, Any] = {"kind": sec.get("SIM_BEHAVIOR", "echo").strip().lower()}
    if "SIM_DURATION_MS" in sec:
        kw["duration"] = _float(sec["SIM_DURATION_MS"], where) / 1000
    if "SIM_DURATION_FIELD" in sec:
        kw["duration_field"] = sec["SIM_DURATION_FIELD"].strip()
    if "SIM_POISON_VALUE" in sec:
        raw = sec["SIM_POISON_VALUE"].strip()
        kw["poison_value"] = int(raw) if raw.isdigit() else raw
    if "SIM_POISON_FIELD" in sec:
        kw["poison_field"] = sec["SIM_POISON_FIELD"].strip()
    if "SIM_POISON_ORDINAL" in sec:
        kw["poison_ordinal"] = _int(sec["SIM_POISON_ORDINAL"], where)
    if "SIM_ORDINAL_FIELD" in sec:
        kw["ordinal_field"] = sec["SIM_ORDINAL_FIELD"].strip()
    if "SIM_EXTRA_DELAY_MS" in sec:
        kw["extra_delay"] = _float(sec["SIM_EXTRA_DELAY_MS"], where) / 1000
    if "SIM_CRASH_AT" in sec:
        kw["at_nth"] = _int(sec["SIM_CRASH_AT"], where)
    if "SIM_CRASH_PROBABILITY" in sec:
        kw["probability"] = _float(sec["SIM_CRASH_PROBABILITY"], where)
    if "SIM_SEED" in sec:
        kw["seed"] = _int(sec["SIM_SEED"], where)
    try:
        behavior = SimBehavior(**kw)
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from None
    return ExecutorSpec("simulated", behavior=behavior, heartbeat_interval=hb, timeout=timeout)


def parse(document: str, env: Mapping[str, str] | None = None) -> PipelineSpec:
    """Parse a pipeline document into a validated :class:`PipelineSpec`."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(delimiters=(":", "="), interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(document)
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None

    defaults = {k.upper(): v for k, v in cp["defaults"].items()} if cp.has_section("defaults") else {}
    ack_wait = _float(defaults["ACK_WAIT"], "[defaults]") if "ACK_WAIT" in defaults else default_ack_wait()
    heartbeat = _float(defaults.get("HEARTBEAT_INTERVAL", "5"), "[defaults]")
    durable = defaults.get("DURABLE_PATH", "").strip() or None

    queues: dict[str, QueueConfig] = {}
    terminal: set[str] = set()
    raw_stages: list[tuple[str, dict[str, str]]] = []
    for section in cp.sections():
        if section == "defaults":
            continue
        kind, _, name = section.partition(" ")
        name = name.strip()
        if kind not in ("queue", "stage") or not name:
            raise ParseError(f"unknown section [{section}]; expected [defaults], [queue NAME] or [stage NAME]")
        sec = {k.upper(): v for k, v in cp[section].items()}
        where = f"[{section}]"
        if kind == "queue":
            if name in queues:
                raise ValidationError(f"queue {name!r} declared twice")
            try:
                queues[name] = QueueConfig(
                    name=name,
                    max_depth=_int(sec.get("MAX_DEPTH", "10000"), where),
                    ack_timeout=_float(sec["ACK_WAIT"], where) if "ACK_WAIT" in sec else ack_wait,
                    max_retries=_int(sec.get("MAX_RETRIES", "5"), where),
                    priority_field=sec.get("PRIORITY_FIELD", "").strip() or None,
                    durable_path=durable,
                    partitions=_int(sec.get("PARTITIONS", "1"), where),
                    partition_field=sec.get("PARTITION_FIELD", "").strip() or None,
                )
            except ValueError as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ValidationError(f"queue {name!r}: {exc}") from None
            if _bool(sec.get("TERMINAL", "false"), where):
                terminal.add(name)
        else:
            prefix = re.sub(r"[^A-Za-z0-9]", "_", name).upper() + "__"
            for k, v in env.items():
                if k.startswith(prefix):
                    sec[k[len(prefix):].upper()] = v
            raw_stages.append((name, sec))

    stages = [_build_stage(name, sec, heartbeat) for name, sec in raw_stages]
    spec = PipelineSpec(list(queues.values()), stages, {"ack_wait": ack_wait, "heartbeat_interval": heartbeat,
                                                        "durable_path": durable}, terminal)
    _wire_partitions(spec)
    for w in spec.validate():
        logger.warning(w)
    return spec


def _build_stage(name: str, sec: dict[str, str], heartbeat: float) -> StageSpec:
    where = f"[stage {name}]"
    kind = sec.get("KIND", "dispatcher").strip().lower()
    replicas = _int(sec.get("REPLICAS", "1"), where)
    if replicas < 1:
        raise ValidationError(f"stage {name!r}: REPLICAS must be >= 1")
    for required in ("INPUT_QUEUE", "OUTPUT_QUEUE"):
        if kind in ("dispatcher", "collector") and required not in sec and "REDUNDANCY" not in sec:
            raise ValidationError(f"stage {name!r} is missing {required}")
    try:
        if kind == "dispatcher":
            unknown = set(sec) - _DISPATCHER_KEYS - {k for k in sec if k.startswith("SIM_")}
            if unknown:
                logger.warning("%s: ignoring unknown keys %s", where, sorted(unknown))
            redundancy = None
            if "REDUNDANCY" in sec:
                from push0.dispatcher import Redundancy
                redundancy = Redundancy(_int(sec["REDUNDANCY"], where), sec.get("REDUNDANCY_PREFIX", name).strip())
            executor = None if redundancy else _executor_spec(sec, where, heartbeat)
            cfg = DispatcherConfig(
                input_queue=sec["INPUT_QUEUE"].strip(),
                output_queue=sec.get("OUTPUT_QUEUE", "").strip() or None,
                executor=executor,
                worker_group=sec.get("WORKER_GROUP", name).strip(),
                idempotency=_bool(sec.get("IDEMPOTENT", "false"), where),
                max_inflight=_int(sec.get("MAX_INFLIGHT", "1"), where),
                redundancy=redundancy,
            )
            return StageSpec(name, "dispatcher", replicas, dispatcher=cfg)
        if kind == "collector":
            unknown = set(sec) - _COLLECTOR_KEYS
            if unknown:
                logger.warning("%s: ignoring unknown keys %s", where, sorted(unknown))
            num_inputs = _int(sec.get("NUM_INPUTS", "1"), where)
            grouping = sec.get("GROUPING_FIELD", "block_num").strip()
            allow_partial = _bool(sec.get("ALLOW_PARTIAL", "false"), where)
            timeout = _float(sec.get("COLLECT_TIMEOUT_PERIOD_MILLIS", "1000"), where) / 1000
            ttl = sec.get("BARRIER_TTL_MILLIS")
            cfg = CollectorConfig(
                input_queues=sec["INPUT_QUEUE"],
                output_queue=sec["OUTPUT_QUEUE"].strip(),
                num_inputs=num_inputs,
                grouping_field=grouping,
                strategy=StrategySpec(sec.get("STRATEGY", "Match").strip(), num_inputs, grouping, allow_partial),
                collect_timeout=timeout,
                one_consumer_per_subject=_bool(sec.get("ONE_CONSUMER_PER_SUBJECT", "false"), where),
                num_collectors=replicas,
                collector_index=0,
                dedup_capacity=_int(sec.get("DEDUP_CAPACITY", "65536"), where),
                allow_partial=allow_partial,
                barrier_ttl=_float(ttl, where) / 1000 if ttl else None,
                max_inflight=_int(sec.get("MAX_INFLIGHT", "4096"), where),
                worker_group=name,
                routing=sec.get("ROUTING", "affine").strip().lower(),
            )
            return StageSpec(name, "collector", replicas, collector=cfg)
    except ParseError:
        raise
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"stage {name!r}: {exc}") from None
    raise ValidationError(f"stage {name!r}: unknown KIND {kind!r}")


def _wire_partitions(spec: PipelineSpec) -> None:
    """Partition each collector input queue by the collector's grouping field, one partition per replica."""
    by_name = {q.name: q for q in spec.queues}
    for s in spec.stages:
        if s.collector is None or s.collector.routing != "affine":
            continue
        for qname in s.collector.input_queues:
            q = by_name.get(qname)
            if q is None:
                continue
            if q.partition_field and q.partition_field != s.collector.grouping_field:
                raise ValidationError(
                    f"queue {qname!r} is partitioned by {q.partition_field!r} but stage {s.name!r} groups by "
                    f"{s.collector.grouping_field!r}")
            q.partition_field = s.collector.grouping_field
            q.partitions = max(q.partitions, s.replicas)


def load(path: str | os.PathLike, env: Mapping[str, str] | None = None) -> PipelineSpec:
    return parse(Path(path).read_text(), env)


# -- running ---------------------------------------------------------------


class PipelineHandle:
    """A running pipeline.  Methods are safe to call from any thread."""

    def __init__(self, spec: PipelineSpec, bus: Bus, owns_bus: bool, metrics: MetricsRegistry | None,
                 span_log: SpanLog | None, hooks: dict[str, Any] | None):
        self.spec = spec
        self.bus = bus
        self.owns_bus = owns_bus
        self.metrics = metrics
        self.span_log = span_log
        self.hooks = hooks or {}
        self.dispatchers: dict[str, list[Dispatcher]] = {}
        self.collectors: dict[str, list[Collector]] = {}
        self.retired: dict[str, list] = {}
        self.assignments: dict[str, PartitionAssignment] = {}
        self._lock = threading.RLock()
        self._stopped = False

    def _new_dispatcher(self, stage: StageSpec, idx: int) -> Dispatcher:
        cfg = stage.dispatcher
        if cfg.idempotency and cfg.result_store is None:
            durable = self.spec.defaults.get("durable_path")
            cfg.result_store = ResultStore(Path(durable) / f"{stage.name}.results.jsonl" if durable else None)
        return Dispatcher(self.bus, cfg, name=f"{stage.name}-{idx}", metrics=self.metrics, span_log=self.span_log,
                          on_pickup=self.hooks.get("on_pickup"), on_complete=self.hooks.get("on_complete"))

    def _new_collector(self, stage: StageSpec, idx: int, partitions=None) -> Collector:
        base = stage.collector
        cfg = CollectorConfig(**{**base.__dict__, "collector_index": idx, "num_collectors": stage.replicas,
                                 "partitions": partitions})
        return Collector(self.bus, cfg, name=f"{stage.name}-{idx}", metrics=self.metrics, span_log=self.span_log,
                         on_emit=self.hooks.get("on_emit"), on_event=self.hooks.get("on_event"))

    def publish(self, queue: str, payload: dict, **kw) -> int:
        """Publish with a fresh trace root (the enqueue span)."""
        with child_span(None, f"enqueue.{queue}", self.span_log, self.metrics) as span:
            return self.bus.publish(queue, payload, {"traceparent": span.traceparent},
                                    trace_context=span.traceparent, **kw)

    def scale(self, stage_name: str, replicas: int) -> dict[str, Any]:
        """Change a stage's replica count.

        Dispatcher stages add or stop worker-group members.  Collector stages
        scale down by draining the retired collectors and handing their
        partitions to the survivors.
        """
        with self._lock:
            stage = self.spec.stage(stage_name)
            if stage.kind == "dispatcher":
                cur = self.dispatchers[stage_name]
                while len(cur) < replicas:
                    cur.append(self._new_dispatcher(stage, len(cur)).start())
                retired = []
                while len(cur) > replicas:
                    retired.append(cur.pop())
                for d in retired:
                    d.stop()
                self.retired.setdefault(stage_name, []).extend(retired)
                stage.replicas = replicas
                return {"stage": stage_name, "replicas": replicas}
            old = self.assignments[stage_name]
            new = rebalance(old, replicas)
            for q in stage.collector.input_queues:
                self.bus.set_routing(q, replicas)
            live = self.collectors[stage_name]
            leaving = live[replicas:]
            with ThreadPoolExecutor(max_workers=max(1, len(leaving))) as pool:
                reports = list(pool.map(lambda c: c.drain(), leaving))
            for i, c in enumerate(live[:replicas]):
                c.set_partitions(new.owned(i))
            self.collectors[stage_name] = live[:replicas]
            self.retired.setdefault(stage_name, []).extend(leaving)
            self.assignments[stage_name] = new
            stage.replicas = replicas
            return {"stage": stage_name, "replicas": replicas, "drain": [r.__dict__ for r in reports]}

    def stats(self) -> dict[str, Any]:
        with self._lock:
            out: dict[str, Any] = {"queues": {}, "stages": {}}
            for q in self.spec.queues:
                out["queues"][q.name] = self.bus.stream_state(q.name).as_dict()
            for name, ds in self.dispatchers.items():
                out["stages"][name] = [dict(d.stats.__dict__) for d in ds + self.retired.get(name, [])]
            for name, cs in self.collectors.items():
                out["stages"][name] = [dict(c.stats.__dict__) for c in cs + self.retired.get(name, [])]
            return out

    def wait_idle(self, timeout: float, queues: list[str] | None = None, poll: float = 0.05) -> bool:
        """Wait until the non-terminal queues are empty."""
        names = queues or [q.name for q in self.spec.queues if q.name not in self.spec.terminal]
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(self.bus.stream_state(n).depth == 0 for n in names):
                return True
            time.sleep(poll)
        return False

    def stop(self, grace: float | None = None) -> None:
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
            for ds in self.dispatchers.values():
                for d in ds:
                    d._shutdown.set()
            for ds in self.dispatchers.values():
                for d in ds:
                    d.join(10)
            for cs in self.collectors.values():
                for c in cs:
                    c.drain(grace)
            if self.owns_bus:
                self.bus.close()
            if self.span_log is not None and self.hooks.get("close_span_log"):
                self.span_log.close()


def launch(
    spec: PipelineSpec,
    bus: Bus | None = None,
    *,
    metrics: MetricsRegistry | None = None,
    span_log: SpanLog | None = None,
    hooks: dict[str, Any] | None = None,
) -> PipelineHandle:
    """Declare the queues and start every stage replica."""
    for w in spec.validate():
        logger.warning(w)
    owns = bus is None
    if bus is None:
        bus = Bus(spec.defaults.get("durable_path"))
    for q in spec.queues:
        bus.declare_queue(q)
    handle = PipelineHandle(spec, bus, owns, metrics, span_log, hooks)
    failures: dict[str, Exception] = {}
    for stage in spec.stages:
        try:
            if stage.kind == "dispatcher":
                handle.dispatchers[stage.name] = [
                    handle._new_dispatcher(stage, i).start() for i in range(stage.replicas)]
            else:
                handle.assignments[stage.name] = PartitionAssignment(stage.replicas, stage.replicas)
                handle.collectors[stage.name] = [
                    handle._new_collector(stage, i).start() for i in range(stage.replicas)]
        except Exception as exc:
            failures[stage.name] = exc
    if failures:
        handle.stop()
        raise LaunchError(failures)
    return handle


# -- built-in topologies -----------------------------------------------------

TOPOLOGIES: dict[str, str] = {
    "a": """
[queue blocks]
PRIORITY_FIELD = block_num
[queue proofs]
TERMINAL = true
[stage prove]
KIND = dispatcher
INPUT_QUEUE: blocks
OUTPUT_QUEUE: proofs
SIM_BEHAVIOR = echo
""",
    "b": """
[queue blocks]
PRIORITY_FIELD = block_num
[queue proofs]
TERMINAL = true
[stage prove]
KIND = dispatcher
INPUT_QUEUE: blocks
OUTPUT_QUEUE: proofs
REPLICAS: 4
SIM_BEHAVIOR = echo
""",
    "c": """
[queue chunk_tasks]
PRIORITY_FIELD = block_num
[queue chunk_proofs]
[queue block_proofs]
TERMINAL = true
[stage prove_chunks]
KIND = dispatcher
INPUT_QUEUE: chunk_tasks
OUTPUT_QUEUE: chunk_proofs
REPLICAS: 8
SIM_BEHAVIOR = echo
[stage aggregate]
KIND = collector
INPUT_QUEUE: chunk_proofs
OUTPUT_QUEUE: block_proofs
STRATEGY: Match
NUM_INPUTS: 8
GROUPING_FIELD: block_num
COLLECT_TIMEOUT_PERIOD_MILLIS: 1000
""",
    "d": """
[queue Q1]
PRIORITY_FIELD = block_num
[queue Q2]
[queue Q3]
[queue Q4]
[queue Q5]
[queue Q6]
TERMINAL = true
[stage A]
INPUT_QUEUE: Q1
OUTPUT_QUEUE: Q2
[stage B]
INPUT_QUEUE: Q2
OUTPUT_QUEUE: Q3
[stage D]
INPUT_QUEUE: Q1
OUTPUT_QUEUE: Q4
[stage E]
INPUT_QUEUE: Q4
OUTPUT_QUEUE: Q5
[stage C]
KIND = collector
INPUT_QUEUE: Q3,Q5
OUTPUT_QUEUE: Q6
STRATEGY: Match
NUM_INPUTS: 2
GROUPING_FIELD: block_num
ONE_CONSUMER_PER_SUBJECT: true
""",
    # Dual track: proposer metadata and proving flows meet at the batch aggregator.
    # Compression is modelled as one dispatcher stage.
    "e": """
[queue blocks]
PRIORITY_FIELD = block_num
[queue batches]
PRIORITY_FIELD = block_num
[queue chunk_tasks]
PRIORITY_FIELD = block_num
[queue chunk_proofs]
PRIORITY_FIELD = block_num
[queue thin_proofs]
PRIORITY_FIELD = block_num
[queue batch_proofs]
TERMINAL = true
[stage propose]
INPUT_QUEUE: blocks
OUTPUT_QUEUE: batches
SIM_BEHAVIOR = sleep
SIM_DURATION_MS = 10
[stage prove_chunk]
INPUT_QUEUE: chunk_tasks
OUTPUT_QUEUE: chunk_proofs
REPLICAS: 4
SIM_BEHAVIOR = sleep
SIM_DURATION_MS = 300
[stage compress]
INPUT_QUEUE: chunk_proofs
OUTPUT_QUEUE: thin_proofs
SIM_BEHAVIOR = echo
[stage aggregate]
KIND = collector
INPUT_QUEUE: thin_proofs,batches
OUTPUT_QUEUE: batch_proofs
STRATEGY: Match
NUM_INPUTS: 9
GROUPING_FIELD: block_num
ONE_CONSUMER_PER_SUBJECT: true
""",
}


def builtin_topologies(env: Mapping[str, str] | None = None) -> dict[str, PipelineSpec]:
    return {name: parse(text, env if env is not None else {}) for name, text in TOPOLOGIES.items()}
