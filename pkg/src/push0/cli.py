"""Command line entry point: ``push0 <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time

from push0 import __version__


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _emit(report, args) -> int:
    if args.out:
        report.write(args.out)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, default=str))
    else:
        print(json.dumps(report.summary, indent=2, default=str))
    print(report.line())
    return 0 if report.passed else 1


# -- run -----------------------------------------------------------------------

def cmd_run(args) -> int:
    from push0.observability import MetricsRegistry, SpanLog, serve_metrics, watch_bus
    from push0.pipeline import TOPOLOGIES, launch, load, parse

    spec = load(args.config) if args.config else parse(TOPOLOGIES[args.topology])
    registry = MetricsRegistry()
    spans = SpanLog(args.spans) if args.spans else None
    handle = launch(spec, metrics=registry, span_log=spans, hooks={"close_span_log": True})
    watch_bus(registry, handle.bus)
    server = serve_metrics(registry, port=args.metrics_port) if args.metrics_port is not None else None
    if server:
        print(f"metrics at {server.url}", file=sys.stderr)

    outputs = {q for st in spec.stages for q in st.outputs}
    sources = [q.name for q in spec.queues if q.name not in outputs]
    inject = {}
    for item in args.inject or [f"{q}:1" for q in sources]:
        name, _, per = item.partition(":")
        inject[name] = int(per or 1)
    for b in range(args.blocks):
        for q, per in inject.items():
            for j in range(per):
                handle.publish(q, {"block_num": b, "task_id": f"{q}-{b}-{j}", "proof_index": j})

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    deadline = time.monotonic() + args.duration if args.duration else None
    while not stop.is_set():
        if deadline is not None and time.monotonic() >= deadline:
            break
        if args.until_idle and handle.wait_idle(0.2):
            break
        stop.wait(0.2)
    handle.stop()
    if server:
        server.close()
    print(json.dumps(handle.stats(), indent=2, default=str))
    return 0


# -- bench / exp / chaos ---------------------------------------------------------

def cmd_bench(args) -> int:
    from push0.harness import experiments as ex

    if args.kind == "latency":
        report = ex.bench_latency(rates=_floats(args.rates), n_tasks=args.tasks, repetitions=args.repetitions,
                                  dispatchers=args.dispatchers)
    else:
        report = ex.bench_scaling(_ints(args.dispatcher_counts), tasks_per_dispatcher=args.tasks_per_dispatcher,
                                  prover_latency=args.prover_latency, repetitions=args.repetitions,
                                  min_efficiency=args.min_efficiency)
    return _emit(report, args)


def cmd_exp(args) -> int:
    from push0.harness import experiments as ex

    if args.kind == "fragmentation":
        report = ex.exp_fragmentation(args.collectors, args.k, args.barriers, args.routing, seed=args.seed)
    elif args.kind == "multiqueue":
        kw = dict(blocks=args.blocks, proofs_per_block=args.proofs_per_block,
                  proposer_latency=args.proposer_latency, prover_latency=args.prover_latency,
                  prover_replicas=args.replicas,
                  poison=None if args.no_poison else (args.poison_block, args.poison_delay))
        report = ex.compare_multiqueue(**kw) if args.mode == "both" else ex.exp_multiqueue(mode=args.mode, **kw)
    elif args.kind == "ordering":
        report = ex.exp_ordering(args.blocks, (args.min_delay, args.max_delay), dispatchers=args.dispatchers,
                                 adversarial=args.adversarial, seed=args.seed)
    elif args.kind == "skew":
        report = ex.exp_skew_memory(tuple(_ints(args.ratios)), blocks=args.blocks, window=args.window)
    elif args.kind == "dedup":
        report = ex.exp_dedup(seed=args.seed)
    elif args.kind == "backpressure":
        report = ex.exp_backpressure(max_depth=args.max_depth)
    elif args.kind == "mttr":
        report = ex.exp_mttr(tuple(_floats(args.ack_waits)))
    elif args.kind == "metrics":
        report = ex.exp_metrics()
    else:
        report = ex.exp_tracing(out_dir=args.out)
    return _emit(report, args)


def cmd_chaos(args) -> int:
    from push0.harness import experiments as ex

    if args.target == "dispatcher":
        report = ex.chaos_dispatcher_kill(tasks=args.tasks, prover_latency=args.prover_latency,
                                          ack_timeout=args.ack_wait, seed=args.seed)
    elif args.target == "collector":
        report = ex.chaos_collector_kill(ack_timeout=args.ack_wait)
    else:
        report = ex.chaos_bus_pause(tuple(_floats(args.pauses)), ack_timeout=args.ack_wait)
    return _emit(report, args)


def cmd_verify(args) -> int:
    from push0.harness.verify import run

    failed = run(_ints(args.criteria) if args.criteria else None, out_dir=args.out)
    return 1 if failed else 0


def cmd_worker(args) -> int:
    from push0.dispatcher import worker_main

    return worker_main(args)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="push0", description="Ordered, fault-tolerant compute pipelines.")
    p.add_argument("--version", action="version", version=f"push0 {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def reporting(sp):
        sp.add_argument("--out", help="directory for report.json and report.csv")
        sp.add_argument("--json", action="store_true", help="print the full report")

    r = sub.add_parser("run", help="launch a pipeline")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="pipeline document")
    src.add_argument("--topology", choices=list("abcde"), help="built-in topology")
    r.add_argument("--blocks", type=int, default=0, help="blocks to inject into each source queue")
    r.add_argument("--inject", action="append", metavar="QUEUE[:PER_BLOCK]")
    r.add_argument("--duration", type=float, default=None)
    r.add_argument("--until-idle", action="store_true")
    r.add_argument("--metrics-port", type=int, default=None)
    r.add_argument("--spans", help="span log path")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench", help="latency and scaling benchmarks")
    b.add_argument("kind", choices=["latency", "scaling"])
    b.add_argument("--rates", default="100")
    b.add_argument("--tasks", type=int, default=1000)
    b.add_argument("--dispatchers", type=int, default=10)
    b.add_argument("--dispatcher-counts", default="1,2,4,8")
    b.add_argument("--tasks-per-dispatcher", type=int, default=10)
    b.add_argument("--prover-latency", type=float, default=1.0)
    b.add_argument("--min-efficiency", type=float, default=None)
    b.add_argument("--repetitions", type=int, default=1)
    reporting(b)
    b.set_defaults(fn=cmd_bench)

    e = sub.add_parser("exp", help="experiments")
    e.add_argument("kind", choices=["fragmentation", "multiqueue", "ordering", "skew", "dedup", "backpressure",
                                    "mttr", "metrics", "tracing"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--collectors", type=int, default=4)
    e.add_argument("--k", type=int, default=4)
    e.add_argument("--barriers", type=int, default=100)
    e.add_argument("--routing", choices=["affine", "round_robin"], default="affine")
    e.add_argument("--mode", choices=["multi", "linear", "both"], default="both")
    e.add_argument("--blocks", type=int, default=None)
    e.add_argument("--proofs-per-block", type=int, default=8)
    e.add_argument("--proposer-latency", type=float, default=0.01)
    e.add_argument("--prover-latency", type=float, default=0.3)
    e.add_argument("--replicas", type=int, default=4)
    e.add_argument("--poison-block", type=int, default=5)
    e.add_argument("--poison-delay", type=float, default=15.0)
    e.add_argument("--no-poison", action="store_true")
    e.add_argument("--min-delay", type=float, default=0.1)
    e.add_argument("--max-delay", type=float, default=2.0)
    e.add_argument("--dispatchers", type=int, default=16)
    e.add_argument("--adversarial", action="store_true")
    e.add_argument("--ratios", default="30,50,100")
    e.add_argument("--window", type=int, default=16)
    e.add_argument("--max-depth", type=int, default=1000)
    e.add_argument("--ack-waits", default="5,10,20")
    reporting(e)
    e.set_defaults(fn=cmd_exp)

    c = sub.add_parser("chaos", help="fault injection")
    c.add_argument("--target", choices=["dispatcher", "collector", "bus"], default="dispatcher")
    c.add_argument("--action", choices=["kill", "pause"], default=None)
    c.add_argument("--tasks", type=int, default=50)
    c.add_argument("--prover-latency", type=float, default=1.0)
    c.add_argument("--ack-wait", type=float, default=None)
    c.add_argument("--pauses", default="5,10,20")
    c.add_argument("--seed", type=int, default=0)
    reporting(c)
    c.set_defaults(fn=cmd_chaos)

    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    w = sub.add_parser("worker", help="run a stage process against a remote bus")
    w.add_argument("role", choices=["dispatcher"])
    w.add_argument("--connect", required=True, metavar="HOST:PORT")
    w.add_argument("--input", required=True)
    w.add_argument("--output", required=True)
    w.add_argument("--group", default=None)
    w.add_argument("--name", default=None)
    w.add_argument("--binary", default=None, help="prover executable (file protocol)")
    w.add_argument("--extra-arg", action="append")
    w.add_argument("--sim", choices=["echo", "sleep", "crash"], default="sleep")
    w.add_argument("--duration", type=float, default=0.0)
    w.add_argument("--crash-at", type=int, default=None)
    w.add_argument("--crash-probability", type=float, default=None)
    w.add_argument("--seed", type=int, default=None)
    w.add_argument("--heartbeat", type=float, default=5.0)
    w.add_argument("--ack-delay", type=float, default=0.0)
    w.set_defaults(fn=cmd_worker)
    return p


_EXP_DEFAULT_BLOCKS = {"multiqueue": 30, "ordering": 100, "skew": 200}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "exp" and args.blocks is None:
        args.blocks = _EXP_DEFAULT_BLOCKS.get(args.kind, 0)
    if args.command == "chaos":
        if args.action is None:
            args.action = "pause" if args.target == "bus" else "kill"
        if (args.target == "bus") != (args.action == "pause"):
            build_parser().error("bus supports pause; dispatcher and collector support kill")
        if args.ack_wait is None:
            args.ack_wait = {"dispatcher": 3.0, "collector": 2.0, "bus": 5.0}[args.target]
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
