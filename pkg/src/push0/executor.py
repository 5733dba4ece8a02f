"""Prover invocation: subprocess, in-process and simulated executors.

Subprocess contract: the binary is run as
``[binary, *extra_args, --input-path IN, --output-path OUT]`` where IN holds the
canonical input document; exit 0 means OUT holds the output document.
"""

from __future__ import annotations

import logging
import os
import random
import shutil
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from push0.model import Payload, PayloadError, decode_payload, encode_payload

logger = logging.getLogger(__name__)

STDERR_CAP = 64 * 1024
DEFAULT_HEARTBEAT_INTERVAL = 5.0

MODES = ("subprocess", "in_process", "simulated")
SIM_KINDS = ("echo", "sleep", "poison", "crash")


class ExecutionError(Exception):
    pass


class NonZeroExit(ExecutionError):
    def __init__(self, code: int, stderr: str = "", workdir: str | None = None):
        super().__init__(f"prover exited with status {code}")
        self.code = code
        self.stderr = stderr
        self.workdir = workdir


class OutputMissing(ExecutionError):
    pass


class OutputUnparseable(ExecutionError):
    pass


class Timeout(ExecutionError):
    pass


class SpawnError(ExecutionError):
    pass


class UnknownCallable(SpawnError):
    pass


class Cancelled(ExecutionError):
    pass


class SimulatedCrash(ExecutionError):
    """Raised by a ``crash`` behaviour whose crash_mode is ``raise``."""


class DuplicateName(ValueError):
    pass


@dataclass
class SimBehavior:
    """What a simulated prover does with each task.

    ``sleep`` waits ``duration`` seconds (or the payload's ``duration_field``).
    ``poison`` sleeps like ``sleep`` but adds ``extra_delay`` to the single task
    whose ``poison_field`` equals ``poison_value`` and whose ``ordinal_field``
    equals ``poison_ordinal``.  ``crash`` fails the ``at_nth`` invocation (1-based)
    or each invocation with ``probability``; otherwise it behaves like ``sleep``.
    """

    kind: str = "echo"
    duration: float = 0.0
    duration_field: str | None = None
    poison_field: str = "block_num"
    poison_value: Any = None
    ordinal_field: str = "proof_index"
    poison_ordinal: int = 0
    extra_delay: float = 0.0
    at_nth: int | None = None
    probability: float | None = None
    crash_mode: str = "raise"
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in SIM_KINDS:
            raise ValueError(f"unknown simulated behaviour {self.kind!r}")
        if self.duration < 0 or self.extra_delay < 0:
            raise ValueError("delays must be >= 0")
        if self.probability is not None and not 0 <= self.probability <= 1:
            raise ValueError("crash probability must be in [0, 1]")
        if self.kind == "crash" and self.at_nth is None and self.probability is None:
            raise ValueError("crash behaviour needs at_nth or probability")
        if self.at_nth is not None and self.at_nth < 1:
            raise ValueError("at_nth is 1-based")
        if self.crash_mode not in ("raise", "exit"):
            raise ValueError("crash_mode must be 'raise' or 'exit'")

    def is_poisoned(self, payload: Payload) -> bool:
        if self.kind != "poison" or self.poison_value is None:
            return False
        return (payload.get(self.poison_field) == self.poison_value
                and payload.get(self.ordinal_field, 0) == self.poison_ordinal)

    def delay_for(self, payload: Payload) -> float:
        if self.kind == "echo":
            return 0.0
        d = self.duration
        if self.duration_field and self.duration_field in payload:
            d = float(payload[self.duration_field])
        if self.is_poisoned(payload):
            d += self.extra_delay
        return max(0.0, d)


@dataclass
class ExecutorSpec:
    mode: str
    binary_path: str | None = None
    extra_args: list[str] = field(default_factory=list)
    callable_name: str | None = None
    behavior: SimBehavior | None = None
    heartbeat_interval: float = DEFAULT_HEARTBEAT_INTERVAL
    timeout: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown executor mode {self.mode!r}")
        populated = {
            "subprocess": self.binary_path is not None,
            "in_process": self.callable_name is not None,
            "simulated": self.behavior is not None,
        }
        if not populated[self.mode] or sum(populated.values()) != 1:
            raise ValueError(f"executor mode {self.mode} needs exactly its own fields set: {populated}")
        if self.heartbeat_interval <= 0:
            raise ValueError("heartbeat_interval must be > 0")

    @classmethod
    def echo(cls, **kw) -> "ExecutorSpec":
        return cls("simulated", behavior=SimBehavior("echo"), **kw)

    @classmethod
    def sleep(cls, seconds: float, **kw) -> "ExecutorSpec":
        return cls("simulated", behavior=SimBehavior("sleep", duration=seconds), **kw)


@dataclass
class Failure:
    code: int | None
    diagnostics: str


@dataclass
class ExecutionResult:
    output: Payload | None
    wall_time: float
    exit_status: str | Failure = "success"

    @property
    def ok(self) -> bool:
        return self.exit_status == "success"


_registry: dict[str, Callable[[Payload], Payload]] = {}
_registry_lock = threading.Lock()


def register_in_process(name: str, fn: Callable[[Payload], Payload]) -> None:
    with _registry_lock:
        if name in _registry:
            raise DuplicateName(name)
        _registry[name] = fn


def unregister_in_process(name: str) -> None:
    with _registry_lock:
        _registry.pop(name, None)


def resolve_in_process(name: str) -> Callable[[Payload], Payload]:
    with _registry_lock:
        fn = _registry.get(name)
    if fn is None:
        raise UnknownCallable(f"no in-process prover registered as {name!r}")
    return fn


class _Ticker:
    """Calls ``hook`` every ``interval`` seconds until stopped."""

    def __init__(self, hook: Callable[[], None] | None, interval: float):
        self.hook = hook
        self.interval = interval
        self.stopped = threading.Event()
        self.beats = 0
        self.thread = None
        if hook is not None:
            self.thread = threading.Thread(target=self._run, name="heartbeat", daemon=True)
            self.thread.start()

    def _run(self) -> None:
        while not self.stopped.wait(self.interval):
            try:
                self.hook()
                self.beats += 1
            except Exception as exc:
                logger.warning("heartbeat failed: %s", exc)

    def stop(self) -> None:
        self.stopped.set()
        if self.thread is not None and self.thread is not threading.current_thread():
            self.thread.join()


class Executor:
    """Runs one :class:`ExecutorSpec`.  Safe to share between threads."""

    def __init__(self, spec: ExecutorSpec):
        self.spec = spec
        self._count_lock = threading.Lock()
        self.invocations = 0
        b = spec.behavior
        self._rng = random.Random(b.seed if b is not None else None)

    def execute(
        self,
        payload: Payload,
        heartbeat_hook: Callable[[], None] | None = None,
        cancel: threading.Event | None = None,
    ) -> ExecutionResult:
        """Run the prover on ``payload``.  Failures raise :class:`ExecutionError`."""
        encode_payload(payload)
        with self._count_lock:
            self.invocations += 1
            nth = self.invocations
        cancel = cancel or threading.Event()
        ticker = _Ticker(heartbeat_hook, self.spec.heartbeat_interval)
        start = time.monotonic()
        try:
            if self.spec.mode == "subprocess":
                out = self._run_subprocess(payload, cancel)
            elif self.spec.mode == "in_process":
                out = self._run_in_process(payload)
            else:
                out = self._run_simulated(payload, nth, cancel)
        finally:
            ticker.stop()
        return ExecutionResult(out, time.monotonic() - start)

    def try_execute(self, payload: Payload, heartbeat_hook=None, cancel=None) -> ExecutionResult:
        """Like :meth:`execute` but reports failures in ``exit_status``."""
        start = time.monotonic()
        try:
            return self.execute(payload, heartbeat_hook, cancel)
        except NonZeroExit as exc:
            return ExecutionResult(None, time.monotonic() - start, Failure(exc.code, exc.stderr))
        except ExecutionError as exc:
            return ExecutionResult(None, time.monotonic() - start, Failure(None, f"{type(exc).__name__}: {exc}"))

    def _run_in_process(self, payload: Payload) -> Payload:
        fn = resolve_in_process(self.spec.callable_name)
        out = fn(decode_payload(encode_payload(payload)))
        try:
            return decode_payload(encode_payload(out))
        except PayloadError as exc:
            raise OutputUnparseable(str(exc)) from exc

    def _run_simulated(self, payload: Payload, nth: int, cancel: threading.Event) -> Payload:
        b = self.spec.behavior
        if b.kind == "crash":
            hit = (b.at_nth is not None and nth == b.at_nth) or (
                b.probability is not None and self._rng.random() < b.probability
            )
            if hit:
                if b.crash_mode == "exit":
                    logger.error("simulated crash on invocation %d; terminating process", nth)
                    os._exit(137)
                raise SimulatedCrash(f"simulated crash on invocation {nth}")
        delay = b.delay_for(payload)
        if self.spec.timeout is not None and delay > self.spec.timeout:
            if cancel.wait(self.spec.timeout):
                raise Cancelled("execution cancelled")
            raise Timeout(f"simulated task exceeded {self.spec.timeout}s")
        if delay > 0 and cancel.wait(delay):
            raise Cancelled("execution cancelled")
        out = dict(payload)
        out["proved"] = True
        return out

    def _run_subprocess(self, payload: Payload, cancel: threading.Event) -> Payload:
        workdir = tempfile.mkdtemp(prefix="push0-task-")
        in_path = os.path.join(workdir, "input.json")
        out_path = os.path.join(workdir, "output.json")
        with open(in_path, "wb") as fh:
            fh.write(encode_payload(payload))
        argv = [self.spec.binary_path, *self.spec.extra_args, "--input-path", in_path, "--output-path", out_path]
        ok = False
        try:
            with open(os.path.join(workdir, "stderr"), "w+b") as err, open(os.path.join(workdir, "stdout"), "w+b") as out:
                try:
                    proc = subprocess.Popen(argv, stdout=out, stderr=err, stdin=subprocess.DEVNULL)
                except OSError as exc:
                    raise SpawnError(f"cannot start {argv[0]}: {exc}") from exc
                deadline = None if self.spec.timeout is None else time.monotonic() + self.spec.timeout
                while True:
                    try:
                        code = proc.wait(timeout=0.05)
                        break
                    except subprocess.TimeoutExpired:
                        pass
                    if cancel.is_set():
                        proc.kill()
                        proc.wait()
                        raise Cancelled("execution cancelled")
                    if deadline is not None and time.monotonic() >= deadline:
                        proc.kill()
                        proc.wait()
                        raise Timeout(f"{argv[0]} exceeded {self.spec.timeout}s")
                err.seek(0)
                stderr = err.read(STDERR_CAP).decode("utf-8", "replace")
            if code != 0:
                raise NonZeroExit(code, stderr, workdir)
            if not os.path.exists(out_path):
                raise OutputMissing(f"{argv[0]} exited 0 without writing {out_path}")
            try:
                with open(out_path, "rb") as fh:
                    result = decode_payload(fh.read())
            except (PayloadError, UnicodeDecodeError) as exc:
                raise OutputUnparseable(f"{out_path}: {exc}") from exc
            ok = True
            return result
        finally:
            if ok:
                shutil.rmtree(workdir, ignore_errors=True)
            else:
                logger.warning("prover failed; keeping work directory %s", workdir)


def execute(spec: ExecutorSpec, payload: Payload, heartbeat_hook: Callable[[], None] | None = None) -> ExecutionResult:
    return Executor(spec).execute(payload, heartbeat_hook)
