import os
import sys
import threading
import time

import pytest

from push0.executor import (
    Cancelled,
    DuplicateName,
    Executor,
    ExecutorSpec,
    NonZeroExit,
    OutputMissing,
    OutputUnparseable,
    SimBehavior,
    SimulatedCrash,
    SpawnError,
    Timeout,
    UnknownCallable,
    execute,
    register_in_process,
    unregister_in_process,
)

STUB = [sys.executable, "-m", "push0.stub_prover"]


def stub(*extra, **kw):
    return ExecutorSpec("subprocess", binary_path=STUB[0], extra_args=[*STUB[1:], *extra], **kw)


def test_echo():
    r = execute(ExecutorSpec.echo(), {"block_num": 3})
    assert r.output == {"block_num": 3, "proved": True}
    assert r.wall_time < 0.05 and r.ok


def test_sleep_duration():
    r = execute(ExecutorSpec.sleep(0.2), {"block_num": 0})
    assert 0.2 <= r.wall_time < 0.4


def test_serial_sleeps_add_up():
    ex = Executor(ExecutorSpec.sleep(0.05))
    t0 = time.monotonic()
    for i in range(10):
        ex.execute({"block_num": i})
    assert 0.5 <= time.monotonic() - t0 < 0.8
    assert ex.invocations == 10


def test_poison_only_hits_target():
    b = SimBehavior("poison", duration=0.05, poison_value=5, poison_ordinal=0, extra_delay=0.3)
    ex = Executor(ExecutorSpec("simulated", behavior=b))
    slow = ex.execute({"block_num": 5, "proof_index": 0}).wall_time
    other_index = ex.execute({"block_num": 5, "proof_index": 1}).wall_time
    other_block = ex.execute({"block_num": 4, "proof_index": 0}).wall_time
    assert 0.35 <= slow < 0.5
    assert other_index < 0.15 and other_block < 0.15


def test_duration_field():
    b = SimBehavior("sleep", duration_field="delay")
    assert b.delay_for({"delay": 0.7}) == 0.7
    assert b.delay_for({}) == 0.0


def test_crash_at_nth():
    ex = Executor(ExecutorSpec("simulated", behavior=SimBehavior("crash", at_nth=2)))
    ex.execute({"i": 1})
    with pytest.raises(SimulatedCrash):
        ex.execute({"i": 2})
    ex.execute({"i": 3})


def test_crash_behaviour_needs_trigger():
    with pytest.raises(ValueError):
        SimBehavior("crash")


def test_in_process_registry():
    register_in_process("double", lambda p: {**p, "x": p["x"] * 2})
    try:
        with pytest.raises(DuplicateName):
            register_in_process("double", lambda p: p)
        assert execute(ExecutorSpec("in_process", callable_name="double"), {"x": 21}).output == {"x": 42}
    finally:
        unregister_in_process("double")
    with pytest.raises(UnknownCallable):
        execute(ExecutorSpec("in_process", callable_name="double"), {"x": 1})
    assert issubclass(UnknownCallable, SpawnError)


def test_in_process_bad_output():
    register_in_process("bad", lambda p: {"x": object()})
    try:
        with pytest.raises(OutputUnparseable):
            execute(ExecutorSpec("in_process", callable_name="bad"), {})
    finally:
        unregister_in_process("bad")


def test_spec_needs_matching_fields():
    with pytest.raises(ValueError):
        ExecutorSpec("subprocess")
    with pytest.raises(ValueError):
        ExecutorSpec("simulated", behavior=SimBehavior("echo"), binary_path="/bin/true")


def test_subprocess_echo():
    r = execute(stub(), {"block_num": 3, "task_id": "t"})
    assert r.output == {"block_num": 3, "task_id": "t", "proved": True}


def test_in_process_and_subprocess_agree():
    register_in_process("stub_equiv", lambda p: {**p, "proved": True})
    try:
        payloads = [{"block_num": i, "task_id": f"t{i}", "nested": {"a": [1, 2.5, None, "s"]}} for i in range(3)]
        for p in payloads:
            a = execute(ExecutorSpec("in_process", callable_name="stub_equiv"), p).output
            b = execute(stub(), p).output
            c = execute(ExecutorSpec.echo(), p).output
            assert a == b == c
    finally:
        unregister_in_process("stub_equiv")


def test_subprocess_failures():
    with pytest.raises(NonZeroExit) as ei:
        execute(stub("--fail", "3"), {"task_id": "t"})
    assert ei.value.code == 3 and "failing" in ei.value.stderr
    assert os.path.isdir(ei.value.workdir)
    with pytest.raises(OutputMissing):
        execute(stub("--no-output"), {})
    with pytest.raises(OutputUnparseable):
        execute(stub("--garbage"), {})
    with pytest.raises(SpawnError):
        execute(ExecutorSpec("subprocess", binary_path="/nonexistent/prover"), {})


def test_try_execute_reports_failure():
    r = Executor(stub("--fail", "2")).try_execute({})
    assert not r.ok and r.exit_status.code == 2


def test_subprocess_timeout_and_cancel():
    with pytest.raises(Timeout):
        execute(stub("--sleep", "5", timeout=0.3), {})
    cancel = threading.Event()
    threading.Timer(0.3, cancel.set).start()
    t0 = time.monotonic()
    with pytest.raises(Cancelled):
        Executor(stub("--sleep", "5")).execute({}, cancel=cancel)
    assert time.monotonic() - t0 < 2


def test_heartbeat_hook_ticks():
    beats = []
    execute(ExecutorSpec.sleep(0.35, heartbeat_interval=0.1), {}, heartbeat_hook=lambda: beats.append(1))
    assert 2 <= len(beats) <= 4


def test_simulated_timeout():
    with pytest.raises(Timeout):
        execute(ExecutorSpec.sleep(1.0, timeout=0.1), {})
