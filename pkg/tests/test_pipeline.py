import pytest

from push0.pipeline import (
    TOPOLOGIES,
    ParseError,
    ValidationError,
    builtin_topologies,
    env_key,
    launch,
    parse,
)

TWO_STAGE = """
[defaults]
ACK_WAIT = 5
[queue blocks]
PRIORITY_FIELD = block_num
[queue mid]
[queue done]
TERMINAL = true
[stage first]
INPUT_QUEUE: blocks
OUTPUT_QUEUE: mid
SIM_BEHAVIOR = echo
[stage second]
INPUT_QUEUE = mid
OUTPUT_QUEUE = done
SIM_BEHAVIOR = echo
"""


def test_parse_two_stage():
    spec = parse(TWO_STAGE, env={})
    assert [s.kind for s in spec.stages] == ["dispatcher", "dispatcher"]
    assert spec.stage("second").dispatcher.input_queue == "mid"
    assert spec.queue("blocks").ack_timeout == 5
    assert spec.terminal == {"done"}
    # Worker group defaults to the stage name.
    assert spec.stage("first").dispatcher.worker_group == "first"


def test_undeclared_queue_rejected():
    with pytest.raises(ValidationError):
        parse(TWO_STAGE.replace("OUTPUT_QUEUE = done", "OUTPUT_QUEUE = nowhere"), env={})


def test_bad_values_rejected():
    with pytest.raises(ParseError):
        parse(TWO_STAGE.replace("ACK_WAIT = 5", "ACK_WAIT = soon"), env={})
    with pytest.raises(ParseError):
        parse("[bogus]\nX=1\n", env={})
    with pytest.raises(ValidationError):
        parse(TWO_STAGE + "REPLICAS: 0\n", env={})


def test_env_override():
    assert env_key("prove-chunks", "replicas") == "PROVE_CHUNKS__REPLICAS"
    spec = parse(TWO_STAGE, env={"SECOND__REPLICAS": "3"})
    assert spec.stage("second").replicas == 3


def test_builtin_topologies_parse():
    specs = builtin_topologies()
    assert set(specs) == set(TOPOLOGIES) == set("abcde")
    c = specs["c"].stage("aggregate").collector
    assert c.num_inputs == 8 and c.collect_timeout == 1.0
    assert specs["c"].stage("prove_chunks").replicas == 8
    d = specs["d"].stage("C").collector
    assert d.input_queues == ["Q3", "Q5"] and d.num_inputs == 2
    e = specs["e"].stage("aggregate").collector
    assert e.input_queues == ["thin_proofs", "batches"]


def test_collector_inputs_get_partitioned_by_replicas():
    doc = TOPOLOGIES["c"].replace("NUM_INPUTS: 8", "NUM_INPUTS: 2\nREPLICAS: 3")
    q = parse(doc, env={}).queue("chunk_proofs")
    assert q.partitions == 3 and q.partition_field == "block_num"


def test_launch_two_stage_end_to_end():
    h = launch(parse(TWO_STAGE, env={}))
    try:
        assert len(h.dispatchers) == 2
        for b in range(5):
            h.publish("blocks", {"block_num": b})
        assert h.wait_idle(10)
        assert sorted(e.payload["block_num"] for e in h.bus.peek("done")) == list(range(5))
    finally:
        h.stop()


def test_replicas_get_indices():
    doc = TOPOLOGIES["c"].replace("NUM_INPUTS: 8", "NUM_INPUTS: 8\nREPLICAS: 4")
    h = launch(parse(doc, env={}))
    try:
        assert [c.config.collector_index for c in h.collectors["aggregate"]] == [0, 1, 2, 3]
    finally:
        h.stop(0.1)


def test_topology_c_aggregates_blocks():
    h = launch(parse(TOPOLOGIES["c"], env={}))
    try:
        for b in range(3):
            for j in range(8):
                h.publish("chunk_tasks", {"block_num": b, "task_id": f"{b}-{j}"})
        assert h.wait_idle(20)
        outs = h.bus.peek("block_proofs")
        assert sorted(o.payload["block_num"] for o in outs) == [0, 1, 2]
        assert all(len(o.payload["members"]) == 8 for o in outs)
    finally:
        h.stop()


def test_topology_d_matched_pair():
    h = launch(parse(TOPOLOGIES["d"], env={}))
    try:
        for b in range(4):
            h.publish("Q1", {"block_num": b, "task_id": f"t{b}"})
        assert h.wait_idle(20)
        outs = h.bus.peek("Q6")
        assert sorted(o.payload["block_num"] for o in outs) == [0, 1, 2, 3]
        assert all(len(o.payload["members"]) == 2 for o in outs)
    finally:
        h.stop()


def test_collector_scale_down_mid_run():
    doc = TOPOLOGIES["c"].replace("NUM_INPUTS: 8", "NUM_INPUTS: 2\nREPLICAS: 4")
    h = launch(parse(doc, env={}))
    try:
        for b in range(10):
            h.publish("chunk_tasks", {"block_num": b, "task_id": f"{b}-0"})
        result = h.scale("aggregate", 2)
        assert result["replicas"] == 2 and len(h.collectors["aggregate"]) == 2
        for b in range(10):
            h.publish("chunk_tasks", {"block_num": b, "task_id": f"{b}-1"})
        assert h.wait_idle(30)
        labels = [o.payload["block_num"] for o in h.bus.peek("block_proofs")]
        assert sorted(labels) == list(range(10))
    finally:
        h.stop()


def test_dispatcher_scale_and_idle_stop():
    h = launch(parse(TOPOLOGIES["a"], env={}))
    h.scale("prove", 3)
    assert len(h.dispatchers["prove"]) == 3
    h.scale("prove", 1)
    assert len(h.dispatchers["prove"]) == 1
    h.stop()
    h.stop()
