import pytest
from hypothesis import given
from hypothesis import strategies as st

from push0.routing import InvalidTarget, PartitionAssignment, partition_of, rebalance


def test_partition_examples():
    assert partition_of(7, 4) == 3
    assert partition_of(8, 4) == 0


def test_partition_rejects_zero_collectors():
    with pytest.raises(ValueError):
        partition_of(1, 0)


def test_sequential_blocks_balance():
    loads = [0] * 4
    for b in range(100):
        loads[partition_of(b, 4)] += 1
    assert loads == [25, 25, 25, 25]


@given(st.integers(0, 10_000), st.integers(1, 64))
def test_load_imbalance_at_most_one(blocks, c):
    loads = [0] * c
    for b in range(blocks):
        loads[partition_of(b, c)] += 1
    assert max(loads) - min(loads) <= 1


def test_takeover_four_to_two():
    new = rebalance(PartitionAssignment(4, 4), 2)
    assert new.owned(0) == {0, 2}
    assert new.owned(1) == {1, 3}


def test_routing_continuity_worked_instance():
    new = rebalance(PartitionAssignment(4, 4), 2)
    assert partition_of(7, 4) == 3
    assert partition_of(7, 2) == 1
    assert new.owner(3) == 1


@given(st.integers(1, 32), st.data())
def test_continuity_for_divisor_targets(c, data):
    divisors = [d for d in range(1, c + 1) if c % d == 0]
    target = data.draw(st.sampled_from(divisors))
    new = rebalance(PartitionAssignment(c, c), target)
    # Every partition is owned by exactly one survivor.
    owned = [p for i in range(target) for p in new.owned(i)]
    assert sorted(owned) == list(range(c))
    g = data.draw(st.integers(0, 10**9))
    # The owner of the group's old partition is the collector its new partition names.
    assert new.owner(partition_of(g, c)) == partition_of(g, target)


@pytest.mark.parametrize("target", [0, 3, 5])
def test_rebalance_rejects(target):
    with pytest.raises(InvalidTarget):
        rebalance(PartitionAssignment(4, 4), target)


def test_assignment_bounds():
    with pytest.raises(InvalidTarget):
        PartitionAssignment(4, 5)
    with pytest.raises(IndexError):
        PartitionAssignment(4, 2).owned(2)
    assert PartitionAssignment(4, 2).as_map() == {0: {0, 2}, 1: {1, 3}}
