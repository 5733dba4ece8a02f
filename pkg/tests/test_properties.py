import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from push0.harness.properties import continuity_case, locality_case, starvation_case
from push0.routing import InvalidTarget, PartitionAssignment, rebalance

seeds = st.integers(min_value=0, max_value=2**32 - 1)
thorough = settings(max_examples=1000, deadline=None)


@thorough
@given(seeds)
def test_no_starvation(seed):
    r = starvation_case(seed)
    assert r.ok, r.detail


@thorough
@given(seeds)
def test_partition_locality(seed):
    r = locality_case(seed)
    assert r.ok, r.detail


@thorough
@given(seeds, st.sampled_from([(4, 2), (6, 3), (8, 2), (3, 1)]))
def test_barrier_continuity_on_scale_down(seed, sizes):
    r = continuity_case(seed, *sizes)
    assert r.ok, r.detail


def test_non_divisor_scale_down_refused():
    with pytest.raises(InvalidTarget):
        rebalance(PartitionAssignment(4, 4), 3)
