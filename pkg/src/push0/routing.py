"""Partition-affine routing of aggregation groups to collectors."""

from __future__ import annotations

from dataclasses import dataclass


def partition_of(group_key: int, num_collectors: int) -> int:
    """Partition for ``group_key`` among ``num_collectors``.

    Group keys are already integers (block numbers pass through unchanged,
    other identifiers were hashed by ``extract_group_key``), so routing is a
    plain modulus.
    """
    if num_collectors < 1:
        raise ValueError(f"num_collectors must be >= 1, got {num_collectors}")
    return group_key % num_collectors


class InvalidTarget(ValueError):
    pass


@dataclass(frozen=True)
class PartitionAssignment:
    """Which of the ``num_partitions`` original partitions each live collector reads."""

    num_partitions: int
    active_collectors: int

    def __post_init__(self):
        if self.num_partitions < 1:
            raise InvalidTarget("num_partitions must be >= 1")
        if not 1 <= self.active_collectors <= self.num_partitions:
            raise InvalidTarget(
                f"active_collectors must be in [1, {self.num_partitions}], got {self.active_collectors}"
            )

    def owned(self, index: int) -> frozenset[int]:
        if not 0 <= index < self.active_collectors:
            raise IndexError(f"collector {index} is not active under {self}")
        return frozenset(j for j in range(self.num_partitions) if j % self.active_collectors == index)

    def owner(self, partition: int) -> int:
        return partition % self.active_collectors

    def as_map(self) -> dict[int, frozenset[int]]:
        return {i: self.owned(i) for i in range(self.active_collectors)}


def rebalance(assignment: PartitionAssignment, target: int) -> PartitionAssignment:
    """Scale the active collector count down to ``target``, keeping every partition owned.

    ``target`` must divide the current active count.  Otherwise a group parked
    in an orphaned partition and the same group's new messages can land on
    different collectors (4 -> 3: group 7 sits in P3, owned by c0, but now
    routes to P1, owned by c1).
    """
    if target < 1:
        raise InvalidTarget(f"cannot scale to {target} collectors")
    if target > assignment.active_collectors:
        raise InvalidTarget(
            f"scale-up from {assignment.active_collectors} to {target} is not a takeover"
        )
    if assignment.active_collectors % target:
        raise InvalidTarget(
            f"{target} does not divide {assignment.active_collectors}; routing would split groups"
        )
    return PartitionAssignment(assignment.num_partitions, target)
