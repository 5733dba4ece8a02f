"""Barrier-synchronizing collectors and partition-affine routing."""

from push0.collector.core import (
    Collector,
    CollectorConfig,
    CollectorStats,
    DrainReport,
    Emission,
    route_for,
)
from push0.collector.strategies import (
    STRATEGIES,
    BufferEntry,
    CollectorOperation,
    Finished,
    InProgress,
    MatchStrategy,
    Member,
    OrderedCommitStrategy,
    Postpone,
    SequentialStrategy,
    Skip,
    Strategy,
    StrategySpec,
    fragmentation_probability,
    register_strategy,
)
from push0.routing import InvalidTarget, PartitionAssignment, partition_of, rebalance

__all__ = [
    "STRATEGIES",
    "BufferEntry",
    "Collector",
    "CollectorConfig",
    "CollectorOperation",
    "CollectorStats",
    "DrainReport",
    "Emission",
    "Finished",
    "InProgress",
    "InvalidTarget",
    "MatchStrategy",
    "Member",
    "OrderedCommitStrategy",
    "PartitionAssignment",
    "Postpone",
    "SequentialStrategy",
    "Skip",
    "Strategy",
    "StrategySpec",
    "fragmentation_probability",
    "partition_of",
    "rebalance",
    "register_strategy",
    "route_for",
]
