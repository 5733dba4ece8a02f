"""Embedded message bus and its socket front-end."""

from push0.bus.core import (
    Bus,
    BusError,
    Closed,
    ConsumerHandle,
    InflightRecord,
    NotInflight,
    Paused,
    PayloadTooLarge,
    QueueConfig,
    QueueNotFound,
    QueueState,
    WouldBlock,
    default_ack_wait,
)
from push0.bus.log import CorruptLog

__all__ = [
    "Bus",
    "BusError",
    "Closed",
    "ConsumerHandle",
    "CorruptLog",
    "InflightRecord",
    "NotInflight",
    "Paused",
    "PayloadTooLarge",
    "QueueConfig",
    "QueueNotFound",
    "QueueState",
    "WouldBlock",
    "default_ack_wait",
]
