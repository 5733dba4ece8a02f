"""Shared message types and payload conventions.

A payload is a plain ``dict`` with string keys whose values are JSON-native
(ints, strings, booleans, nested dicts, lists).  By convention it carries
``block_num`` and ``task_id``.  Everything that crosses the bus is encoded with
:func:`encode_payload`, which sorts keys so that hashes and golden files are
deterministic.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple

Payload = dict[str, Any]

# Lets retry_rank stay non-negative while higher retry counts sort first.
RETRY_RANK_CEILING = 2**31 - 1


class MissingField(KeyError):
    """The configured grouping/priority field is absent from a payload."""

    def __init__(self, field_name: str):
        super().__init__(field_name)
        self.field_name = field_name

    def __str__(self) -> str:
        return f"payload has no field {self.field_name!r}"


class PayloadError(ValueError):
    """A payload cannot be represented in the canonical document format."""


def _check_value(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, int, float, str)):
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise PayloadError(f"{path}: non-string key {k!r}")
            _check_value(v, f"{path}.{k}")
        return
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_value(v, f"{path}[{i}]")
        return
    raise PayloadError(f"{path}: unsupported value type {type(value).__name__}")


def validate_payload(payload: Payload) -> Payload:
    if not isinstance(payload, dict):
        raise PayloadError(f"payload must be a mapping, got {type(payload).__name__}")
    _check_value(payload, "$")
    bn = payload.get("block_num")
    if "block_num" in payload and (isinstance(bn, bool) or not isinstance(bn, int) or bn < 0):
        raise PayloadError(f"block_num must be a non-negative integer, got {bn!r}")
    return payload


def encode_payload(payload: Payload) -> bytes:
    """Canonical UTF-8 document for a payload (sorted keys, compact separators)."""
    validate_payload(payload)
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_payload(data: bytes | str) -> Payload:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise PayloadError(f"not a payload document: {exc}") from exc
    return validate_payload(obj)


def stable_hash64(identifier: str) -> int:
    """Platform-independent 64-bit hash (BLAKE2b, 8-byte digest, big-endian)."""
    digest = hashlib.blake2b(identifier.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def extract_group_key(payload: Payload, field_name: str) -> int:
    """Read the grouping key named ``field_name`` from ``payload``.

    Non-negative integers are returned as-is; strings map through
    :func:`stable_hash64`.  Anything else is an error rather than a default.
    """
    if not field_name:
        raise ValueError("grouping field name must be non-empty")
    try:
        value = payload[field_name]
    except KeyError:
        raise MissingField(field_name) from None
    if isinstance(value, bool):
        raise TypeError(f"{field_name}={value!r} is a boolean, not a group identifier")
    if isinstance(value, int):
        if value < 0:
            raise TypeError(f"{field_name}={value!r} is negative")
        return value
    if isinstance(value, str) and value:
        return stable_hash64(value)
    raise TypeError(f"{field_name}={value!r} cannot be used as a group key")


class PriorityKey(NamedTuple):
    """Dequeue order: lowest block first, then most-retried, then oldest."""

    block_num: int
    retry_rank: int
    enqueue_time: int

    @classmethod
    def build(cls, block_num: int, retry_count: int, enqueue_time: int) -> "PriorityKey":
        return cls(block_num, RETRY_RANK_CEILING - min(retry_count, RETRY_RANK_CEILING), enqueue_time)

    @property
    def retry_count(self) -> int:
        return RETRY_RANK_CEILING - self.retry_rank


@dataclass(frozen=True)
class TaskEnvelope:
    message_id: int
    payload: Payload
    retry_count: int = 0
    enqueue_time: int = field(default_factory=time.time_ns)
    trace_context: str | None = None
    headers: dict[str, str] = field(default_factory=dict)
    queue: str = ""
    partition: int = 0

    def with_retry(self, retry_count: int) -> "TaskEnvelope":
        return replace(self, retry_count=retry_count)

    def to_dict(self) -> dict[str, Any]:
        return {
            "message_id": self.message_id,
            "payload": self.payload,
            "retry_count": self.retry_count,
            "enqueue_time": self.enqueue_time,
            "trace_context": self.trace_context,
            "headers": dict(self.headers),
            "queue": self.queue,
            "partition": self.partition,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskEnvelope":
        return cls(
            message_id=int(d["message_id"]),
            payload=d["payload"],
            retry_count=int(d.get("retry_count", 0)),
            enqueue_time=int(d["enqueue_time"]),
            trace_context=d.get("trace_context"),
            headers=dict(d.get("headers") or {}),
            queue=d.get("queue", ""),
            partition=int(d.get("partition", 0)),
        )


def priority_key(envelope: TaskEnvelope, grouping_field: str) -> PriorityKey:
    block = extract_group_key(envelope.payload, grouping_field)
    return PriorityKey.build(block, envelope.retry_count, envelope.enqueue_time)
