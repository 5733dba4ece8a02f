"""Append-only record files backing durable queues.

Each record is ``[u32 length | u32 crc32 | u8 kind | body]`` (big-endian), where
``length`` is the body size and the CRC covers the kind byte and the body.  A
torn final record (short header, short body, or a bad CRC on the last record
in the file) is truncated and reported; a bad record followed by valid data is
corruption and refuses to load.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">IIB")

KIND_PUBLISH = 1
KIND_ACK = 2
KIND_DLQ = 3
KIND_GROUP = 4
KIND_REDELIVER = 5


class CorruptLog(Exception):
    pass


def encode_record(kind: int, body: bytes) -> bytes:
    crc = zlib.crc32(bytes([kind]) + body)
    return HEADER.pack(len(body), crc, kind) + body


@dataclass
class ReplayResult:
    records: list[tuple[int, bytes]] = field(default_factory=list)
    valid_bytes: int = 0
    discarded_bytes: int = 0


def scan(data: bytes) -> ReplayResult:
    """Split ``data`` into records, stopping at a torn tail."""
    out = ReplayResult()
    pos = 0
    end = len(data)
    while pos < end:
        if end - pos < HEADER.size:
            break
        length, crc, kind = HEADER.unpack_from(data, pos)
        body_start = pos + HEADER.size
        body_end = body_start + length
        if body_end > end:
            break
        body = data[body_start:body_end]
        if zlib.crc32(bytes([kind]) + body) != crc:
            if body_end == end:
                break
            raise CorruptLog(f"checksum mismatch in record at byte {pos}")
        out.records.append((kind, body))
        pos = body_end
    out.valid_bytes = pos
    out.discarded_bytes = end - pos
    return out


class RecordFile:
    """One append-only record file with optional fsync on append."""

    def __init__(self, path: Path, sync_every: int = 1):
        self.path = Path(path)
        self.sync_every = max(1, sync_every)
        self._pending = 0
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.replayed = self._load()
        self._fh = open(self.path, "ab")

    def _load(self) -> ReplayResult:
        if not self.path.exists():
            return ReplayResult()
        data = self.path.read_bytes()
        result = scan(data)
        if result.discarded_bytes:
            logger.warning(
                "%s: discarding torn tail of %d bytes after %d valid records",
                self.path, result.discarded_bytes, len(result.records),
            )
            with open(self.path, "r+b") as fh:
                fh.truncate(result.valid_bytes)
                fh.flush()
                os.fsync(fh.fileno())
        return result

    def append(self, kind: int, body: bytes, sync: bool | None = None) -> None:
        rec = encode_record(kind, body)
        with self._lock:
            self._fh.write(rec)
            self._fh.flush()
            self._pending += 1
            if sync or (sync is None and self._pending >= self.sync_every):
                os.fsync(self._fh.fileno())
                self._pending = 0

    def sync(self) -> None:
        with self._lock:
            if self._pending and not self._fh.closed:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._pending = 0

    def close(self) -> None:
        self.sync()
        with self._lock:
            self._fh.close()
