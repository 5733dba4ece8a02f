"""Local socket front-end so consumers can live in separate OS processes.

Frames are ``[u32 length][u8 opcode][body]`` where ``length`` counts the
opcode byte plus the body and the body is a JSON document.  Responses use the
same framing with a status byte in place of the opcode (0 ok, 1 error).

A dropped connection unsubscribes that connection's consumers; their leases
are left to expire so the sweep redelivers them, exactly as if the process
had been killed while holding work.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any

from push0.bus import core
from push0.bus.log import CorruptLog
from push0.model import MissingField, TaskEnvelope

logger = logging.getLogger(__name__)

FRAME = struct.Struct(">IB")
MAX_FRAME = 64 << 20

OP_PING = 0
OP_PUBLISH = 1
OP_SUBSCRIBE = 2
OP_NEXT = 3
OP_ACK = 4
OP_NAK = 5
OP_HEARTBEAT = 6
OP_STATE = 7
OP_UNSUBSCRIBE = 8
OP_DECLARE = 9

STATUS_OK = 0
STATUS_ERROR = 1

_ERRORS: dict[str, type[Exception]] = {
    cls.__name__: cls
    for cls in (
        core.QueueNotFound, core.PayloadTooLarge, core.Closed, core.WouldBlock,
        core.Paused, core.NotInflight, core.BusError, CorruptLog,
    )
}
_ERRORS["MissingField"] = MissingField


class ProtocolError(Exception):
    pass


def send_frame(sock: socket.socket, code: int, body: Any) -> None:
    data = json.dumps(body, separators=(",", ":")).encode()
    sock.sendall(FRAME.pack(len(data) + 1, code) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, Any]:
    length, code = FRAME.unpack(_recv_exact(sock, FRAME.size))
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = _recv_exact(sock, length - 1)
    return code, json.loads(body) if body else None


class _Handler(socketserver.BaseRequestHandler):
    server: "BusServer"

    def setup(self):
        self.handles: dict[int, core.ConsumerHandle] = {}
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def handle(self):
        bus = self.server.bus
        while True:
            try:
                op, body = recv_frame(self.request)
            except (ConnectionError, OSError, ProtocolError):
                return
            try:
                result = self._dispatch(bus, op, body or {})
            except Exception as exc:
                reply = (STATUS_ERROR, {"type": type(exc).__name__, "message": str(exc)})
            else:
                reply = (STATUS_OK, result)
            try:
                send_frame(self.request, *reply)
            except OSError:
                return

    def _dispatch(self, bus: core.Bus, op: int, body: dict) -> Any:
        if op == OP_PING:
            return "pong"
        if op == OP_PUBLISH:
            return bus.publish(
                body["queue"], body["payload"], body.get("headers"),
                trace_context=body.get("trace_context"),
                block=body.get("block", True), timeout=body.get("timeout"),
                producer=body.get("producer"),
            )
        if op == OP_SUBSCRIBE:
            h = bus.subscribe(
                body["queue"], body.get("worker_group"),
                partition_filter=body.get("partition_filter"),
                max_inflight=body.get("max_inflight", 1),
            )
            self.handles[h.consumer_id] = h
            return h.consumer_id
        if op == OP_NEXT:
            got = bus.next_any([self._handle(c) for c in body["consumers"]], timeout=body.get("timeout"))
            if got is None:
                return None
            return {"consumer": got[0].consumer_id, "envelope": got[1].to_dict()}
        if op == OP_ACK:
            return bus.ack(self._handle(body["consumer"]), body["message_id"])
        if op == OP_NAK:
            return bus.nak(self._handle(body["consumer"]), body["message_id"], body.get("delay", 0.0))
        if op == OP_HEARTBEAT:
            return bus.heartbeat(self._handle(body["consumer"]), body["message_id"])
        if op == OP_STATE:
            return bus.stream_state(body["queue"]).as_dict()
        if op == OP_UNSUBSCRIBE:
            h = self.handles.pop(body["consumer"], None)
            if h is not None:
                bus.unsubscribe(h)
            return None
        if op == OP_DECLARE:
            return bus.declare_queue(core.QueueConfig(**body)).to_dict()
        raise ProtocolError(f"unknown opcode {op}")

    def _handle(self, consumer_id: int) -> core.ConsumerHandle:
        h = self.handles.get(consumer_id)
        if h is None:
            raise core.NotInflight(f"unknown consumer {consumer_id} on this connection")
        return h

    def finish(self):
        for h in self.handles.values():
            try:
                self.server.bus.unsubscribe(h)
            except Exception:
                logger.exception("unsubscribe on disconnect failed")
        self.handles.clear()


class BusServer(socketserver.ThreadingTCPServer):
    """Serves one :class:`~push0.bus.core.Bus` on a local TCP port."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bus: core.Bus, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.bus = bus
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "BusServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.1},
                                        name="bus-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class RemoteHandle:
    def __init__(self, consumer_id: int, queue: str, worker_group: str):
        self.consumer_id = consumer_id
        self.queue = queue
        self.worker_group = worker_group


class RemoteBus:
    """Client with the same method surface as :class:`~push0.bus.core.Bus` for consumers."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._closed = False

    @classmethod
    def from_address(cls, address: str) -> "RemoteBus":
        host, _, port = address.rpartition(":")
        return cls(host or "127.0.0.1", int(port))

    def _call(self, op: int, body: Any) -> Any:
        with self._lock:
            if self._closed:
                raise core.Closed("remote bus connection closed")
            try:
                send_frame(self._sock, op, body)
                status, reply = recv_frame(self._sock)
            except (ConnectionError, OSError) as exc:
                self._closed = True
                raise core.Closed(f"lost connection to bus: {exc}") from exc
        if status == STATUS_OK:
            return reply
        raise _ERRORS.get(reply.get("type"), core.BusError)(reply.get("message"))

    def ping(self) -> str:
        return self._call(OP_PING, None)

    def declare_queue(self, config: core.QueueConfig) -> core.QueueConfig:
        return core.QueueConfig(**self._call(OP_DECLARE, config.to_dict()))

    def publish(self, queue, payload, headers=None, *, trace_context=None, block=True, timeout=None, producer=None):
        return self._call(OP_PUBLISH, {
            "queue": queue, "payload": payload, "headers": headers or {},
            "trace_context": trace_context, "block": block, "timeout": timeout, "producer": producer,
        })

    def subscribe(self, queue, worker_group=None, *, partition_filter=None, max_inflight=1, accept=None):
        if accept is not None:
            raise ValueError("accept predicates cannot cross the socket")
        cid = self._call(OP_SUBSCRIBE, {
            "queue": queue, "worker_group": worker_group,
            "partition_filter": sorted(partition_filter) if partition_filter is not None else None,
            "max_inflight": max_inflight,
        })
        return RemoteHandle(cid, queue, worker_group or queue)

    def next_any(self, handles, timeout=None, start=0):
        order = handles[start % len(handles):] + handles[: start % len(handles)]
        reply = self._call(OP_NEXT, {"consumers": [h.consumer_id for h in order], "timeout": timeout})
        if reply is None:
            return None
        h = next(x for x in handles if x.consumer_id == reply["consumer"])
        return h, TaskEnvelope.from_dict(reply["envelope"])

    def next(self, handle, timeout=None):
        got = self.next_any([handle], timeout)
        return None if got is None else got[1]

    def ack(self, handle, message_id):
        self._call(OP_ACK, {"consumer": handle.consumer_id, "message_id": message_id})

    def nak(self, handle, message_id, delay=0.0):
        self._call(OP_NAK, {"consumer": handle.consumer_id, "message_id": message_id, "delay": delay})

    def heartbeat(self, handle, message_id):
        self._call(OP_HEARTBEAT, {"consumer": handle.consumer_id, "message_id": message_id})

    def unsubscribe(self, handle):
        self._call(OP_UNSUBSCRIBE, {"consumer": handle.consumer_id})

    def stream_state(self, queue) -> core.QueueState:
        return core.QueueState(**self._call(OP_STATE, {"queue": queue}))

    def close(self) -> None:
        with self._lock:
            self._closed = True
            try:
                self._sock.close()
            except OSError:
                pass
