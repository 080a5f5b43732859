"""Workers and transports.

A worker owns an object store (ObjectId -> serialized chain bytes), a seeded
RNG and a command executor. Virtual workers live in a process-local registry;
socket workers serve the same operations over TCP with the FTNS framing. Both
expose one handle interface (store / fetch / delete / execute) so the leader
code is transport-agnostic.

Object ids: the leader allocates session ids below 2**32; each worker
allocates internal ids above a name-derived base so the two ranges never
collide across parties.
"""

from __future__ import annotations

import itertools
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .commands import lookup
from .errors import (
    BindError,
    DuplicateObject,
    KindMismatch,
    MalformedPayload,
    ObjectNotFound,
    TransportError,
    WorkerUnknown,
)
from .protocol import Command, Message

LEADER_ID_SPAN = 1 << 32


def _validate_name(name: str):
    raw = name.encode("utf-8")
    if not 0 < len(raw) <= 64:
        raise WorkerUnknown(f"invalid worker name {name!r}")


def worker_rng(seed: int, name: str) -> np.random.Generator:
    """Per-worker stream: independent of the leader's streams, stable across
    transports so virtual and socket runs stay bit-identical."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


# ---------------------------------------------------------------------------
# transport tap

@dataclass
class TapEvent:
    op: str  # store | fetch | delete | execute
    worker: str
    oid: int
    nbytes: int
    shapes: tuple = ()


class TransportTap:
    """Observes every leader-side protocol message plus protocol-level
    opening events; tests assert communication patterns against it."""

    def __init__(self):
        self.events: list[TapEvent] = []
        self.openings = 0

    def record(self, op: str, worker: str, oid: int = 0, chain_bytes: bytes = b""):
        shapes = ()
        if chain_bytes:
            try:
                nodes = protocol.deserialize_chain(chain_bytes)
                shapes = tuple(n[1].shape for n in nodes if n[0] == "local")
            except Exception:
                pass
        self.events.append(TapEvent(op, worker, oid, len(chain_bytes), shapes))

    def note_opening(self, count: int = 1):
        self.openings += count

    def count(self, op: str) -> int:
        return sum(1 for e in self.events if e.op == op)

    @property
    def messages(self) -> int:
        return len(self.events)

    def transferred_shapes(self):
        """Shapes of every tensor that crossed the leader's transport."""
        out = []
        for e in self.events:
            out.extend(e.shapes)
        return out


# ---------------------------------------------------------------------------
# worker core (shared by virtual and socket servers)

class _PeerPush:
    """Minimal peer view used by worker-side commands: store only."""

    def __init__(self, store_fn):
        self._store_fn = store_fn

    def store(self, oid: int, payload: bytes):
        self._store_fn(oid, payload)


class WorkerCore:
    """One worker: object store, RNG, id allocator and command executor."""

    def __init__(self, name: str, seed: int, peers: dict | None = None):
        _validate_name(name)
        self.name = name
        self.seed = seed
        self.rng = worker_rng(seed, name)
        self._objects: dict[int, bytes] = {}
        self._lock = threading.RLock()
        base = (1 + (zlib.crc32(name.encode("utf-8")) & 0xFFFF)) << 32
        self._counter = itertools.count(base)
        self.peers = dict(peers or {})

    # -- store ----------------------------------------------------------
    def store_object(self, oid: int, payload: bytes):
        with self._lock:
            if oid in self._objects:
                raise DuplicateObject(f"object {oid} already stored on {self.name}")
            self._objects[oid] = bytes(payload)

    def fetch_object(self, oid: int, delete: bool = False) -> bytes:
        with self._lock:
            if oid not in self._objects:
                raise ObjectNotFound(f"object {oid} not on {self.name}")
            if delete:
                return self._objects.pop(oid)
            return self._objects[oid]

    def delete_object(self, oid: int):
        with self._lock:
            if oid not in self._objects:
                raise ObjectNotFound(f"object {oid} not on {self.name}")
            del self._objects[oid]

    def object_count(self) -> int:
        with self._lock:
            return len(self._objects)

    # -- command context --------------------------------------------------
    def allocate_id(self) -> int:
        return next(self._counter)

    def peer(self, name: str):
        if name == self.name:
            return _PeerPush(self.store_object)
        if name not in self.peers:
            raise WorkerUnknown(f"{self.name} has no peer {name!r}")
        return self.peers[name]

    # -- execution --------------------------------------------------------
    def _resolve(self, oid: int):
        nodes = protocol.deserialize_chain(self.fetch_object(oid))
        frac_bits = None
        for node in nodes:
            if node[0] == "fixed_precision":
                frac_bits = node[1]
        tail = nodes[-1]
        if tail[0] != "local":
            raise KindMismatch(f"object {oid} on {self.name} has no local payload")
        return tail[1], frac_bits

    def execute(self, cmd: Command) -> int:
        fn, preserve = lookup(cmd.name)
        resolved = []
        first_frac = None
        for tag, val in cmd.args:
            if tag == "obj":
                t, frac = self._resolve(val)
                if first_frac is None and frac is not None and not resolved:
                    first_frac = frac
                resolved.append(t)
            else:
                resolved.append(val)
        result = fn(self, tuple(resolved), cmd.kwargs)
        nodes = []
        if preserve and first_frac is not None:
            nodes.append(("fixed_precision", first_frac))
        nodes.append(("local", result))
        oid = self.allocate_id()
        self.store_object(oid, protocol.serialize_chain(nodes))
        return oid


# ---------------------------------------------------------------------------
# virtual transport

class VirtualRegistry:
    """Process-local worker registry; virtual workers resolve peers here."""

    def __init__(self):
        self.workers: dict[str, WorkerCore] = {}

    def create(self, name: str, seed: int) -> WorkerCore:
        if name in self.workers:
            raise DuplicateObject(f"worker {name!r} already registered")
        w = WorkerCore(name, seed)
        w.peers = _RegistryPeers(self, name)
        self.workers[name] = w
        return w

    def get(self, name: str) -> WorkerCore:
        if name not in self.workers:
            raise WorkerUnknown(name)
        return self.workers[name]

    def handle(self, name: str, tap: TransportTap | None = None) -> "VirtualHandle":
        return VirtualHandle(self.get(name), tap)


class _RegistryPeers:
    """Lazy peer map over a registry (workers may be created in any order)."""

    def __init__(self, registry: VirtualRegistry, owner: str):
        self._registry = registry
        self._owner = owner

    def __contains__(self, name):
        return name != self._owner and name in self._registry.workers

    def __getitem__(self, name):
        return _PeerPush(self._registry.get(name).store_object)


class VirtualHandle:
    """Leader-side handle over an in-process worker."""

    def __init__(self, core: WorkerCore, tap: TransportTap | None = None):
        self.core = core
        self.tap = tap

    @property
    def name(self) -> str:
        return self.core.name

    def store(self, oid: int, payload: bytes):
        if self.tap is not None:
            self.tap.record("store", self.name, oid, payload)
        self.core.store_object(oid, payload)

    def fetch(self, oid: int, delete: bool = False) -> bytes:
        payload = self.core.fetch_object(oid, delete)
        if self.tap is not None:
            self.tap.record("fetch", self.name, oid, payload)
        return payload

    def delete(self, oid: int):
        if self.tap is not None:
            self.tap.record("delete", self.name, oid)
        self.core.delete_object(oid)

    def execute(self, cmd: Command) -> int:
        if self.tap is not None:
            self.tap.record("execute", self.name)
        return self.core.execute(cmd)

    def close(self):
        pass


# ---------------------------------------------------------------------------
# socket transport

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("peer closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> Message:
    head = _recv_exact(sock, protocol.HEADER_LEN)
    if head[:4] != protocol.MAGIC:
        raise MalformedPayload("bad magic")
    version, msg_type, request_id, payload_len = struct.unpack("<BBQQ", head[4:])
    if version != protocol.VERSION:
        raise MalformedPayload(f"unsupported version {version}")
    payload = _recv_exact(sock, payload_len) if payload_len else b""
    msg, _ = protocol.decode_frame(head + payload)
    return msg


class SocketClient:
    """Persistent connection to one socket worker; one request in flight."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise TransportError(f"connect {host}:{port}: {e}") from None
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._req = itertools.count(1)
        self._lock = threading.Lock()

    def request(self, msg_type: int, payload: bytes) -> Message:
        rid = next(self._req)
        frame = protocol.encode_frame(Message(msg_type, rid, payload))
        with self._lock:
            try:
                self.sock.sendall(frame)
                reply = _read_frame(self.sock)
            except (OSError, ConnectionError) as e:
                raise TransportError(str(e)) from None
        if reply.request_id != rid:
            raise TransportError(f"reply id {reply.request_id} != request id {rid}")
        if reply.msg_type == protocol.MSG_ERROR:
            protocol.raise_error_payload(reply.payload)
        if reply.msg_type != protocol.MSG_RESULT:
            raise TransportError(f"unexpected reply type {reply.msg_type}")
        return reply

    def store(self, oid: int, payload: bytes):
        self.request(protocol.MSG_STORE, struct.pack("<Q", oid) + payload)

    def fetch(self, oid: int, delete: bool = False) -> bytes:
        reply = self.request(protocol.MSG_GET, struct.pack("<QB", oid, int(delete)))
        return reply.payload

    def delete(self, oid: int):
        self.request(protocol.MSG_DELETE, struct.pack("<Q", oid))

    def execute(self, cmd: Command) -> int:
        reply = self.request(protocol.MSG_EXECUTE, protocol.serialize_command(cmd))
        if len(reply.payload) != 8:
            raise TransportError("bad execute reply")
        return struct.unpack("<Q", reply.payload)[0]

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class SocketHandle:
    """Leader-side handle over a remote socket worker."""

    def __init__(self, name: str, host: str, port: int, tap: TransportTap | None = None):
        _validate_name(name)
        self.name = name
        self.client = SocketClient(host, port)
        self.tap = tap

    def store(self, oid: int, payload: bytes):
        if self.tap is not None:
            self.tap.record("store", self.name, oid, payload)
        self.client.store(oid, payload)

    def fetch(self, oid: int, delete: bool = False) -> bytes:
        payload = self.client.fetch(oid, delete)
        if self.tap is not None:
            self.tap.record("fetch", self.name, oid, payload)
        return payload

    def delete(self, oid: int):
        if self.tap is not None:
            self.tap.record("delete", self.name, oid)
        self.client.delete(oid)

    def execute(self, cmd: Command) -> int:
        if self.tap is not None:
            self.tap.record("execute", self.name)
        return self.client.execute(cmd)

    def close(self):
        self.client.close()


class _LazySocketPeer:
    """Deferred peer connection for worker-to-worker share pushes."""

    def __init__(self, host: str, port: int):
        self.host, self.port = host, port
        self._client = None
        self._lock = threading.Lock()

    def store(self, oid: int, payload: bytes):
        with self._lock:
            if self._client is None:
                self._client = SocketClient(self.host, self.port)
            self._client.store(oid, payload)


class _WorkerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _WorkerHandler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        core: WorkerCore = self.server.worker_core
        while True:
            try:
                head = _recv_exact(self.request, protocol.HEADER_LEN)
            except (ConnectionError, OSError):
                return
            if head[:4] != protocol.MAGIC:
                # reply in-band and keep the connection; the client resyncs
                # on the next well-formed frame
                self._reply(Message(protocol.MSG_ERROR, 0,
                                    protocol.encode_error(MalformedPayload("bad magic"))))
                continue
            version, msg_type, request_id, payload_len = struct.unpack("<BBQQ", head[4:])
            try:
                payload = _recv_exact(self.request, payload_len) if payload_len else b""
            except (ConnectionError, OSError):
                return
            try:
                msg, _ = protocol.decode_frame(head + payload)
                reply = self._dispatch(core, msg)
            except Exception as e:  # replied in-band, never crashes the server
                reply = Message(protocol.MSG_ERROR, request_id, protocol.encode_error(e))
            if not self._reply(reply):
                return

    def _reply(self, msg: Message) -> bool:
        try:
            self.request.sendall(protocol.encode_frame(msg))
            return True
        except (OSError, ConnectionError):
            return False

    @staticmethod
    def _dispatch(core: WorkerCore, msg: Message) -> Message:
        if msg.msg_type == protocol.MSG_STORE:
            if len(msg.payload) < 8:
                raise MalformedPayload("short store payload")
            (oid,) = struct.unpack_from("<Q", msg.payload)
            core.store_object(oid, msg.payload[8:])
            return Message(protocol.MSG_RESULT, msg.request_id)
        if msg.msg_type == protocol.MSG_GET:
            if len(msg.payload) != 9:
                raise MalformedPayload("bad get payload")
            oid, delete = struct.unpack("<QB", msg.payload)
            return Message(protocol.MSG_RESULT, msg.request_id,
                           core.fetch_object(oid, bool(delete)))
        if msg.msg_type == protocol.MSG_DELETE:
            if len(msg.payload) != 8:
                raise MalformedPayload("bad delete payload")
            (oid,) = struct.unpack("<Q", msg.payload)
            core.delete_object(oid)
            return Message(protocol.MSG_RESULT, msg.request_id)
        if msg.msg_type == protocol.MSG_EXECUTE:
            cmd = protocol.deserialize_command(msg.payload)
            oid = core.execute(cmd)
            return Message(protocol.MSG_RESULT, msg.request_id, struct.pack("<Q", oid))
        raise MalformedPayload(f"unserviceable msg_type {msg.msg_type}")


def make_server(host: str, port: int, core: WorkerCore) -> _WorkerServer:
    try:
        server = _WorkerServer((host, port), _WorkerHandler)
    except OSError as e:
        raise BindError(f"bind {host}:{port}: {e}") from None
    server.worker_core = core
    return server


def serve(host: str, port: int, core: WorkerCore):
    """Serve until interrupted; raises BindError if the port is taken."""
    with make_server(host, port, core) as server:
        server.serve_forever()


# ---------------------------------------------------------------------------
# federation: the leader's view of its workers

class Federation:
    """Named worker handles plus the leader-session id allocator."""

    def __init__(self, handles, tap: TransportTap | None = None):
        self.handles = {h.name: h for h in handles}
        self.tap = tap
        self._counter = itertools.count(1)

    @property
    def names(self):
        return list(self.handles)

    def worker(self, name: str):
        if name not in self.handles:
            raise WorkerUnknown(name)
        return self.handles[name]

    def allocate_id(self) -> int:
        oid = next(self._counter)
        if oid >= LEADER_ID_SPAN:
            raise MalformedPayload("leader session id space exhausted")
        return oid

    def close(self):
        for h in self.handles.values():
            h.close()


def virtual_federation(names, seed: int, tap: TransportTap | None = None):
    """Create a registry of virtual workers and a federation over them."""
    registry = VirtualRegistry()
    handles = [VirtualHandle(registry.create(n, seed), tap) for n in names]
    return Federation(handles, tap), registry


def socket_federation(endpoints: dict, tap: TransportTap | None = None) -> Federation:
    """endpoints: worker name -> (host, port) of running socket workers."""
    handles = [SocketHandle(name, host, port, tap) for name, (host, port) in endpoints.items()]
    return Federation(handles, tap)
