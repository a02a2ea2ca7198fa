"""RPC transports.

Two backends share one interface:

``SimNetwork``
    In-process and deterministic. Every request is still encoded to a
    frame and decoded on the "server" side, but delivery is driven by a
    seeded scheduler. Threads started through :meth:`SimNetwork.spawn`
    run one at a time; whenever they block on a call the scheduler picks
    the next request to deliver uniformly at random among everything in
    flight, so a seed fixes the whole interleaving.

``TcpTransport`` / ``TcpServer``
    Real sockets. One connection per (transport, endpoint), requests
    multiplexed by request id, bounded in-flight count per connection.

Handlers are plain callables ``handler(opcode, payload) -> payload``.
Raising a :class:`~verblob.errors.StoreError` sends an error frame that is
re-raised with the same type on the caller.
"""

from __future__ import annotations

import itertools
import logging
import math
import random
import socket
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Optional, Union

from verblob.errors import (
    AddressInUse,
    ConnectionRefused,
    MalformedFrame,
    StoreError,
    Timeout,
    error_from_name,
)
from verblob.wire import (
    Endpoint,
    FrameDecoder,
    Message,
    Opcode,
    decode_error,
    decode_frame,
    encode_error,
    encode_frame,
)

log = logging.getLogger(__name__)

Handler = Callable[[int, bytes], bytes]
Result = Union[bytes, StoreError]

DEFAULT_TIMEOUT = 5.0
DEFAULT_CONN_IN_FLIGHT = 128


class Request(NamedTuple):
    endpoint: Endpoint
    opcode: int
    payload: bytes = b""


def respond(handler: Handler, msg: Message) -> Message:
    """Run one request through a handler and build the response frame."""
    if msg.opcode == Opcode.ECHO:
        return Message(Opcode.ECHO, msg.request_id, msg.payload)
    try:
        out = handler(msg.opcode, msg.payload)
    except StoreError as exc:
        return Message(Opcode.ERROR, msg.request_id, encode_error(exc))
    except Exception as exc:  # handler bug; the caller still gets an answer
        log.exception("handler failed on opcode %#x", msg.opcode)
        return Message(Opcode.ERROR, msg.request_id, encode_error(exc))
    return Message(msg.opcode, msg.request_id, out)


def result_of(msg: Message) -> Result:
    if msg.opcode == Opcode.ERROR:
        try:
            name, text = decode_error(msg.payload)
        except MalformedFrame as exc:
            return exc
        return error_from_name(name, text)
    return msg.payload


def unwrap(results: Iterable[Result]) -> list[bytes]:
    """Raise the first error in a call_many result list, else return payloads."""
    out = []
    for r in results:
        if isinstance(r, BaseException):
            raise r
        out.append(r)
    return out


class Transport:
    """Common client/server surface of both backends."""

    # upper bound on how long a server may hold a request open
    max_server_wait: float = math.inf

    def call_many(
        self, requests: Sequence[Request], *, window: Optional[int] = None, timeout: Optional[float] = None
    ) -> list[Result]:
        raise NotImplementedError

    def call(self, endpoint: Endpoint, opcode: int, payload: bytes = b"", timeout: Optional[float] = None) -> bytes:
        result = self.call_many([Request(endpoint, opcode, payload)], timeout=timeout)[0]
        if isinstance(result, BaseException):
            raise result
        return result

    def serve(self, endpoint: Endpoint, handler: Handler, blocking_opcodes: Iterable[int] = ()):
        raise NotImplementedError

    def clock(self) -> float:
        return time.monotonic()

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# in-process deterministic backend


class SimTask:
    def __init__(self, net: SimNetwork, fn: Callable, args: tuple, name: str) -> None:
        self.name = name
        self.result = None
        self.error: Optional[BaseException] = None
        self.done = False
        self._net = net
        self._fn = fn
        self._args = args
        self._wake = threading.Event()
        self._thread = threading.Thread(target=self._main, name=name, daemon=True)

    def _main(self) -> None:
        self._wake.wait()
        self._wake.clear()
        self._net._local.task = self
        try:
            self.result = self._fn(*self._args)
        except BaseException as exc:
            self.error = exc
        finally:
            self._net._task_finished(self)

    def __repr__(self) -> str:
        return f"SimTask({self.name!r}, done={self.done}, error={self.error!r})"


class _Batch:
    __slots__ = ("task", "results", "remaining")

    def __init__(self, task: SimTask, n: int) -> None:
        self.task = task
        self.results: list = [None] * n
        self.remaining = n


class _Delivery(NamedTuple):
    batch: Optional[_Batch]  # None marks a task start
    index: int
    request: Optional[Request]
    task: SimTask


class SimServer:
    def __init__(self, net: SimNetwork, endpoint: Endpoint) -> None:
        self._net = net
        self.endpoint = endpoint

    def close(self) -> None:
        self._net._servers.pop(self.endpoint, None)

    def __enter__(self) -> SimServer:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SimNetwork(Transport):
    """Seeded, single-stepping in-process network.

    Calls made from ordinary threads are delivered immediately (batch order
    still shuffled by the seed). Calls made from tasks created with
    :meth:`spawn` are queued and delivered by :meth:`run`.
    """

    max_server_wait = 0.0

    def __init__(self, seed: int = 0, *, drop_rate: float = 0.0, tick: float = 0.001) -> None:
        self.rng = random.Random(seed)
        self.drop_rate = drop_rate
        self.tick = tick
        self.trace: list[tuple[str, str, int]] = []
        self._now = 0.0
        self._servers: dict[Endpoint, Handler] = {}
        self._blocked: set[Endpoint] = set()
        self._ids = itertools.count(1)
        self._cv = threading.Condition()
        self._pending: list[_Delivery] = []
        self._tasks: list[SimTask] = []
        self._running = 0
        self._local = threading.local()
        self._deliver_lock = threading.RLock()

    def clock(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        self._now += seconds

    def serve(self, endpoint: Endpoint, handler: Handler, blocking_opcodes: Iterable[int] = ()) -> SimServer:
        if endpoint in self._servers:
            raise AddressInUse(f"{endpoint} already served")
        self._servers[endpoint] = handler
        return SimServer(self, endpoint)

    def block(self, endpoint: Endpoint) -> None:
        """Make an endpoint refuse connections until :meth:`unblock`."""
        self._blocked.add(endpoint)

    def unblock(self, endpoint: Endpoint) -> None:
        self._blocked.discard(endpoint)

    def _deliver(self, req: Request) -> Result:
        with self._deliver_lock:
            self._now += self.tick
            caller = getattr(self._local, "task", None)
            self.trace.append((caller.name if caller else "-", str(req.endpoint), int(req.opcode)))
            handler = self._servers.get(req.endpoint)
            if handler is None or req.endpoint in self._blocked:
                return ConnectionRefused(f"nothing listening on {req.endpoint}")
            if self.drop_rate and self.rng.random() < self.drop_rate:
                return Timeout(f"request to {req.endpoint} dropped")
            frame = encode_frame(Message(req.opcode, next(self._ids), req.payload))
        # handlers may call back into the network (nested, direct delivery)
        reply = respond(handler, decode_frame(frame))
        return result_of(decode_frame(encode_frame(reply)))

    def call_many(
        self, requests: Sequence[Request], *, window: Optional[int] = None, timeout: Optional[float] = None
    ) -> list[Result]:
        if not requests:
            return []
        task = getattr(self._local, "task", None)
        if task is None:
            order = list(range(len(requests)))
            with self._deliver_lock:
                self.rng.shuffle(order)
            results: list = [None] * len(requests)
            for i in order:
                results[i] = self._deliver(requests[i])
            return results
        batch = _Batch(task, len(requests))
        with self._cv:
            self._pending.extend(_Delivery(batch, i, r, task) for i, r in enumerate(requests))
            self._running -= 1
            self._cv.notify_all()
        task._wake.wait()
        task._wake.clear()
        return batch.results

    def spawn(self, fn: Callable, *args, name: Optional[str] = None) -> SimTask:
        task = SimTask(self, fn, args, name or f"task-{len(self._tasks)}")
        with self._cv:
            self._tasks.append(task)
            self._pending.append(_Delivery(None, 0, None, task))
        task._thread.start()
        return task

    def _task_finished(self, task: SimTask) -> None:
        with self._cv:
            task.done = True
            self._running -= 1
            self._cv.notify_all()

    def run(self, *, max_steps: Optional[int] = None, check: bool = True) -> list[SimTask]:
        """Deliver queued requests until every spawned task has finished."""
        steps = 0
        with self._cv:
            while True:
                self._cv.wait_for(lambda: self._running == 0)
                if all(t.done for t in self._tasks):
                    break
                if not self._pending:
                    raise RuntimeError("simulation deadlock: tasks blocked with nothing in flight")
                if max_steps is not None and steps >= max_steps:
                    raise RuntimeError(f"simulation exceeded {max_steps} steps")
                steps += 1
                item = self._pending.pop(self.rng.randrange(len(self._pending)))
                if item.batch is None:
                    self._running += 1
                    item.task._wake.set()
                    continue
                self._cv.release()
                try:
                    result = self._deliver(item.request)
                finally:
                    self._cv.acquire()
                batch = item.batch
                batch.results[item.index] = result
                batch.remaining -= 1
                if batch.remaining == 0:
                    self._running += 1
                    batch.task._wake.set()
            tasks, self._tasks = self._tasks, []
        if check:
            for t in tasks:
                if t.error is not None:
                    raise t.error
        return tasks


# ---------------------------------------------------------------------------
# TCP backend


def _send_all(sock: socket.socket, lock: threading.Lock, chunks: list[bytes]) -> None:
    data = b"".join(chunks)
    with lock:
        sock.sendall(data)


class TcpServer:
    """Threaded TCP server dispatching frames to a handler.

    Requests are answered inline by the connection's reader thread, except
    opcodes listed in ``blocking_opcodes`` which go to a worker pool so a
    long wait never stalls other requests on the same connection.
    """

    def __init__(
        self,
        endpoint: Endpoint,
        handler: Handler,
        blocking_opcodes: Iterable[int] = (),
        workers: int = 32,
    ) -> None:
        try:
            self._listener = socket.create_server((endpoint.host, endpoint.port), backlog=256)
        except OSError as exc:
            raise AddressInUse(f"cannot bind {endpoint}: {exc}") from exc
        self.endpoint = Endpoint(endpoint.host, self._listener.getsockname()[1])
        self._handler = handler
        self._blocking = frozenset(int(op) for op in blocking_opcodes)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"srv{self.endpoint.port}")
        self._conns: dict[socket.socket, threading.Thread] = {}
        self._lock = threading.Lock()
        self._closing = False
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"accept-{self.endpoint.port}", daemon=True)
        self._acceptor.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            with self._lock:
                if self._closing:
                    conn.close()
                    return
                self._conns[conn] = t
            t.start()

    def _serve_conn(self, conn: socket.socket) -> None:
        decoder = FrameDecoder()
        send_lock = threading.Lock()
        try:
            while True:
                data = conn.recv(1 << 20)
                if not data:
                    break
                try:
                    msgs = decoder.feed(data)
                except MalformedFrame:
                    log.warning("malformed frame from peer; dropping connection")
                    break
                out = []
                for msg in msgs:
                    if msg.opcode in self._blocking:
                        self._pool.submit(self._answer_later, conn, send_lock, msg)
                    else:
                        out.append(encode_frame(respond(self._handler, msg)))
                if out:
                    _send_all(conn, send_lock, out)
        except OSError:
            pass

    def _answer_later(self, conn: socket.socket, send_lock: threading.Lock, msg: Message) -> None:
        frame = encode_frame(respond(self._handler, msg))
        try:
            _send_all(conn, send_lock, [frame])
        except OSError:
            pass

    def close(self) -> None:
        """Stop accepting, let in-flight requests finish, then drop connections."""
        with self._lock:
            if self._closing:
                return
            self._closing = True
            conns = dict(self._conns)
        self._listener.close()
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RD)
            except OSError:
                pass
        for t in conns.values():
            t.join(timeout=10)
        self._pool.shutdown(wait=True)
        for conn in conns:
            conn.close()

    def __enter__(self) -> TcpServer:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _Conn:
    def __init__(self, owner: TcpTransport, endpoint: Endpoint, max_in_flight: int, timeout: float) -> None:
        try:
            self.sock = socket.create_connection((endpoint.host, endpoint.port), timeout=timeout)
        except socket.timeout as exc:
            raise Timeout(f"connect to {endpoint} timed out") from exc
        except OSError as exc:
            raise ConnectionRefused(f"cannot connect to {endpoint}: {exc}") from exc
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.endpoint = endpoint
        self.slots = threading.BoundedSemaphore(max_in_flight)
        self.send_lock = threading.Lock()
        self.pending: dict[int, Callable[[Result], None]] = {}
        self.lock = threading.Lock()
        self.dead = False
        self._owner = owner
        self._reader = threading.Thread(target=self._read_loop, name=f"conn-{endpoint}", daemon=True)
        self._reader.start()

    def register(self, rid: int, callback: Callable[[Result], None]) -> None:
        with self.lock:
            if self.dead:
                raise ConnectionRefused(f"connection to {self.endpoint} closed")
            self.pending[rid] = callback

    def forget(self, rid: int) -> bool:
        with self.lock:
            return self.pending.pop(rid, None) is not None

    def _read_loop(self) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                data = self.sock.recv(1 << 20)
                if not data:
                    break
                for msg in decoder.feed(data):
                    with self.lock:
                        cb = self.pending.pop(msg.request_id, None)
                    if cb is not None:
                        self.slots.release()
                        cb(result_of(msg))
        except (OSError, MalformedFrame):
            pass
        self._fail_all()

    def _fail_all(self) -> None:
        with self.lock:
            self.dead = True
            pending, self.pending = self.pending, {}
        self._owner._drop(self)
        for cb in pending.values():
            self.slots.release()
            cb(ConnectionRefused(f"connection to {self.endpoint} lost"))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpTransport(Transport):
    def __init__(self, timeout: float = DEFAULT_TIMEOUT, conn_in_flight: int = DEFAULT_CONN_IN_FLIGHT) -> None:
        self.timeout = timeout
        self.conn_in_flight = conn_in_flight
        self._conns: dict[Endpoint, _Conn] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._servers: list[TcpServer] = []

    def serve(self, endpoint: Endpoint, handler: Handler, blocking_opcodes: Iterable[int] = ()) -> TcpServer:
        server = TcpServer(endpoint, handler, blocking_opcodes)
        self._servers.append(server)
        return server

    def _conn(self, endpoint: Endpoint) -> _Conn:
        with self._lock:
            conn = self._conns.get(endpoint)
            if conn is not None and not conn.dead:
                return conn
            conn = _Conn(self, endpoint, self.conn_in_flight, self.timeout)
            self._conns[endpoint] = conn
            return conn

    def _drop(self, conn: _Conn) -> None:
        with self._lock:
            if self._conns.get(conn.endpoint) is conn:
                del self._conns[conn.endpoint]

    def call_many(
        self, requests: Sequence[Request], *, window: Optional[int] = None, timeout: Optional[float] = None
    ) -> list[Result]:
        n = len(requests)
        if n == 0:
            return []
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        results: list = [None] * n
        window_sem = threading.Semaphore(window or n)
        state = {"left": n}
        state_lock = threading.Lock()
        all_done = threading.Event()
        sent: dict[int, tuple[_Conn, int]] = {}
        buffers: dict[_Conn, list[bytes]] = {}

        def finish(i: int, res: Result) -> None:
            with state_lock:
                if results[i] is not None:
                    return
                results[i] = res
                state["left"] -= 1
                if state["left"] == 0:
                    all_done.set()
            window_sem.release()

        def flush() -> None:
            for conn, chunks in buffers.items():
                if chunks:
                    try:
                        _send_all(conn.sock, conn.send_lock, chunks)
                    except OSError:
                        pass  # the reader thread fails the pending calls
                    chunks.clear()

        def acquire(sem: threading.Semaphore) -> bool:
            if sem.acquire(blocking=False):
                return True
            flush()
            return sem.acquire(timeout=max(0.0, deadline - time.monotonic()))

        for i, req in enumerate(requests):
            if not acquire(window_sem):
                for j in range(i, n):
                    finish(j, Timeout(f"call to {requests[j].endpoint} timed out"))
                break
            try:
                conn = self._conn(req.endpoint)
            except StoreError as exc:
                finish(i, exc)
                continue
            if not acquire(conn.slots):
                finish(i, Timeout(f"no free slot on connection to {req.endpoint}"))
                continue
            rid = next(self._ids)
            try:
                conn.register(rid, lambda res, i=i: finish(i, res))
            except StoreError as exc:
                conn.slots.release()
                finish(i, exc)
                continue
            sent[i] = (conn, rid)
            chunks = buffers.setdefault(conn, [])
            chunks.append(encode_frame(Message(req.opcode, rid, req.payload)))
            if len(chunks) >= 64:
                flush()
        flush()

        if not all_done.wait(max(0.0, deadline - time.monotonic())):
            for i, (conn, rid) in sent.items():
                if conn.forget(rid):
                    conn.slots.release()
                    finish(i, Timeout(f"call to {requests[i].endpoint} timed out"))
            all_done.wait()
        return results

    def close(self) -> None:
        with self._lock:
            conns, self._conns = list(self._conns.values()), {}
        for conn in conns:
            conn.close()
        for server in self._servers:
            server.close()
        self._servers.clear()
