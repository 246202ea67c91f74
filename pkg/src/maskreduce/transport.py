"""Point-to-point ring transports.

Collectives in :mod:`maskreduce.collective` are written against one primitive,
``Communicator.sendrecv(payload)``: send to the ring successor and receive from
the ring predecessor in one synchronous round. Two implementations exist:

* :class:`SimFabric` - worker threads in one process, with a shared
  :class:`VirtualClock` advanced by the slowest link of every round.
* :class:`TcpCommunicator` - one OS process per worker, u64-length-prefixed
  frames over TCP.
"""
from __future__ import annotations

import multiprocessing as mp
import queue
import socket
import struct
import threading
import traceback
from dataclasses import dataclass

from .errors import LinkError

FRAME = struct.Struct("<Q")
CONNECT_TIMEOUT_S = 5.0
IO_TIMEOUT_S = 120.0


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float
    latency_s: float = 0.0

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_s < 0:
            raise ValueError("latency must be non-negative")

    def transfer_time(self, nbytes: int) -> float:
        return self.latency_s + nbytes * 8.0 / self.bandwidth_bps


class VirtualClock:
    def __init__(self, now_s: float = 0.0):
        self._now = float(now_s)
        self._lock = threading.Lock()

    @property
    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("virtual clock cannot run backwards")
        with self._lock:
            self._now += seconds
            return self._now


def simulate_transfer(nbytes: int, link: LinkModel, clock: VirtualClock) -> float:
    """Charge one transfer to ``clock`` and return its duration."""
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    elapsed = link.transfer_time(nbytes)
    clock.advance(elapsed)
    return elapsed


def simulate_round(sizes, links, clock: VirtualClock) -> float:
    """Synchronous round: every link transfers at once and the slowest one gates it."""
    elapsed = max(link.transfer_time(n) for n, link in zip(sizes, links))
    clock.advance(elapsed)
    return elapsed


@dataclass(frozen=True)
class Topology:
    """A logical ring. ``links[p]`` carries traffic from ``ring[p]`` to ``ring[p + 1]``."""

    n: int
    ring: tuple[int, ...]
    links: tuple[LinkModel, ...]

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("a ring needs at least two workers")
        if sorted(self.ring) != list(range(self.n)):
            raise ValueError(f"ring {self.ring} is not a permutation of 0..{self.n - 1}")
        if len(self.links) != self.n:
            raise ValueError("need exactly one link per ring edge")

    @classmethod
    def uniform(cls, n: int, link: LinkModel, ring=None) -> Topology:
        return cls(n, tuple(range(n)) if ring is None else tuple(ring), (link,) * n)

    def position(self, rank: int) -> int:
        return self.ring.index(rank)

    def successor(self, rank: int) -> int:
        return self.ring[(self.position(rank) + 1) % self.n]

    def predecessor(self, rank: int) -> int:
        return self.ring[(self.position(rank) - 1) % self.n]

    def out_link(self, rank: int) -> LinkModel:
        return self.links[self.position(rank)]

    @property
    def min_bandwidth(self) -> float:
        return min(link.bandwidth_bps for link in self.links)


class Communicator:
    """Per-rank endpoint. Subclasses implement :meth:`_exchange`."""

    def __init__(self, rank: int, topology: Topology, clock: VirtualClock):
        self.rank = rank
        self.topology = topology
        self.clock = clock
        self.bytes_sent = 0
        self.rounds = 0

    @property
    def size(self) -> int:
        return self.topology.n

    @property
    def position(self) -> int:
        return self.topology.position(self.rank)

    def sendrecv(self, payload) -> bytes:
        payload = bytes(payload)
        received = self._exchange(payload)
        self.bytes_sent += len(payload)
        self.rounds += 1
        return received

    def _exchange(self, payload: bytes) -> bytes:
        raise NotImplementedError

    def close(self):
        pass


class SimFabric:
    """Thread-based ring where each round is a barrier that advances a shared clock."""

    def __init__(self, topology: Topology, clock: VirtualClock | None = None, timeout: float = IO_TIMEOUT_S):
        self.topology = topology
        self.clock = clock or VirtualClock()
        self._inbox = [queue.SimpleQueue() for _ in range(topology.n)]
        self._sizes = [0] * topology.n
        self._barrier = threading.Barrier(topology.n, action=self._close_round, timeout=timeout)
        self.rounds = 0

    def _close_round(self):
        sizes = [self._sizes[r] for r in self.topology.ring]
        simulate_round(sizes, self.topology.links, self.clock)
        self.rounds += 1

    def endpoint(self, rank: int) -> SimCommunicator:
        return SimCommunicator(self, rank)

    def abort(self):
        self._barrier.abort()


class SimCommunicator(Communicator):
    def __init__(self, fabric: SimFabric, rank: int):
        super().__init__(rank, fabric.topology, fabric.clock)
        self._fabric = fabric
        self._succ = fabric.topology.successor(rank)
        self._pred = fabric.topology.predecessor(rank)

    def _exchange(self, payload):
        f = self._fabric
        f._sizes[self.rank] = len(payload)
        f._inbox[self._succ].put(payload)
        try:
            f._barrier.wait()
        except threading.BrokenBarrierError:
            raise LinkError("simulated ring aborted", peer=self._pred) from None
        return f._inbox[self.rank].get()


def run_simulated(topology: Topology, worker, args_per_rank=None, clock: VirtualClock | None = None):
    """Run ``worker(comm, *args)`` on one thread per rank and return results by rank.

    The first exception raised by any worker aborts the ring and is re-raised.
    """
    fabric = SimFabric(topology, clock)
    results = [None] * topology.n
    errors = []

    def body(rank):
        comm = fabric.endpoint(rank)
        args = args_per_rank[rank] if args_per_rank is not None else ()
        try:
            results[rank] = worker(comm, *args)
        except BaseException as exc:  # noqa: BLE001
            errors.append((rank, exc))
            fabric.abort()

    threads = [threading.Thread(target=body, args=(r,), name=f"worker-{r}") for r in range(topology.n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # prefer the root cause over the LinkErrors it triggered in peers
        errors.sort(key=lambda e: isinstance(e[1], LinkError))
        raise errors[0][1]
    return results


# --- TCP -----------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int, peer) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except OSError as exc:
            raise LinkError(f"receive failed: {exc}", peer=peer) from exc
        if k == 0:
            raise LinkError("connection closed mid-frame", peer=peer)
        got += k
    return bytes(buf)


def send_frame(sock: socket.socket, payload: bytes, peer=None) -> None:
    try:
        sock.sendall(FRAME.pack(len(payload)) + payload)
    except OSError as exc:
        raise LinkError(f"send failed: {exc}", peer=peer) from exc


def recv_frame(sock: socket.socket, peer=None) -> bytes:
    (length,) = FRAME.unpack(_recv_exact(sock, FRAME.size, peer))
    return _recv_exact(sock, length, peer)


def connect(address, timeout: float = CONNECT_TIMEOUT_S) -> socket.socket:
    host, port = address
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise LinkError(f"cannot connect: {exc}", peer=f"{host}:{port}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class EchoServer:
    """Loopback server that returns every frame it receives, for transport checks."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        while True:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            with conn:
                try:
                    while True:
                        send_frame(conn, recv_frame(conn))
                except LinkError:
                    pass

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def tcp_roundtrip(payload, address, timeout: float = CONNECT_TIMEOUT_S) -> bytes:
    """Send one frame to ``address`` and return the frame it answers with."""
    peer = f"{address[0]}:{address[1]}"
    with connect(address, timeout) as sock:
        sock.settimeout(IO_TIMEOUT_S)
        send_frame(sock, bytes(payload), peer)
        return recv_frame(sock, peer)


class TcpCommunicator(Communicator):
    """Ring endpoint over TCP: one outgoing socket to the successor, one incoming from the predecessor."""

    def __init__(self, rank: int, topology: Topology, addresses, listener: socket.socket,
                 clock: VirtualClock | None = None, timeout: float = IO_TIMEOUT_S):
        super().__init__(rank, topology, clock or VirtualClock())
        self._succ = topology.successor(rank)
        self._pred = topology.predecessor(rank)
        self._link = topology.out_link(rank)
        self._out = connect(addresses[self._succ])
        self._out.settimeout(timeout)
        send_frame(self._out, FRAME.pack(rank), self._succ)
        listener.settimeout(timeout)
        try:
            self._in, _ = listener.accept()
        except OSError as exc:
            raise LinkError(f"predecessor never connected: {exc}", peer=self._pred) from exc
        self._in.settimeout(timeout)
        (hello,) = FRAME.unpack(recv_frame(self._in, self._pred))
        if hello != self._pred:
            raise LinkError(f"expected predecessor {self._pred}, got rank {hello}", peer=hello)

    def _exchange(self, payload):
        err = []

        def push():
            try:
                send_frame(self._out, payload, self._succ)
            except LinkError as exc:
                err.append(exc)

        sender = threading.Thread(target=push)
        sender.start()
        try:
            received = recv_frame(self._in, self._pred)
        finally:
            sender.join()
        if err:
            raise err[0]
        # no global view over TCP: only this rank's outgoing link is charged
        simulate_transfer(len(payload), self._link, self.clock)
        return received

    def close(self):
        for s in (self._out, self._in):
            try:
                s.close()
            except OSError:
                pass


def _tcp_child(rank, topology, worker, args, port_q, addr_q, result_q):
    try:
        listener = socket.create_server(("127.0.0.1", 0))
        port_q.put((rank, listener.getsockname()[1]))
        addresses = addr_q.get(timeout=IO_TIMEOUT_S)
        comm = TcpCommunicator(rank, topology, addresses, listener)
        try:
            result = worker(comm, *args)
        finally:
            comm.close()
            listener.close()
        result_q.put((rank, True, result))
    except BaseException as exc:  # noqa: BLE001
        result_q.put((rank, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"))


def run_tcp(topology: Topology, worker, args_per_rank=None, timeout: float = 600.0):
    """Run ``worker(comm, *args)`` in one spawned process per rank over loopback TCP.

    ``worker`` and its arguments must be picklable. Returns results by rank;
    any child failure raises :class:`LinkError` carrying the child's traceback.
    """
    ctx = mp.get_context("spawn")
    port_q, result_q = ctx.Queue(), ctx.Queue()
    addr_qs = [ctx.Queue() for _ in range(topology.n)]
    procs = []
    for rank in range(topology.n):
        args = args_per_rank[rank] if args_per_rank is not None else ()
        p = ctx.Process(target=_tcp_child, args=(rank, topology, worker, args, port_q, addr_qs[rank], result_q))
        p.start()
        procs.append(p)
    try:
        ports = {}
        for _ in range(topology.n):
            rank, port = port_q.get(timeout=timeout)
            ports[rank] = port
        addresses = [("127.0.0.1", ports[r]) for r in range(topology.n)]
        for q in addr_qs:
            q.put(addresses)
        results = [None] * topology.n
        failures = []
        for _ in range(topology.n):
            rank, ok, value = result_q.get(timeout=timeout)
            if ok:
                results[rank] = value
            else:
                failures.append((rank, value))
        if failures:
            failures.sort(key=lambda f: "LinkError" in f[1])
            raise LinkError(f"TCP worker {failures[0][0]} failed:\n{failures[0][1]}", peer=failures[0][0])
        return results
    except queue.Empty:
        raise LinkError("TCP workers timed out") from None
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
