"""Point-to-point party communication with round and byte accounting.

Two backends share one channel interface:

* loopback - all parties in one process (threads), queues as links
* tcp      - real sockets, one process per party

Every interactive step in the protocol goes through ``exchange_round``; the
attached :class:`RoundLedger` is the measurement instrument behind the
latency-sweep benchmarks.  Per-link latency is simulated inside the transport
(not the OS): a message becomes visible ``delay`` seconds after it was sent
and a round is a rendezvous costing at least one full round trip (2x the
one-way delay).
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from . import fieldfix as ff
from .errors import (
    ConnectTimeout,
    ParamMismatch,
    PartyMissing,
    PeerFailure,
    TransportFailure,
    UnsupportedBackend,
)

_HANDSHAKE_MAGIC = b"PPF1"
_FRAME_HEADER = struct.Struct("<IIdI")  # round, party, send timestamp, element count


@dataclass
class RoundLedger:
    """Monotone counters of communication and preprocessing consumption.

    ``rounds`` counts raw transport exchanges.  ``logical_rounds`` counts only
    exchanges that opened Beaver maskings; truncation openings ride along and
    are excluded, which is the metric the multiplication-depth bounds use.  Counters are also aggregated per
    protocol phase so complexity bounds can be asserted phase by phase.
    """

    rounds: int = 0
    logical_rounds: int = 0
    messages: int = 0
    bytes_sent: int = 0
    triples_consumed: int = 0
    trunc_consumed: int = 0
    bits_consumed: int = 0
    reciprocal_ops: int = 0
    sqrt_ops: int = 0
    wall_times: dict = field(default_factory=dict)
    per_phase: dict = field(default_factory=dict)
    _phase_stack: list = field(default_factory=list)

    def push_phase(self, name: str) -> None:
        self._phase_stack.append(name)

    def pop_phase(self) -> None:
        self._phase_stack.pop()

    @property
    def phase_path(self) -> str:
        return "/".join(self._phase_stack)

    def bump(self, key: str, amount: int = 1) -> None:
        setattr(self, key, getattr(self, key) + amount)
        bucket = self.per_phase.setdefault(self.phase_path, {})
        bucket[key] = bucket.get(key, 0) + amount

    def add_wall(self, name: str, seconds: float) -> None:
        self.wall_times[name] = self.wall_times.get(name, 0.0) + seconds

    def phase_total(self, key: str, prefix: str = "", exact: bool = False) -> int:
        """Sum a counter over phases matching a path prefix (or exactly)."""
        total = 0
        for path, bucket in self.per_phase.items():
            if exact:
                if path != prefix:
                    continue
            elif not (path == prefix or path.startswith(prefix + "/") or prefix == ""):
                continue
            total += bucket.get(key, 0)
        return total

    def snapshot(self) -> dict:
        return {
            "rounds": self.rounds,
            "logical_rounds": self.logical_rounds,
            "messages": self.messages,
            "bytes_sent": self.bytes_sent,
            "triples_consumed": self.triples_consumed,
            "trunc_consumed": self.trunc_consumed,
            "bits_consumed": self.bits_consumed,
            "reciprocal_ops": self.reciprocal_ops,
            "sqrt_ops": self.sqrt_ops,
            "wall_times": dict(self.wall_times),
            "per_phase": {k: dict(v) for k, v in self.per_phase.items()},
        }


def ledger_report(channel) -> dict:
    """Immutable snapshot of a finished session's counters."""
    return channel.ledger.snapshot()


def simulate_latency(channel, delay_s: float) -> None:
    """Inject a per-delivery one-way delay into an open channel."""
    if not hasattr(channel, "set_latency"):
        raise UnsupportedBackend("channel does not support latency injection")
    channel.set_latency(delay_s)


@dataclass
class PartyTopology:
    """Fully connected mesh of ``n`` parties.

    ``latency_ms`` is the simulated one-way delay per link (RTT/2).
    ``endpoints`` are (host, port) pairs, used by the tcp backend only.
    """

    n: int
    backend: str = "loopback"
    latency_ms: float = 0.0
    endpoints: list[tuple[str, int]] | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two parties")
        if self.latency_ms < 0:
            raise ValueError("latency must be nonnegative")
        if self.backend not in ("loopback", "tcp"):
            raise UnsupportedBackend(self.backend)


class _ChannelBase:
    """Common exchange logic; subclasses provide _send/_recv per peer."""

    def __init__(self, party_id: int, n: int, params: ff.FieldParams, session_id: int,
                 latency_s: float):
        self.party_id = party_id
        self.n = n
        self.params = params
        self.session_id = session_id
        self.latency_s = latency_s
        self.ledger = RoundLedger()
        self._round = 0

    @property
    def peers(self) -> list[int]:
        return [j for j in range(self.n) if j != self.party_id]

    def set_latency(self, delay_s: float) -> None:
        self.latency_s = delay_s

    def exchange_round(self, payloads: dict[int, list[int]]) -> dict[int, list[int]]:
        """Send one message per peer, receive one from each; a full rendezvous.

        Empty payloads still cost a round (barrier semantics).  With one-way
        delay L the round is gated to take at least 2L.
        """
        start = time.monotonic()
        self._round += 1
        for j in self.peers:
            items = payloads.get(j, [])
            self._send(j, self._round, items)
            self.ledger.bump("messages")
            self.ledger.bump("bytes_sent", ff.WIRE_BYTES * len(items))
        received = {}
        for j in self.peers:
            received[j] = self._recv(j, self._round)
        self.ledger.bump("rounds")
        # rendezvous costs a full round trip of the slowest link
        remaining = start + 2.0 * self.latency_s - time.monotonic()
        if remaining > 0:
            time.sleep(remaining)
        return received

    def close(self) -> None:  # pragma: no cover - trivial default
        pass


class LoopbackHub:
    """Shared mailbox fabric for in-process parties (one thread per party)."""

    def __init__(self, topology: PartyTopology, params: ff.FieldParams, session_id: int = 0):
        self.topology = topology
        self.params = params
        self.session_id = session_id
        self._boxes = {
            (i, j): queue.Queue()
            for i in range(topology.n)
            for j in range(topology.n)
            if i != j
        }
        self._failed = threading.Event()

    def connect(self, party_id: int, params: ff.FieldParams | None = None) -> "LoopbackChannel":
        check = params or self.params
        if (check.p, check.h) != (self.params.p, self.params.h):
            raise ParamMismatch("field parameters disagree with the hub session")
        return LoopbackChannel(self, party_id)

    def fail(self) -> None:
        self._failed.set()
        for box in self._boxes.values():
            box.put(None)


class LoopbackChannel(_ChannelBase):
    def __init__(self, hub: LoopbackHub, party_id: int):
        super().__init__(
            party_id,
            hub.topology.n,
            hub.params,
            hub.session_id,
            hub.topology.latency_ms / 1000.0,
        )
        self._hub = hub

    def _send(self, peer: int, round_no: int, items: list[int]) -> None:
        visible_at = time.monotonic() + self.latency_s
        self._hub._boxes[(self.party_id, peer)].put((round_no, visible_at, items))

    def _recv(self, peer: int, round_no: int) -> list[int]:
        got = self._hub._boxes[(peer, self.party_id)].get()
        if got is None or self._hub._failed.is_set():
            raise PeerFailure(f"party {peer} aborted")
        rno, visible_at, items = got
        if rno != round_no:
            raise TransportFailure(f"round desync with party {peer}: {rno} != {round_no}")
        wait = visible_at - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        return items


class TcpMeshChannel(_ChannelBase):
    """One TCP connection per peer pair; lower party id accepts, higher connects."""

    def __init__(self, party_id: int, topology: PartyTopology, params: ff.FieldParams,
                 session_id: int, timeout_s: float = 20.0):
        if topology.endpoints is None or len(topology.endpoints) != topology.n:
            raise ValueError("tcp backend needs one endpoint per party")
        super().__init__(party_id, topology.n, params, session_id,
                         topology.latency_ms / 1000.0)
        self._socks: dict[int, socket.socket] = {}
        self._bufs: dict[int, bytearray] = {}
        self._connect_mesh(topology, timeout_s)

    def _connect_mesh(self, topology: PartyTopology, timeout_s: float) -> None:
        host, port = topology.endpoints[self.party_id]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(self.n)
        listener.settimeout(timeout_s)
        deadline = time.monotonic() + timeout_s
        try:
            # accept from every higher-id peer, dial every lower-id peer
            expected_accepts = self.n - 1 - self.party_id
            for j in range(self.party_id):
                self._socks[j] = self._dial(topology.endpoints[j], deadline)
            accepted = 0
            while accepted < expected_accepts:
                try:
                    conn, _ = listener.accept()
                except socket.timeout:
                    raise ConnectTimeout("not all peers connected in time")
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                peer = self._handshake(conn, initiator=False)
                self._socks[peer] = conn
                accepted += 1
        finally:
            listener.close()
        for j in self._socks:
            self._bufs[j] = bytearray()

    def _dial(self, endpoint: tuple[str, int], deadline: float) -> socket.socket:
        last_err = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(endpoint, timeout=1.0)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._handshake(sock, initiator=True)
                sock.settimeout(None)
                return sock
            except (ConnectionError, socket.timeout, OSError) as exc:
                last_err = exc
                time.sleep(0.05)
        raise ConnectTimeout(f"could not reach {endpoint}: {last_err}")

    def _handshake(self, sock: socket.socket, initiator: bool) -> int:
        mine = (
            _HANDSHAKE_MAGIC
            + struct.pack("<H", self.party_id)
            + ff.to_wire(self.params.p)
            + struct.pack("<HQ", self.params.h, self.session_id)
        )
        sock.sendall(mine)
        theirs = self._read_exactly(sock, len(mine))
        if theirs[:4] != _HANDSHAKE_MAGIC:
            raise ParamMismatch("bad handshake magic")
        peer = struct.unpack_from("<H", theirs, 4)[0]
        p = ff.from_wire(theirs[6:22])
        h, sid = struct.unpack_from("<HQ", theirs, 22)
        if p != self.params.p or h != self.params.h:
            raise ParamMismatch("peer uses different field parameters")
        if sid != self.session_id:
            raise ParamMismatch("peer belongs to a different session")
        return peer

    @staticmethod
    def _read_exactly(sock: socket.socket, count: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < count:
            part = sock.recv(count - len(chunks))
            if not part:
                raise PeerFailure("peer closed the connection")
            chunks += part
        return bytes(chunks)

    def _send(self, peer: int, round_no: int, items: list[int]) -> None:
        frame = _FRAME_HEADER.pack(round_no, self.party_id, time.monotonic(), len(items))
        try:
            self._socks[peer].sendall(frame + ff.pack_elements(items))
        except OSError as exc:
            raise PeerFailure(f"send to party {peer} failed: {exc}") from exc

    def _recv(self, peer: int, round_no: int) -> list[int]:
        try:
            head = self._read_exactly(self._socks[peer], _FRAME_HEADER.size)
        except OSError as exc:
            raise PeerFailure(f"recv from party {peer} failed: {exc}") from exc
        rno, sender, sent_at, count = _FRAME_HEADER.unpack(head)
        if rno != round_no or sender != peer:
            raise TransportFailure("frame desync")
        body = self._read_exactly(self._socks[peer], ff.WIRE_BYTES * count)
        # deliver no earlier than sent_at + one-way delay (same-host clocks)
        wait = sent_at + self.latency_s - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        return ff.unpack_elements(body)

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass


def connect(topology: PartyTopology, party_id: int, params: ff.FieldParams,
            session_id: int = 0, hub: LoopbackHub | None = None):
    """Open this party's channels.  Loopback requires a shared hub object."""
    if topology.backend == "loopback":
        if hub is None:
            raise PartyMissing("loopback connect needs the shared hub")
        return hub.connect(party_id, params)
    if topology.backend == "tcp":
        return TcpMeshChannel(party_id, topology, params, session_id)
    raise UnsupportedBackend(topology.backend)
