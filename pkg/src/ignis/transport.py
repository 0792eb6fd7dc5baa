"""Length-framed socket transport between engine processes.

Every process (driver and each executor) owns one Endpoint: a listening socket
plus one outbound connection per peer it talks to. All traffic uses one frame
layout, bit-exact on the wire:

    u32 LE frame length (bytes after this field)
    u64 LE communicator id
    u32 LE epoch
    u32 LE sequence number
    u16 LE opcode
    u16 LE channel id
    payload bytes

The first frame on every outbound connection is an IDENT frame carrying the
sender's own listen address, so the receiver can attribute every later frame
to a peer without a sender field in the header. Frames for data opcodes land
in per-(communicator, epoch, sender, channel) inboxes that exist independently
of any Communicator object, so traffic that arrives before the local side has
finished constructing its communicator is never lost. Control frames feed a
single command queue (executor agents consume it) and control replies are
routed back to the waiting request by sequence number.

Liveness is probe-based: a peer whose listening socket no longer accepts
connections is dead. Receivers block in small ticks and re-probe, so a killed
process turns into PeerLostError at every blocked caller instead of a hang.
"""

import queue
import socket
import struct
import threading
import time

from .errors import (
    ConnectTimeoutError,
    PeerLostError,
    ResourceError,
    StaleEpochError,
    TransportError,
)
from .values import deserialize_value, serialize_value

HEADER = struct.Struct("<QIIHH")  # comm_id, epoch, seq, opcode, channel
LEN = struct.Struct("<I")

OP_IDENT = 1
OP_P2P = 2
OP_BARRIER = 3
OP_BCAST = 4
OP_SCATTER = 5
OP_GATHER = 6
OP_REDUCE = 7
OP_ALLTOALL = 8
OP_CTRL = 16
OP_CTRL_REPLY = 17

CONTROL_COMM = 0  # reserved communicator id for the control plane

_PROBE_TIMEOUT = 1.0


class ProcessAddr:
    """Identity of one engine process: listen address plus job coordinates."""

    __slots__ = ("host", "port", "worker_id", "rank")

    def __init__(self, host, port, worker_id="", rank=0):
        if rank < 0:
            raise ValueError("rank must be non-negative")
        self.host = host
        self.port = int(port)
        self.worker_id = worker_id
        self.rank = rank

    @property
    def ident(self):
        return (self.host, self.port)

    def to_value(self):
        return [self.host, self.port, self.worker_id, self.rank]

    @staticmethod
    def from_value(v):
        host, port, worker_id, rank = v
        return ProcessAddr(host, port, worker_id, rank)

    def __repr__(self):
        return f"{self.worker_id}/{self.rank}@{self.host}:{self.port}"

    def __eq__(self, other):
        return (
            isinstance(other, ProcessAddr)
            and self.ident == other.ident
            and self.worker_id == other.worker_id
            and self.rank == other.rank
        )

    def __hash__(self):
        return hash((self.ident, self.worker_id, self.rank))


def probe(ident, timeout=_PROBE_TIMEOUT):
    """True iff something is listening at ident's (host, port)."""
    try:
        with socket.create_connection(ident, timeout=timeout):
            return True
    except OSError:
        return False


class _Conn:
    def __init__(self, sock):
        self.sock = sock
        self.lock = threading.Lock()

    def send_frame(self, comm_id, epoch, seq, opcode, channel, payload):
        frame = HEADER.pack(comm_id, epoch, seq, opcode, channel) + payload
        with self.lock:
            self.sock.sendall(LEN.pack(len(frame)) + frame)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class Endpoint:
    """One process's transport endpoint: listener, peers, inboxes."""

    def __init__(self, host="127.0.0.1", ports=None, port=0):
        self.host = host
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if ports is not None:
            bound = False
            for candidate in ports:
                try:
                    self._listener.bind((host, candidate))
                    bound = True
                    break
                except OSError:
                    continue
            if not bound:
                raise ResourceError(f"no bindable port among {len(ports)} configured candidates")
        else:
            self._listener.bind((host, port))
        self.port = self._listener.getsockname()[1]
        self.ident = (host, self.port)
        self._listener.listen(128)

        self._closing = False
        self._out = {}          # ident -> _Conn
        self._out_lock = threading.Lock()
        self._inbox = {}        # (comm_id, epoch, ident, channel) -> deque of (seq, opcode, payload)
        self._inbox_cond = threading.Condition()
        self.control = queue.Queue()   # (sender_ident, seq, value)
        self._replies = {}      # seq -> Queue
        self._replies_lock = threading.Lock()
        self._dead = set()
        self.invalid_comms = set()
        self._readers = []

        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"ignis-accept-{self.port}", daemon=True
        )
        self._accept_thread.start()

    # -- connection management -------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read_loop, args=(sock,), daemon=True)
            t.start()
            self._readers.append(t)

    def _read_exact(self, f, n):
        data = f.read(n)
        if data is None or len(data) != n:
            raise EOFError
        return data

    def _read_loop(self, sock):
        sender = None
        f = sock.makefile("rb")
        try:
            while True:
                raw_len = f.read(LEN.size)
                if not raw_len or len(raw_len) < LEN.size:
                    return  # probe connections and clean closes end here
                (length,) = LEN.unpack(raw_len)
                frame = self._read_exact(f, length)
                comm_id, epoch, seq, opcode, channel = HEADER.unpack_from(frame, 0)
                payload = frame[HEADER.size:]
                if opcode == OP_IDENT:
                    host, port = deserialize_value(payload)
                    sender = (host, port)
                    with self._inbox_cond:
                        # a live connection speaking for this identity proves
                        # the address is alive again (port reuse by a
                        # replacement process); epochs keep old traffic out
                        self._dead.discard(sender)
                        self._inbox_cond.notify_all()
                    continue
                if opcode == OP_CTRL:
                    value = deserialize_value(payload)
                    # drop_comm is honored immediately in the reader so a
                    # process blocked in a collective on that communicator
                    # wakes up instead of waiting out the timeout
                    if isinstance(value, list) and value and value[0] == "drop_comm":
                        self.invalidate_comm(value[1])
                    self.control.put((sender, seq, value))
                    continue
                if opcode == OP_CTRL_REPLY:
                    with self._replies_lock:
                        waiter = self._replies.get(seq)
                    if waiter is not None:
                        waiter.put(deserialize_value(payload))
                    continue
                if comm_id in self.invalid_comms:
                    continue  # stale traffic from a torn-down communicator
                self._deliver(comm_id, epoch, sender, channel, seq, opcode, payload)
        except (EOFError, OSError):
            return
        finally:
            try:
                f.close()
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
            if sender is not None and not self._closing:
                # the peer may have exited cleanly or died; probing settles it
                if not probe(sender, timeout=0.2):
                    self.mark_dead(sender)

    def _deliver(self, comm_id, epoch, sender, channel, seq, opcode, payload):
        key = (comm_id, epoch, sender, channel)
        with self._inbox_cond:
            self._inbox.setdefault(key, []).append((seq, opcode, payload))
            self._inbox_cond.notify_all()

    def connect(self, ident, timeout=5.0):
        """Outbound connection to a peer's listener, identified immediately."""
        with self._out_lock:
            conn = self._out.get(ident)
        if conn is not None:
            return conn
        deadline = time.monotonic() + timeout
        refused_deadline = time.monotonic() + min(0.4, timeout)
        sock = None
        last_error = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(
                    ident, timeout=max(0.05, deadline - time.monotonic()))
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                break
            except OSError as exc:
                last_error = exc
                # a refused connection means no listener: the process is gone
                # (processes bind before announcing themselves), so fail fast
                if isinstance(exc, ConnectionRefusedError) and \
                        time.monotonic() >= refused_deadline:
                    break
                time.sleep(0.05)
        if sock is None:
            raise ConnectTimeoutError(f"{ident[0]}:{ident[1]} ({last_error})")
        conn = _Conn(sock)
        with self._out_lock:
            existing = self._out.get(ident)
            if existing is not None:
                conn.close()
                return existing
            self._out[ident] = conn
        conn.send_frame(
            CONTROL_COMM, 0, 0, OP_IDENT, 0, serialize_value([self.host, self.port])
        )
        return conn

    def send(self, ident, comm_id, epoch, seq, opcode, channel, payload, timeout=5.0):
        if ident == self.ident:
            if opcode == OP_CTRL:
                self.control.put((ident, seq, deserialize_value(payload)))
            else:
                self._deliver(comm_id, epoch, ident, channel, seq, opcode, payload)
            return
        if ident in self._dead and not self._confirm_alive(ident):
            raise PeerLostError(f"{ident[0]}:{ident[1]}")
        conn = self.connect(ident, timeout)
        try:
            conn.send_frame(comm_id, epoch, seq, opcode, channel, payload)
        except OSError as exc:
            self._drop_conn(ident)
            if probe(ident, timeout=0.5):
                raise TransportError(f"send to {ident} failed: {exc}") from exc
            self.mark_dead(ident)
            raise PeerLostError(f"{ident[0]}:{ident[1]}") from exc

    def _drop_conn(self, ident):
        with self._out_lock:
            conn = self._out.pop(ident, None)
        if conn is not None:
            conn.close()

    def mark_dead(self, ident):
        with self._inbox_cond:
            self._dead.add(ident)
            self._inbox_cond.notify_all()
        self._drop_conn(ident)

    def is_dead(self, ident):
        return ident in self._dead

    def forget_dead(self, ident):
        self._dead.discard(ident)

    def _confirm_alive(self, ident):
        """The dead set is a hint: a replacement may have rebound the port."""
        if probe(ident, timeout=0.5):
            with self._inbox_cond:
                self._dead.discard(ident)
                self._inbox_cond.notify_all()
            return True
        return False

    # -- receive ----------------------------------------------------------------

    def recv_frame(self, comm_id, epoch, sender_ident, channel, timeout, probe_interval=0.25,
                   peer_rank=None):
        """Pop the next frame for the key, probing the sender while waiting.

        Returns (seq, opcode, payload). Raises PeerLostError if the sender dies
        while we wait, or queue.Empty on timeout.
        """
        key = (comm_id, epoch, sender_ident, channel)
        deadline = time.monotonic() + timeout
        next_probe = time.monotonic() + probe_interval
        with self._inbox_cond:
            while True:
                if comm_id in self.invalid_comms:
                    raise StaleEpochError(
                        f"communicator {comm_id:#x} was invalidated while receiving")
                box = self._inbox.get(key)
                if box:
                    return box.pop(0)
                if sender_ident in self._dead:
                    self._inbox_cond.release()
                    try:
                        alive = self._confirm_alive(sender_ident)
                    finally:
                        self._inbox_cond.acquire()
                    if not alive:
                        raise PeerLostError(f"{sender_ident[0]}:{sender_ident[1]}",
                                            rank=peer_rank)
                    continue
                now = time.monotonic()
                if now >= deadline:
                    raise queue.Empty()
                self._inbox_cond.wait(min(probe_interval, deadline - now))
                if time.monotonic() >= next_probe:
                    self._inbox_cond.release()
                    try:
                        alive = probe(sender_ident, timeout=0.5)
                    finally:
                        self._inbox_cond.acquire()
                    if not alive:
                        self._dead.add(sender_ident)
                        raise PeerLostError(f"{sender_ident[0]}:{sender_ident[1]}", rank=peer_rank)
                    next_probe = time.monotonic() + probe_interval

    def invalidate_comm(self, comm_id):
        with self._inbox_cond:
            self.invalid_comms.add(comm_id)
            stale = [k for k in self._inbox if k[0] == comm_id]
            for k in stale:
                del self._inbox[k]
            self._inbox_cond.notify_all()

    # -- control plane ------------------------------------------------------------

    _ctrl_seq = 0
    _ctrl_lock = threading.Lock()

    def send_request(self, ident, command, connect_timeout=5.0):
        """Fire a control command; returns a handle for wait_reply."""
        with Endpoint._ctrl_lock:
            Endpoint._ctrl_seq += 1
            seq = Endpoint._ctrl_seq & 0xFFFFFFFF
        waiter = queue.Queue()
        with self._replies_lock:
            self._replies[seq] = waiter
        try:
            self.send(ident, CONTROL_COMM, 0, seq, OP_CTRL, 0,
                      serialize_value(command), timeout=connect_timeout)
        except BaseException:
            with self._replies_lock:
                self._replies.pop(seq, None)
            raise
        return (ident, seq, waiter)

    def wait_reply(self, handle, timeout=60.0, probe_interval=0.25):
        ident, seq, waiter = handle
        deadline = time.monotonic() + timeout
        try:
            while True:
                try:
                    return waiter.get(
                        timeout=min(probe_interval, max(0.01, deadline - time.monotonic()))
                    )
                except queue.Empty:
                    if time.monotonic() >= deadline:
                        raise TransportError(f"control request to {ident} timed out") from None
                    if not probe(ident, timeout=0.5):
                        self.mark_dead(ident)
                        raise PeerLostError(f"{ident[0]}:{ident[1]}") from None
        finally:
            with self._replies_lock:
                self._replies.pop(seq, None)

    def request(self, ident, command, timeout=60.0, probe_interval=0.25, connect_timeout=5.0):
        """Send a control command (any TLV-encodable value) and await its reply."""
        handle = self.send_request(ident, command, connect_timeout)
        return self.wait_reply(handle, timeout, probe_interval)

    def notify(self, ident, command, timeout=5.0):
        """Fire-and-forget control event (sequence 0: no reply expected)."""
        self.send(ident, CONTROL_COMM, 0, 0, OP_CTRL, 0,
                  serialize_value(command), timeout=timeout)

    def reply(self, ident, seq, value, timeout=5.0):
        self.send(ident, CONTROL_COMM, 0, seq, OP_CTRL_REPLY, 0,
                  serialize_value(value), timeout=timeout)

    def close(self):
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._out_lock:
            conns = list(self._out.values())
            self._out.clear()
        for conn in conns:
            conn.close()
        with self._inbox_cond:
            self._inbox_cond.notify_all()
