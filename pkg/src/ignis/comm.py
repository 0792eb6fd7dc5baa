"""Communicators: membership groups with point-to-point and collective ops.

Three kinds exist. A *base* communicator spans all executors of one worker and
always exists while the worker runs. A *driver* communicator is a base group
joined with the driver process at rank 0, created lazily the first time the
driver and that worker exchange data. An *inter-worker* communicator joins the
executors of exactly two workers (first worker's ranks first) and exists only
while an import of partitions between them is running.

Losing a member never repairs a communicator in place: a new communicator with
a fresh id and epoch+1 replaces it and the old id is invalid forever; any call
against it raises StaleEpochError, and frames tagged with it are dropped, so
no payload can cross epochs.

Collectives carry (communicator id, epoch, sequence number) in the frame and
the root in a 2-byte payload prefix; every received frame is checked against
the expectation of the local call and any disagreement is a hard error rather
than a hang (a generous timeout turns silent disagreement into an error too).
Each communicator runs one collective at a time on its own channel id, so
collectives on distinct communicators proceed in parallel from different
threads. Broadcast and reduce switch to a binomial tree at size >= 4; reduce
always folds in rank order, so floating-point results are reproducible at a
fixed member count. A failing reduction op still completes the message
schedule (the error travels as a tagged payload), leaving no undrained frames
behind.
"""

import queue
import struct
import threading

from .errors import (
    CollectiveMismatchError,
    CollectiveOpError,
    CollectiveTimeoutError,
    RootMismatchError,
    SameWorkerError,
    StaleEpochError,
)
from .transport import (
    OP_ALLTOALL,
    OP_BARRIER,
    OP_BCAST,
    OP_GATHER,
    OP_P2P,
    OP_REDUCE,
    OP_SCATTER,
    ProcessAddr,
)
from .values import deserialize_value, serialize_value

KIND_BASE = "base"
KIND_DRIVER = "driver"
KIND_INTER = "inter"

_ROOT = struct.Struct("<H")
_NO_ROOT = 0xFFFF

_OP_NAMES = {
    OP_P2P: "p2p",
    OP_BARRIER: "barrier",
    OP_BCAST: "broadcast",
    OP_SCATTER: "scatter",
    OP_GATHER: "gather",
    OP_REDUCE: "reduce",
    OP_ALLTOALL: "alltoall",
}

def _comm_channel(comm_id):
    # channel 0 is the control plane; every communicator derives one agreed
    # channel from its id. A communicator runs one collective at a time, so
    # two concurrently executing collectives are always on distinct
    # communicators and therefore never share a channel (inboxes are keyed by
    # communicator id as well, so a u16 wraparound cannot mix traffic).
    return (comm_id % 0xFFFE) + 1


class CommSpec:
    """Immutable description of a communicator everyone must agree on."""

    __slots__ = ("comm_id", "kind", "epoch", "members")

    def __init__(self, comm_id, kind, epoch, members):
        ranks = [m.rank for m in members]
        if ranks != list(range(len(members))):
            raise ValueError(f"members must be rank-ordered 0..n-1, got {ranks}")
        self.comm_id = comm_id
        self.kind = kind
        self.epoch = epoch
        self.members = tuple(members)

    @property
    def size(self):
        return len(self.members)

    def to_value(self):
        return [self.comm_id, self.kind, self.epoch, [m.to_value() for m in self.members]]

    @staticmethod
    def from_value(v):
        comm_id, kind, epoch, members = v
        return CommSpec(comm_id, kind, epoch, [ProcessAddr.from_value(m) for m in members])

    def rank_of(self, ident):
        for m in self.members:
            if m.ident == ident:
                return m.rank
        return None

    def __repr__(self):
        return f"CommSpec({self.comm_id:#x} {self.kind} e{self.epoch} n{self.size})"


def base_spec(worker, addrs, comm_id, epoch=0):
    """Base communicator over all executors of one worker."""
    if not addrs:
        raise ValueError("a base communicator needs at least one executor")
    members = [
        ProcessAddr(a.host, a.port, worker.id if worker else a.worker_id, i)
        for i, a in enumerate(addrs)
    ]
    return CommSpec(comm_id, KIND_BASE, epoch, members)


def driver_spec(base, driver_addr, comm_id):
    """Join a base communicator with the driver process at rank 0."""
    if base.kind != KIND_BASE:
        raise ValueError(f"can only attach a driver to a base communicator, not {base.kind}")
    members = [ProcessAddr(driver_addr.host, driver_addr.port, driver_addr.worker_id or "driver", 0)]
    for m in base.members:
        members.append(ProcessAddr(m.host, m.port, m.worker_id, m.rank + 1))
    return CommSpec(comm_id, KIND_DRIVER, base.epoch, members)


def inter_spec(a, b, comm_id):
    """Join the base communicators of two different workers."""
    if a.kind != KIND_BASE or b.kind != KIND_BASE:
        raise ValueError("inter-worker communicators join two base communicators")
    workers_a = {m.worker_id for m in a.members}
    workers_b = {m.worker_id for m in b.members}
    if workers_a & workers_b:
        raise SameWorkerError(f"workers {sorted(workers_a & workers_b)} on both sides")
    members = []
    for m in a.members:
        members.append(ProcessAddr(m.host, m.port, m.worker_id, len(members)))
    for m in b.members:
        members.append(ProcessAddr(m.host, m.port, m.worker_id, len(members)))
    return CommSpec(comm_id, KIND_INTER, max(a.epoch, b.epoch), members)


def replaced_spec(spec, lost_rank, replacement, new_comm_id):
    """Same rank order with `replacement` at lost_rank; epoch bumped, new id."""
    if not 0 <= lost_rank < spec.size:
        raise ValueError(f"rank {lost_rank} not in communicator of size {spec.size}")
    members = list(spec.members)
    old = members[lost_rank]
    members[lost_rank] = ProcessAddr(
        replacement.host, replacement.port, replacement.worker_id or old.worker_id, lost_rank
    )
    return CommSpec(new_comm_id, spec.kind, spec.epoch + 1, members)


def rebuilt_spec(spec, new_comm_id):
    """Same members, fresh id, epoch bumped: resynchronizes after an abort."""
    return CommSpec(new_comm_id, spec.kind, spec.epoch + 1, spec.members)


class Communicator:
    """One process's view of a communicator; rank-addressed operations."""

    def __init__(self, endpoint, spec, rank, connect_timeout=5.0, collective_timeout=120.0,
                 probe_interval=0.25):
        if not 0 <= rank < spec.size:
            raise ValueError(f"rank {rank} out of range for size {spec.size}")
        self.endpoint = endpoint
        self.spec = spec
        self.rank = rank
        self.connect_timeout = connect_timeout
        self.collective_timeout = collective_timeout
        self.probe_interval = probe_interval
        self.channel = _comm_channel(spec.comm_id)
        self._seq = 0
        self._p2p_out = {}
        self._p2p_in = {}
        self._lock = threading.RLock()

    @property
    def comm_id(self):
        return self.spec.comm_id

    @property
    def epoch(self):
        return self.spec.epoch

    @property
    def size(self):
        return self.spec.size

    @property
    def kind(self):
        return self.spec.kind

    def member(self, rank):
        return self.spec.members[rank]

    # -- plumbing ---------------------------------------------------------------

    def open(self):
        """Eagerly connect to every other member; detects unreachable peers."""
        self._check_valid()
        for m in self.spec.members:
            if m.rank != self.rank:
                self.endpoint.connect(m.ident, timeout=self.connect_timeout)
        return self

    def invalidate(self):
        self.endpoint.invalidate_comm(self.comm_id)

    def _check_valid(self):
        if self.comm_id in self.endpoint.invalid_comms:
            raise StaleEpochError(
                f"communicator {self.comm_id:#x} (epoch {self.epoch}) was rebuilt or destroyed"
            )

    def _send(self, to_rank, seq, opcode, payload):
        m = self.spec.members[to_rank]
        self.endpoint.send(
            m.ident, self.comm_id, self.epoch, seq, opcode, self.channel, payload,
            timeout=self.connect_timeout,
        )

    def _recv(self, from_rank, seq, opcode, expected_root):
        m = self.spec.members[from_rank]
        try:
            got_seq, got_op, payload = self.endpoint.recv_frame(
                self.comm_id, self.epoch, m.ident, self.channel,
                timeout=self.collective_timeout, probe_interval=self.probe_interval,
                peer_rank=from_rank,
            )
        except queue.Empty:
            raise CollectiveTimeoutError(
                f"{_OP_NAMES.get(opcode, opcode)} seq {seq} on {self.spec!r}: no frame from rank "
                f"{from_rank} within {self.collective_timeout}s (members may disagree on the "
                f"collective or its root)"
            ) from None
        if got_op != opcode or got_seq != seq:
            raise CollectiveMismatchError(
                f"expected {_OP_NAMES.get(opcode, opcode)} seq {seq} from rank {from_rank}, got "
                f"{_OP_NAMES.get(got_op, got_op)} seq {got_seq} on {self.spec!r}"
            )
        (root,) = _ROOT.unpack_from(payload, 0)
        if root != expected_root:
            raise RootMismatchError(
                f"rank {from_rank} ran {_OP_NAMES.get(opcode, opcode)} with root {root}, "
                f"local call expects root {expected_root}"
            )
        return payload[_ROOT.size:]

    def _next_seq(self):
        self._seq += 1
        return self._seq

    # -- point-to-point -----------------------------------------------------------

    def send(self, to_rank, payload):
        """Ordered p2p bytes to a member; order holds per (sender, receiver, channel)."""
        self._check_valid()
        if not 0 <= to_rank < self.size:
            raise ValueError(f"rank {to_rank} out of range")
        with self._lock:
            seq = self._p2p_out.get(to_rank, 0) + 1
            self._p2p_out[to_rank] = seq
        self._send(to_rank, seq, OP_P2P, _ROOT.pack(_NO_ROOT) + payload)

    def recv(self, from_rank, timeout=None):
        self._check_valid()
        m = self.spec.members[from_rank]
        try:
            seq, op, payload = self.endpoint.recv_frame(
                self.comm_id, self.epoch, m.ident, self.channel,
                timeout=timeout or self.collective_timeout,
                probe_interval=self.probe_interval, peer_rank=from_rank,
            )
        except queue.Empty:
            raise CollectiveTimeoutError(f"recv from rank {from_rank} timed out") from None
        if op != OP_P2P:
            raise CollectiveMismatchError(f"expected p2p data, got {_OP_NAMES.get(op, op)}")
        with self._lock:
            expected = self._p2p_in.get(from_rank, 0) + 1
            if seq != expected:
                raise CollectiveMismatchError(
                    f"p2p sequence regression from rank {from_rank}: got {seq}, expected {expected}"
                )
            self._p2p_in[from_rank] = seq
        return payload[_ROOT.size:]

    # -- collectives ----------------------------------------------------------------

    def barrier(self):
        """Returns only after every member entered."""
        self._check_valid()
        with self._lock:
            seq = self._next_seq()
            token = _ROOT.pack(0)
            if self.rank == 0:
                for r in range(1, self.size):
                    self._recv(r, seq, OP_BARRIER, 0)
                for r in range(1, self.size):
                    self._send(r, seq, OP_BARRIER, token)
            else:
                self._send(0, seq, OP_BARRIER, token)
                self._recv(0, seq, OP_BARRIER, 0)

    def broadcast(self, root, payload=None):
        """Every member returns root's payload. Binomial tree at size >= 4."""
        self._check_valid()
        self._check_root(root)
        if self.rank == root and payload is None:
            raise ValueError("root must supply the broadcast payload")
        with self._lock:
            seq = self._next_seq()
            return self._broadcast_impl(root, payload, seq)

    def _broadcast_impl(self, root, payload, seq):
        size = self.size
        if size == 1:
            return payload
        if size < 4:
            if self.rank == root:
                framed = _ROOT.pack(root) + payload
                for r in range(size):
                    if r != root:
                        self._send(r, seq, OP_BCAST, framed)
                return payload
            return self._recv(root, seq, OP_BCAST, root)
        # binomial tree on ranks relative to the root
        vrank = (self.rank - root) % size
        data = payload
        mask = 1
        while mask < size:
            if vrank & mask:
                src = (vrank - mask + root) % size
                data = self._recv(src, seq, OP_BCAST, root)
                break
            mask <<= 1
        framed = _ROOT.pack(root) + data
        mask >>= 1
        while mask > 0:
            if vrank + mask < size:
                dst = (vrank + mask + root) % size
                self._send(dst, seq, OP_BCAST, framed)
            mask >>= 1
        return data

    def scatter(self, root, parts=None):
        """Member i returns parts[i]; only the root supplies parts."""
        self._check_valid()
        self._check_root(root)
        with self._lock:
            seq = self._next_seq()
            if self.rank == root:
                if parts is None or len(parts) != self.size:
                    raise ValueError(f"scatter needs exactly {self.size} parts at the root")
                for r in range(self.size):
                    if r != root:
                        self._send(r, seq, OP_SCATTER, _ROOT.pack(root) + parts[r])
                return parts[root]
            return self._recv(root, seq, OP_SCATTER, root)

    def gather(self, root, payload):
        """Root returns payloads in rank order; members return None."""
        self._check_valid()
        self._check_root(root)
        with self._lock:
            seq = self._next_seq()
            if self.rank == root:
                out = []
                for r in range(self.size):
                    if r == root:
                        out.append(payload)
                    else:
                        out.append(self._recv(r, seq, OP_GATHER, root))
                return out
            self._send(root, seq, OP_GATHER, _ROOT.pack(root) + payload)
            return None

    def reduce(self, root, value, op, tree=None):
        """Rank-order fold of member values; result at the root only."""
        self._check_valid()
        self._check_root(root)
        with self._lock:
            seq = self._next_seq()
            result, failure = self._reduce_impl(root, value, op, seq, tree)
            if failure is not None:
                raise failure
            return result

    def _reduce_impl(self, root, value, op, seq, tree):
        """Returns (result_at_root_or_None, failure_or_None); always drains."""
        size = self.size
        if size == 1:
            return value, None
        use_tree = tree if tree is not None else size >= 4
        failure = None
        if use_tree:
            # combine toward rank 0 over contiguous rank ranges: fold order is
            # exactly rank order, and only associativity is required of op
            acc = value
            sent_up = False
            mask = 1
            while mask < size:
                if self.rank & mask:
                    parent = self.rank - mask
                    self._send(parent, seq, OP_REDUCE, self._red_payload(root, acc, failure))
                    sent_up = True
                    break
                partner = self.rank + mask
                if partner < size:
                    rhs, fail = self._red_recv(partner, seq, root)
                    if failure is None:
                        if fail is not None:
                            failure = fail
                        else:
                            try:
                                acc = op(acc, rhs)
                            except Exception as exc:
                                failure = CollectiveOpError(self.rank, str(exc))
                mask <<= 1
            if self.rank == 0:
                if root != 0:
                    self._send(root, seq, OP_REDUCE, self._red_payload(root, acc, failure))
                    return None, failure
                return (acc if failure is None else None), failure
            if self.rank == root:
                result, fail = self._red_recv(0, seq, root)
                return result, (failure or fail)
            assert sent_up
            return None, failure
        # flat: everyone ships to the root, the root folds in rank order
        if self.rank == root:
            acc = None
            for r in range(size):
                if r == root:
                    v, fail = value, None
                else:
                    v, fail = self._red_recv(r, seq, root)
                if failure is None and fail is not None:
                    failure = fail
                if failure is None:
                    try:
                        acc = v if r == 0 else op(acc, v)
                    except Exception as exc:
                        failure = CollectiveOpError(self.rank, str(exc))
            return (acc if failure is None else None), failure
        self._send(root, seq, OP_REDUCE, self._red_payload(root, value, None))
        return None, None

    def _red_payload(self, root, value, failure):
        if failure is not None:
            return _ROOT.pack(root) + b"\x01" + serialize_value((failure.rank, str(failure)))
        return _ROOT.pack(root) + b"\x00" + serialize_value(value)

    def _red_recv(self, from_rank, seq, root):
        body = self._recv(from_rank, seq, OP_REDUCE, root)
        if body[0] == 1:
            rank, message = deserialize_value(body[1:])
            return None, CollectiveOpError(rank, message)
        return deserialize_value(body[1:]), None

    def allreduce(self, value, op, tree=None):
        """reduce to rank 0 followed by broadcast; every member gets the result."""
        self._check_valid()
        with self._lock:
            seq = self._next_seq()
            result, failure = self._reduce_impl(0, value, op, seq, tree)
            seq2 = self._next_seq()
            if self.rank == 0:
                if failure is not None:
                    body = b"\x01" + serialize_value((failure.rank, str(failure)))
                else:
                    body = b"\x00" + serialize_value(result)
                out = self._broadcast_impl(0, body, seq2)
            else:
                out = self._broadcast_impl(0, None, seq2)
            if out[0] == 1:
                rank, message = deserialize_value(out[1:])
                raise CollectiveOpError(rank, message)
            return deserialize_value(out[1:])

    def alltoall(self, outboxes):
        """Member j receives at index i what member i placed at index j."""
        self._check_valid()
        if len(outboxes) != self.size:
            raise ValueError(f"alltoall needs exactly {self.size} outboxes, got {len(outboxes)}")
        with self._lock:
            seq = self._next_seq()
            for r in range(self.size):
                if r != self.rank:
                    self._send(r, seq, OP_ALLTOALL, _ROOT.pack(_NO_ROOT) + outboxes[r])
            inboxes = []
            for r in range(self.size):
                if r == self.rank:
                    inboxes.append(outboxes[r])
                else:
                    inboxes.append(self._recv(r, seq, OP_ALLTOALL, _NO_ROOT))
            return inboxes

    def _check_root(self, root):
        if not 0 <= root < self.size:
            raise RootMismatchError(f"root {root} out of range for size {self.size}")
