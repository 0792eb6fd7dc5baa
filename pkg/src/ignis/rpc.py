"""RPC service: every scriptable driver call, invocable remotely.

Wire protocol (bit-exact, also documented in docs/protocol.md):

    every frame:  u32 LE length, then payload
    handshake:    client sends "IGNR" + u8 version; server answers
                  u8 status (0 ok) + "IGNR" + u8 version, or status 1 + TLV
                  Str message on a version mismatch
    request:      u16 LE method id + TLV List of arguments
    response:     u8 status (0 ok, 1 error) + TLV payload
                  (ok: result value; error: Str message)

Objects created on the server (clusters, workers, dataframes) are returned as
opaque I64 handles and passed back as the first argument of method calls.
Function arguments travel as [kind, target, params] source descriptors; text
lambdas are Pair(List of param names, body). Concurrent clients are accepted
but execute serially through the backend control thread.

The method-id table below is frozen for protocol version 1 and is generated
from the same @api_method registry that defines the local API, so the two
surfaces cannot drift apart.
"""

import socket
import struct
import threading

from .api import API_SURFACE, ISource
from .errors import IgnisError
from .registry import SourceRef
from .values import deserialize_value, serialize_value

MAGIC = b"IGNR"
VERSION = 1

_LEN = struct.Struct("<I")
_METHOD = struct.Struct("<H")

# Frozen method-id table for protocol version 1. Order is append-only.
METHOD_IDS = {
    "ping": 1,
    "start": 2,
    "stop": 3,
    "createCluster": 4,
    "createWorker": 5,
    "parallelize": 6,
    "textFile": 7,
    "partitionJsonFile": 8,
    "partitionObjectFile": 9,
    "importData": 10,
    "loadLibrary": 11,
    "call": 12,
    "voidCall": 13,
    "map": 14,
    "filter": 15,
    "flatmap": 16,
    "keyBy": 17,
    "mapValues": 18,
    "keys": 19,
    "values": 20,
    "mapPartitions": 21,
    "groupByKey": 22,
    "groupBy": 23,
    "reduceByKey": 24,
    "aggregateByKey": 25,
    "sortBy": 26,
    "sort": 27,
    "sortByKey": 28,
    "union": 29,
    "join": 30,
    "distinct": 31,
    "sample": 32,
    "sampleByKey": 33,
    "takeSample": 34,
    "count": 35,
    "max": 36,
    "min": 37,
    "countByKey": 38,
    "countByValue": 39,
    "reduce": 40,
    "treeReduce": 41,
    "aggregate": 42,
    "treeAggregate": 43,
    "fold": 44,
    "repartition": 45,
    "partitionBy": 46,
    "collect": 47,
    "collectAsMap": 48,
    "take": 49,
    "top": 50,
    "persist": 51,
    "cache": 52,
    "unpersist": 53,
    "uncache": 54,
    "saveAsTextFile": 55,
    "saveAsJsonFile": 56,
    "saveAsObjectFile": 57,
    "iterate": 58,
}

_NAMES = {v: k for k, v in METHOD_IDS.items()}


def _src(value):
    return ISource(SourceRef.from_value(value)) if value is not None else None


class RpcServer:
    """Serves one started session to remote clients."""

    def __init__(self, session, port=0, host="127.0.0.1"):
        self.session = session
        self._handles = {}
        self._next_handle = 0
        self._lock = threading.Lock()  # clients are serialized
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            raise IgnisError(f"cannot bind RPC port {port}: {exc}") from exc
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        self._closing = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True,
                                        name=f"ignis-rpc-{self.port}")
        self._thread.start()

    def close(self):
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass

    # -- handles ---------------------------------------------------------------

    def _put(self, obj):
        self._next_handle += 1
        self._handles[self._next_handle] = obj
        return self._next_handle

    def _get(self, handle):
        try:
            return self._handles[handle]
        except KeyError:
            raise IgnisError(f"unknown handle {handle}") from None

    # -- wire loop ----------------------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(sock,), daemon=True).start()

    def _read_frame(self, f):
        raw = f.read(_LEN.size)
        if not raw or len(raw) < _LEN.size:
            return None
        (length,) = _LEN.unpack(raw)
        body = f.read(length)
        if body is None or len(body) != length:
            return None
        return body

    def _write_frame(self, sock, body):
        sock.sendall(_LEN.pack(len(body)) + body)

    def _serve(self, sock):
        f = sock.makefile("rb")
        try:
            hello = self._read_frame(f)
            if hello is None:
                return
            if len(hello) != 5 or hello[:4] != MAGIC or hello[4] != VERSION:
                message = f"protocol version mismatch: server speaks {MAGIC.decode()} v{VERSION}"
                self._write_frame(sock, b"\x01" + serialize_value(message))
                return
            self._write_frame(sock, b"\x00" + MAGIC + bytes([VERSION]))
            while True:
                frame = self._read_frame(f)
                if frame is None:
                    return
                self._write_frame(sock, self._handle_frame(frame))
        except OSError:
            return
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _handle_frame(self, frame):
        try:
            if len(frame) < _METHOD.size:
                raise IgnisError("malformed frame: missing method id")
            (method_id,) = _METHOD.unpack_from(frame, 0)
            args = deserialize_value(frame[_METHOD.size:])
            if not isinstance(args, list):
                raise IgnisError("malformed frame: arguments must be a list")
            name = _NAMES.get(method_id)
            if name is None:
                raise IgnisError(f"unknown method id {method_id}")
            with self._lock:
                result = self._dispatch(name, args)
            return b"\x00" + serialize_value(result)
        except BaseException as exc:
            return b"\x01" + serialize_value(f"{type(exc).__name__}: {exc}")

    # -- method dispatch ------------------------------------------------------------

    def _dispatch(self, name, args):
        s = self.session
        if name == "ping":
            return "pong"
        if name == "start":
            s.start()  # raises "already started" when serving a started session
            return None
        if name == "stop":
            s.stop()
            return None
        if name == "createCluster":
            props = None
            if args and args[0] is not None:
                from .model import Properties

                props = Properties({k: v for k, v in args[0]})
            return self._put(s.createCluster(props))
        if name == "createWorker":
            cluster = self._get(args[0])
            return self._put(cluster.createWorker(
                args[1], args[2] if args[2] else None, bool(args[3])))

        obj = self._get(args[0])
        rest = args[1:]

        worker_methods = {
            "parallelize": lambda w: self._put(w.parallelize(rest[0], rest[1] or None)),
            "textFile": lambda w: self._put(w.textFile(rest[0], rest[1] or None)),
            "partitionJsonFile": lambda w: self._put(w.partitionJsonFile(rest[0])),
            "partitionObjectFile": lambda w: self._put(w.partitionObjectFile(rest[0])),
            "importData": lambda w: self._put(w.importData(self._get(rest[0]))),
            "loadLibrary": lambda w: w.loadLibrary(rest[0]),
            "call": lambda w: self._put(w.call(
                _src(rest[0]), self._get(rest[1]) if rest[1] else None)),
            "voidCall": lambda w: w.voidCall(
                _src(rest[0]), self._get(rest[1]) if rest[1] else None),
        }
        if name in worker_methods:
            return worker_methods[name](obj)

        df = obj
        if name in ("map", "filter", "flatmap", "keyBy", "mapValues", "mapPartitions",
                    "groupBy", "reduceByKey"):
            return self._put(getattr(df, name)(_src(rest[0])))
        if name in ("keys", "values", "groupByKey", "distinct", "countByKey",
                    "countByValue"):
            return self._put(getattr(df, name)())
        if name == "aggregateByKey":
            return self._put(df.aggregateByKey(rest[0], _src(rest[1]), _src(rest[2])))
        if name == "sortBy":
            return self._put(df.sortBy(_src(rest[0]), bool(rest[1])))
        if name in ("sort", "sortByKey"):
            return self._put(getattr(df, name)(bool(rest[0])))
        if name in ("union", "join"):
            return self._put(getattr(df, name)(self._get(rest[0])))
        if name == "sample":
            return self._put(df.sample(bool(rest[0]), rest[1], rest[2]))
        if name == "sampleByKey":
            return self._put(df.sampleByKey(rest[0], rest[1], bool(rest[2])))
        if name == "takeSample":
            return df.takeSample(rest[0], rest[1])
        if name == "count":
            return df.count()
        if name in ("max", "min"):
            return getattr(df, name)(_src(rest[0]) if rest and rest[0] else None)
        if name in ("reduce", "treeReduce"):
            return getattr(df, name)(_src(rest[0]))
        if name in ("aggregate", "treeAggregate"):
            return getattr(df, name)(rest[0], _src(rest[1]), _src(rest[2]))
        if name == "fold":
            return df.fold(rest[0], _src(rest[1]))
        if name == "repartition":
            return self._put(df.repartition(rest[0]))
        if name == "partitionBy":
            return self._put(df.partitionBy(_src(rest[0]), rest[1]))
        if name in ("collect", "collectAsMap"):
            return df.collect()  # the client shapes collectAsMap into a map
        if name in ("take", "top"):
            return getattr(df, name)(rest[0])
        if name == "persist":
            df.persist(rest[0] if rest and rest[0] else "rawmemory",
                       rest[1] if len(rest) > 1 and rest[1] is not None else None)
            return args[0]
        if name in ("cache", "unpersist", "uncache"):
            getattr(df, name)()
            return args[0]
        if name in ("saveAsTextFile", "saveAsJsonFile", "saveAsObjectFile"):
            return getattr(df, name)(rest[0])
        if name == "iterate":
            body, iterations, conv, epsilon, final = rest
            return self._put(df.iterate(
                _src(body), iterations=iterations,
                convergence=_src(conv) if conv else None,
                epsilon=epsilon, finalize=_src(final) if final else None))
        raise IgnisError(f"method {name!r} is not dispatchable")


def serve_rpc(session, port=0, host="127.0.0.1"):
    """Start serving a started session; returns the server (with .port)."""
    session.backend.require_started()
    return RpcServer(session, port, host)


def surface_parity_report():
    """(missing_rpc, extra_rpc): drift between API surface and method table."""
    api_names = set(API_SURFACE)
    rpc_names = set(METHOD_IDS) - {"ping"}
    return sorted(api_names - rpc_names), sorted(rpc_names - api_names)
