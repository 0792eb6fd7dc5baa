#!/usr/bin/env python3
# Serving the driver API over RPC. Any client that speaks the frame protocol
# can drive the engine; the TypeScript client under frontend/ is the shipped
# one, and this demo drives the same protocol from Python for illustration.

import socket
import struct

from ignis import Ignis, Properties
from ignis.rpc import METHOD_IDS, serve_rpc
from ignis.values import deserialize_value, serialize_value

with Ignis(Properties()) as ignis:
    server = serve_rpc(ignis)
    print("RPC server on port", server.port)

    # a minimal client: handshake, then length-framed method calls
    sock = socket.create_connection(("127.0.0.1", server.port))
    f = sock.makefile("rb")

    def frame(body):
        sock.sendall(struct.pack("<I", len(body)) + body)
        (n,) = struct.unpack("<I", f.read(4))
        return f.read(n)

    hello = frame(b"IGNR\x01")  # handshake reply: status, magic, version
    assert hello[0] == 0 and hello[1:5] == b"IGNR"
    print("handshake ok, server protocol version", hello[5])

    def call(method, *args):
        reply = frame(struct.pack("<H", METHOD_IDS[method]) + serialize_value(list(args)))
        status, payload = reply[0], deserialize_value(reply[1:])
        assert status == 0, payload
        return payload

    cluster = call("createCluster", None)
    worker = call("createWorker", cluster, "remote", 2, False)
    df = call("parallelize", worker, list(range(10)), 4)
    doubled = call("map", df, ["lambda", (["x"], "x * 2"), []])
    print("remote collect:", call("collect", doubled))
    print("remote reduce :", call("reduce", doubled, ["lambda", (["a", "b"], "a + b"), []]))
    sock.close()
    server.close()
