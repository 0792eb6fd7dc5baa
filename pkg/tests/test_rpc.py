"""RPC service tests: protocol, parity, remote/local equivalence."""

import pytest

from conftest import UDF_LIBRARY
from ignis.errors import ProtocolVersionError, RemoteError
from ignis.rpc import METHOD_IDS, serve_rpc, surface_parity_report
from ignis.values import serialize_value
from rpc_client import RpcClient, lambda_source, registry_source


@pytest.fixture(scope="module")
def server(session):
    srv = serve_rpc(session)
    yield srv
    srv.close()


@pytest.fixture()
def client(server):
    c = RpcClient("127.0.0.1", server.port)
    yield c
    c.close()


def test_api_parity_is_exact():
    missing, extra = surface_parity_report()
    assert missing == [] and extra == []


def test_handshake_and_ping(client):
    assert client.call("ping") == "pong"


def test_version_mismatch_rejected(server):
    with pytest.raises(ProtocolVersionError):
        RpcClient("127.0.0.1", server.port, version=2)


def test_malformed_frame_survives_connection(client):
    status, message = client.send_raw(b"\x01")  # too short for a method id
    assert status == 1
    assert "malformed" in message
    assert client.call("ping") == "pong"  # connection still healthy


def test_unknown_method_id_named_in_error(client):
    status, message = client.call_id(9999, [])
    assert status == 1
    assert "9999" in message


def test_double_start_via_rpc_is_error(client):
    with pytest.raises(RemoteError):
        client.call("start")


def test_remote_equals_local_roundtrip(session, client):
    cluster = client.call("createCluster", None)
    worker = client.call("createWorker", cluster, "rpc-ns", 2, False)
    data = list(range(20))
    df = client.call("parallelize", worker, data, 4)
    mapped = client.call("map", df, lambda_source("lambda x: x * 3"))
    remote = client.call("collect", mapped)

    local_worker = session.createCluster().createWorker("rpc-local", instances=2)
    local = local_worker.parallelize(data, 4).map("lambda x: x * 3").collect()
    assert remote == local == [x * 3 for x in data]


def test_remote_engine_error_surfaces_with_message(client):
    cluster = client.call("createCluster", None)
    worker = client.call("createWorker", cluster, "rpc-err", 1, False)
    df = client.call("parallelize", worker, [], 2)
    with pytest.raises(RemoteError) as ei:
        client.call("reduce", df, lambda_source("lambda a, b: a + b"))
    assert "empty" in str(ei.value).lower()


def test_remote_collect_empty(client):
    cluster = client.call("createCluster", None)
    worker = client.call("createWorker", cluster, "rpc-empty", 1, False)
    df = client.call("parallelize", worker, [], 2)
    assert client.call("collect", df) == []


def test_remote_wordcount_pipeline(client):
    cluster = client.call("createCluster", None)
    worker = client.call("createWorker", cluster, "rpc-wc", 2, False)
    client.call("loadLibrary", worker, "ignis.workloads")
    lines = ["a b a", "b c", "a"]
    df = client.call("parallelize", worker, lines, 2)
    words = client.call("flatmap", df, registry_source("wl.split_words"))
    pairs = client.call("map", words, lambda_source("lambda w: (w, 1)"))
    counted = client.call("reduceByKey", pairs, lambda_source("lambda a, b: a + b"))
    got = sorted(client.call("collect", counted))
    assert got == [("a", 3), ("b", 2), ("c", 1)]


def test_remote_registry_function_with_params(client):
    cluster = client.call("createCluster", None)
    worker = client.call("createWorker", cluster, "rpc-p", 2, False)
    client.call("loadLibrary", worker, UDF_LIBRARY)
    df = client.call("parallelize", worker, [1, 2, 3], 2)
    scaled = client.call("map", df, registry_source("t.scaled", factor=7))
    assert client.call("collect", scaled) == [7, 14, 21]


def test_remote_actions_and_persistence(client):
    cluster = client.call("createCluster", None)
    worker = client.call("createWorker", cluster, "rpc-a", 2, False)
    df = client.call("parallelize", worker, list(range(50)), 4)
    assert client.call("count", df) == 50
    assert client.call("take", df, 3) == [0, 1, 2]
    assert client.call("top", df, 2) == [49, 48]
    assert client.call("max", df, None) == 49
    cached = client.call("cache", df)
    assert client.call("count", cached) == 50
    assert client.call("reduce", df, lambda_source("lambda a, b: a + b")) == 1225
    assert client.call("unpersist", df) == df


def test_method_ids_are_stable_and_unique():
    assert len(set(METHOD_IDS.values())) == len(METHOD_IDS)
    assert METHOD_IDS["ping"] == 1
    assert min(METHOD_IDS.values()) == 1


def test_concurrent_clients_serialize(server):
    import threading

    results = []

    def one(i):
        c = RpcClient("127.0.0.1", server.port)
        try:
            cluster = c.call("createCluster", None)
            worker = c.call("createWorker", cluster, f"rpc-c{i}", 1, False)
            df = c.call("parallelize", worker, [i] * 5, 2)
            results.append((i, c.call("count", df)))
        finally:
            c.close()

    threads = [threading.Thread(target=one, args=(i,)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=60)
    assert sorted(results) == [(0, 5), (1, 5), (2, 5)]
