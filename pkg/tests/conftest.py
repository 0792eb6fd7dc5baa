import os

import pytest

from ignis import Ignis, Properties


def engine_properties(**overrides):
    props = Properties()
    props.set("ignis.transport.collectiveTimeout", "25")
    props.set("ignis.transport.connectTimeout", "8")
    props.set("ignis.transport.probeInterval", "0.2")
    props.set("ignis.scheduler.heartbeatInterval", "1")
    for k, v in overrides.items():
        props.set(k, v)
    return props


UDF_LIBRARY = os.path.join(os.path.dirname(__file__), "udfs.py")

# module-reference sources ("udfs:double") must be importable inside the
# executor processes; they inherit the environment, so extend PYTHONPATH
_TESTS_DIR = os.path.dirname(__file__)
if _TESTS_DIR not in os.environ.get("PYTHONPATH", ""):
    os.environ["PYTHONPATH"] = _TESTS_DIR + os.pathsep + os.environ.get("PYTHONPATH", "")


@pytest.fixture(scope="module")
def session():
    ignis = Ignis(engine_properties()).start()
    yield ignis
    ignis.stop()


@pytest.fixture(scope="module")
def cluster(session):
    return session.createCluster()


@pytest.fixture(scope="module")
def workers(cluster):
    """One worker per executor count used by the oracle suites."""
    out = {}
    for p in (1, 2, 4):
        w = cluster.createWorker(f"t{p}", instances=p)
        w.loadLibrary(UDF_LIBRARY)
        w.loadLibrary("ignis.workloads")
        out[p] = w
    return out


@pytest.fixture(scope="module")
def worker4(workers):
    return workers[4]
