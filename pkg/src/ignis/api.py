"""User-facing driver API.

A driver program builds the job hierarchy (session, clusters, workers), then
describes dataflow over IDataFrame handles. Transformations record lazily;
actions trigger the backend. Operator logic is supplied as an ISource: a
registered function name, an importable module-level function, or a text
lambda such as "lambda x: x % 2 == 0"; captured variables added to the source
are readable from the executor context.

    with Ignis(props) as ignis:
        cluster = ignis.createCluster()
        worker = cluster.createWorker("demo")
        df = worker.parallelize(list(range(100)), 4)
        total = df.map("lambda x: x * 2").reduce("lambda a, b: a + b")

Every method marked @api_method is also callable remotely through the RPC
service (see ignis.rpc); the two surfaces are kept identical by construction.
"""

import os

from .errors import IgnisError
from .model import Properties
from .registry import IDENTITY, PAIR_KEY, SourceRef
from .scheduler import Backend
from .storage import StoreKind

API_SURFACE = {}


def api_method(fn):
    """Mark a driver call as part of the scriptable (and RPC) surface."""
    API_SURFACE[fn.__name__] = fn
    return fn


def _source(target, params=None):
    if target is None:
        return None
    ref = SourceRef.of(target.ref if isinstance(target, ISource) else target)
    if params:
        merged = dict(ref.params)
        merged.update(params)
        ref = SourceRef(ref.kind, ref.target, merged)
    return ref


class ISource:
    """A function reference plus captured variables sent to executors."""

    def __init__(self, target, **params):
        self.ref = SourceRef.of(target, params or None)

    def addParam(self, name, value):
        self.ref.add_param(name, value)
        return self

    def __repr__(self):
        return f"ISource({self.ref!r})"


class Ignis:
    """The driver session; owns the backend and every executor process."""

    def __init__(self, properties=None):
        props = properties.copy() if properties else Properties()
        env = os.environ.get("IGNIS_PROPERTIES")
        if env:
            import json

            for k, v in json.loads(env).items():
                props._apply(k, v)
        self.properties = props
        self.backend = Backend(props)

    @api_method
    def start(self):
        self.backend.start()
        self.properties.seal()
        return self

    @api_method
    def stop(self):
        self.backend.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False

    @property
    def started(self):
        return self.backend.state == "Started"

    @api_method
    def createCluster(self, properties=None):
        props = properties.copy() if properties else self.properties.copy()
        desc = self.backend.create_cluster(props)
        return ICluster(self, desc)

    # introspection used by tests, benchmarks and the RPC service
    def graphDump(self):
        return self.backend.dump()

    def stats(self):
        return dict(self.backend.stats)

    def recoveryStats(self):
        return self.backend.last_recovery


class ICluster:
    def __init__(self, session, desc):
        self._session = session
        self.desc = desc
        self.id = desc.id

    @property
    def properties(self):
        return self.desc.properties

    @api_method
    def createWorker(self, namespace="", instances=None, shared=False):
        runtime = self._session.backend.create_worker(
            self.desc, namespace, instances, shared)
        return IWorker(self._session, self, runtime)


class IWorker:
    def __init__(self, session, cluster, runtime):
        self._session = session
        self.cluster = cluster
        self.runtime = runtime
        self.id = runtime.id

    @property
    def _backend(self):
        return self._session.backend

    def _df(self, node):
        return IDataFrame(self._session, self, node)

    # -- data sources ---------------------------------------------------------------

    @api_method
    def parallelize(self, data, partitions=None):
        n = partitions or self.runtime.props.get_int("ignis.partitions")
        node = self._backend.record(self.id, "source", "parallelize", (),
                                    params={"data": list(data), "partitions": n})
        return self._df(node)

    @api_method
    def textFile(self, path, minPartitions=None):
        node = self._backend.record(self.id, "source", "textFile", (),
                                    params={"path": path, "minPartitions": minPartitions})
        return self._df(node)

    @api_method
    def partitionJsonFile(self, path):
        node = self._backend.record(self.id, "source", "partitionJsonFile", (),
                                    params={"paths": self._part_files(path, ".json")})
        return self._df(node)

    @api_method
    def partitionObjectFile(self, path):
        node = self._backend.record(self.id, "source", "partitionObjectFile", (),
                                    params={"paths": self._part_files(path, ".ignp")})
        return self._df(node)

    def _part_files(self, path, suffix):
        if os.path.isdir(path):
            return sorted(
                os.path.join(path, f) for f in os.listdir(path)
                if f.startswith("part-") and f.endswith(suffix))
        return [path]

    # -- cross-worker and external code ------------------------------------------------

    @api_method
    def importData(self, dataframe):
        node = self._backend.record(self.id, "import", "importData",
                                    (dataframe._node.id,))
        return self._df(node)

    @api_method
    def loadLibrary(self, target):
        return self._backend.load_library(self.id, target)

    @api_method
    def call(self, fn, dataframe=None, **params):
        deps = (dataframe._node.id,) if dataframe is not None else ()
        node = self._backend.record(self.id, "transform", "call", deps,
                                    source=_source(fn, params))
        return self._df(node)

    @api_method
    def voidCall(self, fn, dataframe=None, **params):
        deps = (dataframe._node.id,) if dataframe is not None else ()
        node = self._backend.record(self.id, "action", "voidCall", deps,
                                    source=_source(fn, params))
        return self._backend.run_action(node)

    # -- introspection ---------------------------------------------------------------------

    def executorPids(self):
        return self._backend.executor_pids(self.id)

    def executorMetrics(self):
        return self._backend.executor_metrics(self.id)


class IDataFrame:
    """A distributed dataframe handle: records transforms, runs actions."""

    def __init__(self, session, worker, node):
        self._session = session
        self._worker = worker
        self._node = node

    @property
    def _backend(self):
        return self._session.backend

    @property
    def taskId(self):
        return self._node.id

    @property
    def worker(self):
        return self._worker

    def _record(self, op, source=None, params=None, kind="transform", extra_deps=()):
        node = self._backend.record(
            self._worker.id, kind, op, (self._node.id,) + tuple(extra_deps),
            source=source, params=params)
        return IDataFrame(self._session, self._worker, node)

    def _action(self, op, source=None, params=None):
        node = self._backend.record(self._worker.id, "action", op, (self._node.id,),
                                    source=source, params=params)
        return self._backend.run_action(node)

    # -- conversion ------------------------------------------------------------------------

    @api_method
    def map(self, fn):
        return self._record("map", _source(fn))

    @api_method
    def filter(self, fn):
        return self._record("filter", _source(fn))

    @api_method
    def flatmap(self, fn):
        return self._record("flatmap", _source(fn))

    @api_method
    def keyBy(self, fn):
        return self._record("keyBy", _source(fn))

    @api_method
    def mapValues(self, fn):
        return self._record("mapValues", _source(fn))

    @api_method
    def keys(self):
        return self._record("keys")

    @api_method
    def values(self):
        return self._record("values")

    @api_method
    def mapPartitions(self, fn):
        return self._record("mapPartitions", _source(fn))

    # -- grouping, sorting, sql ------------------------------------------------------------

    @api_method
    def groupByKey(self):
        return self._record("groupByKey", kind="transform")

    @api_method
    def groupBy(self, fn):
        return self.keyBy(fn).groupByKey()

    @api_method
    def reduceByKey(self, fn):
        return self._record("reduceByKey", _source(fn), kind="transform")

    @api_method
    def aggregateByKey(self, zero, seqOp, combOp):
        return self._record("aggregateByKey", None,
                            params={"zero": zero, "seq": _source(seqOp),
                                    "comb": _source(combOp)}, kind="transform")

    @api_method
    def sortBy(self, fn, ascending=True):
        return self._record("sortBy", _source(fn), params={"ascending": ascending},
                            kind="transform")

    @api_method
    def sort(self, ascending=True):
        return self._record("sortBy", IDENTITY, params={"ascending": ascending},
                            kind="transform")

    @api_method
    def sortByKey(self, ascending=True):
        return self._record("sortBy", PAIR_KEY, params={"ascending": ascending},
                            kind="transform")

    @api_method
    def union(self, other):
        return self._record("union", kind="transform", extra_deps=(other._node.id,))

    @api_method
    def join(self, other):
        return self._record("join", kind="transform", extra_deps=(other._node.id,))

    @api_method
    def distinct(self):
        return self._record("distinct", kind="transform")

    # -- math -------------------------------------------------------------------------------

    @api_method
    def sample(self, withReplacement, fraction, seed):
        if not withReplacement and not 0.0 <= fraction <= 1.0:
            raise IgnisError("fraction must be within [0, 1] for Bernoulli sampling")
        return self._record("sample", params={"withReplacement": bool(withReplacement),
                                              "fraction": float(fraction),
                                              "seed": int(seed)})

    @api_method
    def sampleByKey(self, fractions, seed, withReplacement=False):
        pairs = sorted(fractions.items()) if isinstance(fractions, dict) else list(fractions)
        sampler = ISource("builtin.sample_by_key",
                          fractions=[(k, float(f)) for k, f in pairs],
                          seed=int(seed), withReplacement=bool(withReplacement))
        return self.groupByKey().flatmap(sampler)

    @api_method
    def takeSample(self, n, seed):
        return self._action("takeSample", params={"n": int(n), "seed": int(seed)})

    @api_method
    def count(self):
        return self._action("count")

    @api_method
    def max(self, fn=None):
        return self._action("max", _source(fn) if fn else None)

    @api_method
    def min(self, fn=None):
        return self._action("min", _source(fn) if fn else None)

    @api_method
    def countByKey(self):
        return self._record("countByKey", kind="transform")

    @api_method
    def countByValue(self):
        return self._record("countByValue", kind="transform")

    # -- reductions ----------------------------------------------------------------------------

    @api_method
    def reduce(self, fn):
        return self._action("reduce", _source(fn), params={"tree": False})

    @api_method
    def treeReduce(self, fn):
        return self._action("reduce", _source(fn), params={"tree": True})

    @api_method
    def aggregate(self, zero, seqOp, combOp):
        return self._action("aggregate", params={"zero": zero, "seq": _source(seqOp),
                                                 "comb": _source(combOp), "tree": False})

    @api_method
    def treeAggregate(self, zero, seqOp, combOp):
        return self._action("aggregate", params={"zero": zero, "seq": _source(seqOp),
                                                 "comb": _source(combOp), "tree": True})

    @api_method
    def fold(self, zero, fn):
        src = _source(fn)
        return self._action("aggregate", params={"zero": zero, "seq": src, "comb": src,
                                                 "tree": False})

    # -- balancing --------------------------------------------------------------------------------

    @api_method
    def repartition(self, n):
        if n < 1:
            raise IgnisError("repartition needs at least one partition")
        return self._record("repartition", params={"n": int(n)}, kind="transform")

    @api_method
    def partitionBy(self, fn, n):
        if n < 1:
            raise IgnisError("partitionBy needs at least one partition")
        return self._record("partitionBy", _source(fn), params={"n": int(n)}, kind="transform")

    # -- retrieval ---------------------------------------------------------------------------------

    @api_method
    def collect(self):
        return self._action("collect")

    @api_method
    def collectAsMap(self):
        return dict(self._action("collect"))

    @api_method
    def take(self, n):
        return self._action("take", params={"n": int(n)})

    @api_method
    def top(self, n):
        return self._action("top", params={"n": int(n)})

    # -- persistence --------------------------------------------------------------------------------

    @api_method
    def persist(self, storage="rawmemory", level=None):
        if isinstance(storage, StoreKind):
            tier = storage
        else:
            lvl = level if level is not None else \
                self._worker.runtime.props.get_int("ignis.partition.compression")
            if storage == "memory":
                tier = StoreKind.memory()
            elif storage == "rawmemory":
                tier = StoreKind.raw(lvl)
            elif storage == "disk":
                tier = StoreKind.disk(
                    lvl, self._worker.runtime.props.get("ignis.partition.directory"))
            else:
                raise IgnisError(f"unknown storage tier {storage!r}")
        self._backend.persist(self._node, tier)
        return self

    @api_method
    def cache(self):
        self._backend.persist(self._node, StoreKind.memory())
        return self

    @api_method
    def unpersist(self):
        self._backend.unpersist(self._node)
        return self

    @api_method
    def uncache(self):
        self._backend.unpersist(self._node)
        return self

    # -- I/O ------------------------------------------------------------------------------------------

    @api_method
    def saveAsTextFile(self, path):
        return self._action("saveAsTextFile", params={"path": path})

    @api_method
    def saveAsJsonFile(self, path):
        return self._action("saveAsJsonFile", params={"path": path})

    @api_method
    def saveAsObjectFile(self, path):
        return self._action("saveAsObjectFile", params={"path": path})

    # -- executor-resident iteration ---------------------------------------------------------------------

    @api_method
    def iterate(self, body, iterations=None, convergence=None, epsilon=None,
                finalize=None, **params):
        if iterations is None and convergence is None:
            raise IgnisError("iterate needs a fixed iteration count or a convergence fn")
        if iterations is None and epsilon is None:
            epsilon = 0.0
        node = self._backend.record(
            self._worker.id, "transform", "iterate", (self._node.id,),
            params={"body": _source(body, params),
                    "conv": _source(convergence) if convergence else None,
                    "final": _source(finalize) if finalize else None,
                    "iterations": iterations, "epsilon": epsilon})
        return IDataFrame(self._session, self._worker, node)

    def iterateResult(self):
        """(iterations ran, per-iteration convergence scalars) of the last run."""
        return self._node.params.get("last_result")

    def __repr__(self):
        return f"IDataFrame(node {self._node.id}, op {self._node.op!r})"
