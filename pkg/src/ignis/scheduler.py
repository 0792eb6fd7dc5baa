"""Backend: records driver calls as a lazy task graph and runs them on demand.

Nothing executes at record time. When an action fires, the planner walks the
dependency graph, stops at valid cache entries, fuses every chain of narrow
transforms into a single pass per partition, and dispatches the resulting
stages to the worker's executor processes over the control plane. Wide
operators and driver data exchange run inside those stages through the
communicators; the backend participates itself (scatter for parallelize,
gather for collect) through the lazily-built driver communicator.

Failure handling: executors are probed before every action and whenever a
stage errors with a transport-kind failure. Recovery spawns a replacement
process, rebuilds every communicator that contained the lost member (fresh id,
epoch+1), restores cached shares from ring replicas (so cached upstream work
is never recomputed), and retries the action. Losing every executor of a
worker, or exceeding the retry budget, raises recovery-exhausted with the
original cause attached.

The job hierarchy readiness rule holds: every worker has an executor readiness
task and every cluster a container readiness task, executed as final
dependencies of every action (a ping sweep over the processes).
"""

import base64
import json
import os
import subprocess
import sys
import threading
import time

from .comm import (
    Communicator,
    base_spec,
    driver_spec,
    inter_spec,
    rebuilt_spec,
    replaced_spec,
)
from .errors import (
    IgnisError,
    IgnisIoError,
    InvalidSessionError,
    PeerLostError,
    RecoveryExhaustedError,
    ResultTooLargeError,
    SameWorkerError,
    TransportError,
    UnknownDependencyError,
    RECOVERABLE_KINDS,
    error_from_kind,
)
from .model import ClusterDesc, WorkerDesc
from .operators import partitions_of_rank, splitmix64
from .registry import KEY_ROUTING_FINGERPRINTS
from .storage import StoreKind, container_values, new_partition, partition_bytes
from .transport import Endpoint, ProcessAddr, probe
from .values import deserialize_value, serialize_value, sorted_values

NARROW_OPS = {"map", "filter", "flatmap", "keyBy", "mapValues", "keys", "values",
              "mapPartitions", "sample"}

_PARTITIONER_PRESERVING = {"filter", "mapValues", "sample"}


class TaskNode:
    __slots__ = ("id", "kind", "op", "source", "params", "deps", "worker_id", "state",
                 "cache_tier", "cache_valid", "live_replicas", "partitioner", "exec_count")

    def __init__(self, node_id, kind, op, deps, worker_id, source=None, params=None):
        self.id = node_id
        self.kind = kind          # container | executor | source | transform | action | import
        self.op = op
        self.source = source      # SourceRef or None
        self.params = params or {}
        self.deps = tuple(deps)
        self.worker_id = worker_id
        self.state = "Pending"
        self.cache_tier = None
        self.cache_valid = False
        self.live_replicas = set()
        self.partitioner = None   # ("hash", fingerprint, n)
        self.exec_count = 0

    @property
    def cached(self):
        return self.cache_tier is not None

    def __repr__(self):
        return f"TaskNode({self.id} {self.op})"


class ExecutorProc:
    """One executor process; mutated in place when replaced after a failure."""

    __slots__ = ("addr", "proc", "pid")

    def __init__(self, addr, proc, pid):
        self.addr = addr
        self.proc = proc
        self.pid = pid

    @property
    def ident(self):
        return self.addr.ident


class WorkerRuntime:
    def __init__(self, desc, cluster_id, namespace, props, executors, owns_procs=True):
        self.desc = desc
        self.id = desc.id
        self.cluster_id = cluster_id
        self.namespace = namespace
        self.props = props
        self.executors = executors      # list[ExecutorProc], rank-ordered
        self.owns_procs = owns_procs
        self.base = None                # CommSpec
        self.driver = None              # CommSpec
        self.driver_comm = None         # backend-side Communicator
        self.executor_node = None       # readiness TaskNode id
        self.libraries = []             # loadLibrary targets, replayed on recovery

    @property
    def size(self):
        return len(self.executors)


class Stage:
    """A fused unit of executor work: input, narrow steps, one terminal."""

    def __init__(self, worker_id, input_spec, steps, terminal, out_node=None,
                 cache_tier=None, replicate=False, covers=()):
        self.worker_id = worker_id
        self.input_spec = input_spec
        self.steps = list(steps)
        self.terminal = terminal
        self.out_node = out_node
        self.cache_tier = cache_tier
        self.replicate = replicate
        self.covers = list(covers)        # node ids whose compute runs here
        self.per_rank_input = None        # rank -> input spec override
        self.per_rank_terminal = None     # rank -> terminal override

    def value_for(self, rank):
        inp = self.per_rank_input[rank] if self.per_rank_input else self.input_spec
        term = self.per_rank_terminal[rank] if self.per_rank_terminal else self.terminal
        tier = None
        if self.cache_tier is not None:
            tier = [self.cache_tier.kind, self.cache_tier.level, self.cache_tier.directory]
        return [self.worker_id, inp, self.steps, term, self.out_node, tier, self.replicate]


class Backend:
    def __init__(self, props):
        self.props = props
        self.endpoint = None
        self.state = "Stopped"
        self.clusters = {}
        self.workers = {}
        self.graph = {}
        self._consumers = {}     # node id -> number of recorded consumers
        self._cached_nodes = set()
        self._next_node = 0
        self._next_comm = 0x1000
        self._next_id = 0
        self._port_cursor = 1
        self._lock = threading.RLock()
        self._hello_buffer = []
        self._monitor = None
        self._monitor_stop = threading.Event()
        self._suspect = {}
        self.stats = {"actions": 0, "recoveries": 0, "transport_failures": 0}
        self.last_recovery = None  # {"uncached_lost": [...], "recomputed": [...], ...}

    # -- lifecycle -------------------------------------------------------------------

    def start(self):
        if self.state == "Started":
            raise IgnisError("session already started")
        self.endpoint = Endpoint("127.0.0.1", ports=self.props.ports())
        self.state = "Started"
        interval = self.props.get_float("ignis.scheduler.heartbeatInterval")
        self._monitor_stop.clear()
        self._monitor = threading.Thread(target=self._heartbeat_loop, args=(interval,),
                                         daemon=True, name="ignis-heartbeat")
        self._monitor.start()
        return self

    def stop(self):
        if self.state == "Stopped":
            return
        self._monitor_stop.set()
        for runtime in self.workers.values():
            if not runtime.owns_procs:
                continue
            for ex in runtime.executors:
                try:
                    self.endpoint.request(ex.ident, ["shutdown"], timeout=3.0)
                except Exception:
                    pass
        for runtime in self.workers.values():
            if not runtime.owns_procs:
                continue
            for ex in runtime.executors:
                if ex.proc is None:
                    continue
                try:
                    ex.proc.wait(timeout=5.0)
                except Exception:
                    ex.proc.kill()
                    try:
                        ex.proc.wait(timeout=3.0)
                    except Exception:
                        pass
        self.endpoint.close()
        self.state = "Stopped"

    def require_started(self):
        if self.state != "Started":
            raise InvalidSessionError("session is not started")

    def _heartbeat_loop(self, interval):
        misses_allowed = self.props.get_int("ignis.scheduler.heartbeatMisses")
        while not self._monitor_stop.wait(interval):
            for runtime in list(self.workers.values()):
                for ex in list(runtime.executors):
                    if probe(ex.ident, timeout=0.5):
                        self._suspect.pop(ex.ident, None)
                    else:
                        self._suspect[ex.ident] = self._suspect.get(ex.ident, 0) + 1
                        if self._suspect[ex.ident] >= misses_allowed:
                            self.endpoint.mark_dead(ex.ident)

    # -- id allocation ------------------------------------------------------------------

    def _node_id(self):
        self._next_node += 1
        return self._next_node

    def _comm_id(self):
        self._next_comm += 1
        return self._next_comm

    def _fresh_id(self, prefix):
        self._next_id += 1
        return f"{prefix}{self._next_id}"

    def _connect_timeout(self):
        return self.props.get_float("ignis.transport.connectTimeout")

    def _task_timeout(self):
        return max(self.props.get_float("ignis.transport.collectiveTimeout") * 2, 60.0)

    # -- job hierarchy ---------------------------------------------------------------------

    def create_cluster(self, props):
        self.require_started()
        cluster = ClusterDesc(self._fresh_id("cluster"), props)
        container = TaskNode(self._node_id(), "container", "containerReady", (), None)
        self.graph[container.id] = container
        self.clusters[cluster.id] = (cluster, container.id)
        return cluster

    def create_worker(self, cluster, namespace, instances=None, shared=False):
        self.require_started()
        cluster_desc, container_node = self.clusters[cluster.id]
        props = cluster_desc.properties
        n = instances or props.get_int("ignis.executor.instances")
        desc = WorkerDesc(self._fresh_id("w"), n, shared)
        cluster_desc.workers.append(desc)

        if shared:
            donor = next(
                (w for w in self.workers.values()
                 if w.cluster_id == cluster.id and w.owns_procs and w.size == n), None)
            if donor is None:
                raise IgnisError("shared mode needs an existing worker of matching size")
            runtime = WorkerRuntime(desc, cluster.id, namespace, props, donor.executors,
                                    owns_procs=False)
        else:
            executors = [self._spawn_executor(desc.id, rank, n, namespace, props)
                         for rank in range(n)]
            runtime = WorkerRuntime(desc, cluster.id, namespace, props, executors)

        self.workers[desc.id] = runtime
        node = TaskNode(self._node_id(), "executor", "executorReady", (container_node,),
                        desc.id)
        self.graph[node.id] = node
        runtime.executor_node = node.id

        spec = base_spec(desc, [ex.addr for ex in runtime.executors], self._comm_id())
        runtime.base = spec
        self._build_comm_everywhere(runtime, spec, base_for=f"base:{desc.id}", barrier=True)
        return runtime

    def _spawn_executor(self, worker_id, rank, instances, namespace, props,
                        avoid_ports=()):
        cursor = self._port_cursor
        self._port_cursor += 3
        blob = base64.b64encode(json.dumps(props.to_dict()).encode("utf-8")).decode("ascii")
        cmd = [
            sys.executable, "-m", "ignis.agent",
            "--driver-host", self.endpoint.host,
            "--driver-port", str(self.endpoint.port),
            "--worker", worker_id,
            "--rank", str(rank),
            "--executors", str(instances),
            "--namespace", namespace or "",
            "--cursor", str(cursor),
            "--avoid", ",".join(str(p) for p in avoid_ports),
            "--props", blob,
        ]
        proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL)
        hello = self._await_hello(worker_id, rank, timeout=self._connect_timeout() + 15)
        _, _, _, host, port, pid = hello
        return ExecutorProc(ProcessAddr(host, port, worker_id, rank), proc, pid)

    def _await_hello(self, worker_id, rank, timeout):
        import queue as queue_mod

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            for i, msg in enumerate(self._hello_buffer):
                if msg[1] == worker_id and msg[2] == rank:
                    return self._hello_buffer.pop(i)
            try:
                _, seq, value = self.endpoint.control.get(
                    timeout=max(0.05, min(0.5, deadline - time.monotonic())))
            except queue_mod.Empty:
                continue
            if seq == 0 and value and value[0] == "hello":
                self._hello_buffer.append(value)
        raise IgnisError(f"executor {worker_id}/{rank} never said hello")

    def _build_comm_everywhere(self, runtime, spec, base_for, barrier):
        handles = [self.endpoint.send_request(
            ex.ident, ["build_comm", spec.to_value(), barrier, base_for],
            connect_timeout=self._connect_timeout())
            for ex in runtime.executors]
        self._await_all(handles)

    # -- graph recording -----------------------------------------------------------------------

    def record(self, worker_id, kind, op, deps, source=None, params=None):
        self.require_started()
        with self._lock:
            for d in deps:
                if d not in self.graph:
                    raise UnknownDependencyError(f"dependency {d} was never recorded")
            runtime = self.workers[worker_id]
            all_deps = tuple(deps) if deps else (runtime.executor_node,)
            node = TaskNode(self._node_id(), kind, op, all_deps, worker_id, source, params)
            self.graph[node.id] = node
            for d in deps:
                self._consumers[d] = self._consumers.get(d, 0) + 1
            parent = self.graph[deps[0]] if deps else None
            if op in _PARTITIONER_PRESERVING and parent is not None:
                node.partitioner = parent.partitioner
            elif op == "partitionBy":
                node.partitioner = ("hash", source.fingerprint() if source else None,
                                    params["n"])
            return node

    def persist(self, node, tier):
        node.cache_tier = tier  # idempotent; materializes at the next action
        self._cached_nodes.add(node.id)

    def unpersist(self, node):
        node.cache_tier = None
        node.cache_valid = False
        node.live_replicas = set()
        self._cached_nodes.discard(node.id)
        runtime = self.workers.get(node.worker_id)
        if runtime and self.state == "Started":
            handles = [self.endpoint.send_request(ex.ident, ["drop_slot", node.id],
                                                  connect_timeout=self._connect_timeout())
                       for ex in runtime.executors]
            try:
                self._await_all(handles)
            except TransportError:
                pass

    def dump(self):
        lines = []
        for node_id in sorted(self.graph):
            n = self.graph[node_id]
            parts = [str(n.id), n.kind, n.op]
            parts.extend(str(d) for d in n.deps)
            parts.append(n.state)
            parts.append("1" if (n.cached and n.cache_valid) else "0")
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    def load_library(self, worker_id, target):
        runtime = self.workers[worker_id]
        handles = [self.endpoint.send_request(ex.ident, ["import_lib", target],
                                              connect_timeout=self._connect_timeout())
                   for ex in runtime.executors]
        replies = self._await_all(handles)
        if target not in runtime.libraries:
            runtime.libraries.append(target)
        return replies[0][0] if replies and replies[0] else []

    def executor_metrics(self, worker_id):
        runtime = self.workers[worker_id]
        out = []
        for ex in runtime.executors:
            reply = self._request_checked(ex.ident, ["metrics"])
            out.append(dict(reply[0]))
        return out

    def executor_pids(self, worker_id):
        return [ex.pid for ex in self.workers[worker_id].executors]

    # -- action execution -----------------------------------------------------------------------

    def run_action(self, node):
        self.require_started()
        with self._lock:
            self.stats["actions"] += 1
            retries = self.props.get_int("ignis.scheduler.retries")
            attempts = 0
            last_exc = None
            executed = {}
            recovered = False
            force_probe = False
            retrying = False
            while True:
                try:
                    dead = self._detect_dead(node, force=force_probe)
                    force_probe = False
                    if dead:
                        self.stats["recoveries"] += 1
                        self._recover(dead, executed)
                        recovered = True
                        retrying = True
                    result = self._execute_action(node, executed, retrying)
                    if recovered and self.last_recovery is not None:
                        self.last_recovery["recomputed"] = sorted(
                            nid for nid, c in executed.items() if c > 1)
                    return result
                except RecoveryExhaustedError:
                    raise
                except TransportError as exc:
                    last_exc = exc
                    self.stats["transport_failures"] += 1
                    attempts += 1
                    if attempts > retries:
                        raise RecoveryExhaustedError(
                            f"gave up after {attempts - 1} recovery attempts: {exc}",
                            cause=exc) from exc
                    node.state = "Pending"
                    self._resync_workers(node)
                    force_probe = True
                    retrying = True
                    time.sleep(0.1)
                except IgnisError:
                    # the driver program's problem, but an aborted stage may
                    # have left collectives desynchronized: resynchronize
                    self._resync_workers(node)
                    raise

    def _resync_workers(self, node):
        for worker_id in self._involved_workers(node):
            runtime = self.workers[worker_id]
            try:
                self._resync_worker(runtime)
            except TransportError:
                pass  # dead members: the recovery path rebuilds from scratch

    def _resync_worker(self, runtime):
        """Fresh base communicator (same members, epoch+1) after an abort."""
        old = runtime.base
        self.endpoint.invalidate_comm(old.comm_id)
        self._drop_comm_everywhere(runtime, old.comm_id)
        if runtime.driver is not None:
            self.endpoint.invalidate_comm(runtime.driver.comm_id)
            self._drop_comm_everywhere(runtime, runtime.driver.comm_id)
            runtime.driver = None
            runtime.driver_comm = None
        runtime.base = rebuilt_spec(old, self._comm_id())
        self._build_comm_everywhere(runtime, runtime.base,
                                    base_for=f"base:{runtime.id}", barrier=True)

    def _notify_drop(self, runtime):
        """Fire-and-forget invalidation that wakes peers stuck in collectives."""
        comm_ids = [runtime.base.comm_id]
        if runtime.driver is not None:
            comm_ids.append(runtime.driver.comm_id)
        for ex in runtime.executors:
            for comm_id in comm_ids:
                try:
                    self.endpoint.notify(ex.ident, ["drop_comm", comm_id])
                except TransportError:
                    pass

    def _detect_dead(self, action_node, force=False):
        """Which executors are gone. Probes only on suspicion unless forced."""
        dead = {}
        for worker_id in self._involved_workers(action_node):
            runtime = self.workers[worker_id]
            lost = []
            for ex in runtime.executors:
                suspected = (self.endpoint.is_dead(ex.ident)
                             or ex.ident in self._suspect
                             or ex.proc is not None and ex.proc.poll() is not None)
                if force or suspected:
                    if not probe(ex.ident, timeout=0.4):
                        lost.append(ex.addr.rank)
            if lost:
                dead[worker_id] = lost
        return dead

    def _involved_workers(self, node):
        out = set()
        stack = [node.id]
        visited = set()
        while stack:
            nid = stack.pop()
            if nid in visited:
                continue
            visited.add(nid)
            n = self.graph[nid]
            if n.worker_id:
                out.add(n.worker_id)
            if not (n.cached and n.cache_valid):
                stack.extend(n.deps)
        return out

    # -- planning ---------------------------------------------------------------------------------

    def _execute_action(self, action, executed, retrying=False):
        plan_state = {"available": set(), "attempt_nodes": []}
        if retrying:
            # a failed attempt may have left partial slots on survivors
            for worker_id in self._involved_workers(action):
                self._clear_worker_slots(worker_id)
        self._run_readiness(action)
        try:
            if action.op == "voidCall":
                result = self._run_void_call(action, plan_state)
            elif action.op == "takeSample":
                result = self._run_take_sample(action, plan_state)
            else:
                parent = self.graph[action.deps[0]] if action.deps else None
                input_spec, steps, covers = ["none"], [], []
                if parent is not None and parent.kind != "executor":
                    input_spec, steps, covers = self._resolve_chain(parent, plan_state)
                result = self._run_final_stage(action, input_spec, steps, covers, plan_state)
            action.state = "Done"
            return result
        finally:
            for nid in plan_state["attempt_nodes"]:
                executed[nid] = executed.get(nid, 0) + 1
            if action.state == "Done":
                fresh = [nid for nid in plan_state["available"]
                         if not self.graph[nid].cache_valid]
                if fresh:  # uncached materializations die with the action
                    for worker_id in {self.graph[nid].worker_id for nid in fresh}:
                        try:
                            self._clear_worker_slots(worker_id)
                        except TransportError:
                            pass

    def _clear_worker_slots(self, worker_id):
        runtime = self.workers[worker_id]
        keep = [nid for nid in self._cached_nodes
                if self.graph[nid].worker_id == worker_id and self.graph[nid].cache_valid]
        handles = [self.endpoint.send_request(ex.ident, ["clear_slots", keep],
                                              connect_timeout=self._connect_timeout())
                   for ex in runtime.executors]
        self._await_all(handles)

    def _run_readiness(self, action):
        for worker_id in self._involved_workers(action):
            runtime = self.workers[worker_id]
            handles = [self.endpoint.send_request(ex.ident, ["ping"],
                                                  connect_timeout=self._connect_timeout())
                       for ex in runtime.executors]
            self._await_all(handles)
            self.graph[runtime.executor_node].state = "Done"
            container = self.graph[runtime.executor_node].deps[0]
            self.graph[container].state = "Done"

    def _resolve_chain(self, node, plan_state):
        """Returns (input_spec, steps, covered node ids); emits stages as needed."""
        if node.id in plan_state["available"] or (node.cached and node.cache_valid):
            plan_state["available"].add(node.id)
            return ["slot", node.id], [], []
        if node.kind == "source":
            if self._fanout(node) > 1 or node.cached:
                self._materialize(node, self._source_input(node), [], [node.id], plan_state)
                return ["slot", node.id], [], []
            return self._source_input(node), [], [node.id]
        if node.op in NARROW_OPS:
            parent = self.graph[node.deps[0]]
            inp, steps, covers = self._resolve_chain(parent, plan_state)
            steps = steps + [self._step_value(node)]
            covers = covers + [node.id]
            if self._fanout(node) > 1 or node.cached:
                self._materialize(node, inp, steps, covers, plan_state)
                return ["slot", node.id], [], []
            return inp, steps, covers
        self._ensure_slot(node, plan_state)
        return ["slot", node.id], [], []

    def _fanout(self, node):
        return self._consumers.get(node.id, 0)

    def _source_input(self, node):
        if node.op == "parallelize":
            return ["parallelize"]
        if node.op == "textFile":
            return ["textfile", node.params["path"], []]
        if node.op == "partitionObjectFile":
            return ["objectfile", []]
        if node.op == "partitionJsonFile":
            return ["jsonfile", []]
        raise IgnisError(f"unknown source {node.op!r}")

    def _step_value(self, node):
        if node.op in ("keys", "values"):
            return [node.op, None]
        if node.op == "sample":
            return ["sample", None, node.params["withReplacement"],
                    node.params["fraction"], node.params["seed"]]
        return [node.op, node.source.to_value()]

    def _materialize(self, node, input_spec, steps, covers, plan_state):
        tier = node.cache_tier if node.cached else None
        runtime = self.workers[node.worker_id]
        stage = Stage(node.worker_id, input_spec, steps, ["materialize"],
                      out_node=node.id, cache_tier=tier,
                      replicate=bool(tier) and runtime.size > 1, covers=covers)
        self._dispatch(stage)
        plan_state["available"].add(node.id)
        plan_state["attempt_nodes"].extend(covers)
        if tier:
            node.cache_valid = True
            node.live_replicas = set(range(runtime.size))

    def _ensure_slot(self, node, plan_state):
        if node.id in plan_state["available"]:
            return
        if node.cached and node.cache_valid:
            plan_state["available"].add(node.id)
            return
        if node.kind == "source" or node.op in NARROW_OPS:
            inp, steps, covers = self._resolve_chain_forced(node, plan_state)
            self._materialize(node, inp, steps, covers, plan_state)
            return
        if node.op == "importData":
            self._run_import(node, plan_state)
            return
        runtime = self.workers[node.worker_id]
        parent = self.graph[node.deps[0]] if node.deps else None
        inp, steps, covers = ["none"], [], []
        if parent is not None and parent.kind != "executor":
            inp, steps, covers = self._resolve_chain(parent, plan_state)
        terminal = self._wide_terminal(node, plan_state)
        tier = node.cache_tier if node.cached else None
        stage = Stage(node.worker_id, inp, steps, terminal, out_node=node.id,
                      cache_tier=tier, replicate=bool(tier) and runtime.size > 1,
                      covers=covers + [node.id])
        replies = self._dispatch(stage)
        if node.op == "iterate" and replies and replies[0]:
            node.params["last_result"] = replies[0][0]
        plan_state["available"].add(node.id)
        plan_state["attempt_nodes"].extend(stage.covers)
        if tier:
            node.cache_valid = True
            node.live_replicas = set(range(runtime.size))

    def _resolve_chain_forced(self, node, plan_state):
        """Chain for a node that must become a slot itself."""
        if node.kind == "source":
            return self._source_input(node), [], [node.id]
        parent = self.graph[node.deps[0]]
        inp, steps, covers = self._resolve_chain(parent, plan_state)
        return inp, steps + [self._step_value(node)], covers + [node.id]

    def _wide_terminal(self, node, plan_state):
        op = node.op
        p = self.workers[node.worker_id].size
        if op == "groupByKey":
            return ["groupByKey", self._co_partitioned(self.graph[node.deps[0]], p)]
        if op == "reduceByKey":
            return ["reduceByKey", node.source.to_value(),
                    self._co_partitioned(self.graph[node.deps[0]], p)]
        if op == "aggregateByKey":
            return ["aggregateByKey", node.params["zero"], node.params["seq"].to_value(),
                    node.params["comb"].to_value()]
        if op in ("countByKey", "countByValue", "distinct"):
            return [op]
        if op == "sortBy":
            return ["sort", node.source.to_value() if node.source else None,
                    node.params["ascending"]]
        if op == "repartition":
            return ["repartition", node.params["n"]]
        if op == "partitionBy":
            return ["partitionBy", node.source.to_value(), node.params["n"]]
        if op == "union":
            other = self.graph[node.deps[1]]
            self._ensure_slot(other, plan_state)
            return ["union", other.id]
        if op == "join":
            other = self.graph[node.deps[1]]
            self._ensure_slot(other, plan_state)
            left = self.graph[node.deps[0]]
            co = self._co_partitioned(left, p) and self._co_partitioned(other, p)
            return ["join", other.id, co]
        if op == "call":
            return ["call", node.source.to_value(), False]
        if op == "iterate":
            return ["iterate", node.params["body"].to_value(),
                    node.params["conv"].to_value() if node.params["conv"] else None,
                    node.params["final"].to_value() if node.params["final"] else None,
                    node.params["iterations"], node.params["epsilon"],
                    self.props.get_int("ignis.scheduler.maxIterations")]
        raise IgnisError(f"cannot plan operator {op!r}")

    def _co_partitioned(self, node, p):
        part = node.partitioner
        return bool(part and part[0] == "hash" and part[1] in KEY_ROUTING_FINGERPRINTS
                    and part[2] == p)

    # -- dispatch -------------------------------------------------------------------------------

    def _dispatch(self, stage, driver_role=None):
        """Send a stage to every executor; drive the backend's own role."""
        runtime = self.workers[stage.worker_id]
        scatter_parts = None
        if stage.input_spec and stage.input_spec[0] == "parallelize":
            scatter_parts = self._prepare_parallelize(stage, runtime)
        if stage.input_spec and stage.input_spec[0] in ("textfile", "objectfile", "jsonfile"):
            self._prepare_file_inputs(stage, runtime)
        needs_driver = scatter_parts is not None or driver_role == "gather"
        if needs_driver:
            comm = self._ensure_driver_comm(runtime)

        for nid in stage.covers:
            self.graph[nid].state = "Running"
            self.graph[nid].exec_count += 1

        handles = [self.endpoint.send_request(
            ex.ident, ["exec", stage.value_for(r)], connect_timeout=self._connect_timeout())
            for r, ex in enumerate(runtime.executors)]

        gathered = None
        if scatter_parts is not None:
            comm.scatter(0, [serialize_value([])] + scatter_parts)
        if driver_role == "gather":
            gathered = comm.gather(0, serialize_value([]))

        replies = self._await_all(handles, unblock=lambda: self._notify_drop(runtime))
        for nid in stage.covers:
            self.graph[nid].state = "Done"
        return (replies, gathered) if driver_role == "gather" else replies

    def _prepare_parallelize(self, stage, runtime):
        src = next((self.graph[nid] for nid in stage.covers
                    if self.graph[nid].op == "parallelize"), None)
        if src is None:
            raise IgnisError("parallelize input without its source node")
        data = src.params["data"]
        n_parts = max(1, src.params["partitions"])
        q, r = divmod(len(data), n_parts)
        parts, pos = [], 0
        for i in range(n_parts):
            size = q + (1 if i < r else 0)
            parts.append(data[pos:pos + size])
            pos += size
        per_rank = []
        for rank in range(runtime.size):
            containers = []
            for idx in partitions_of_rank(rank, n_parts, runtime.size):
                p = new_partition(StoreKind.memory())
                p.extend(parts[idx])
                p.freeze()
                containers.append(partition_bytes(p, level=0))
            per_rank.append(serialize_value(containers))
        return per_rank

    def _prepare_file_inputs(self, stage, runtime):
        src = next((self.graph[nid] for nid in stage.covers
                    if self.graph[nid].kind == "source"), None)
        if src is None:
            raise IgnisError("file input without its source node")
        stage.per_rank_input = {}
        if src.op == "textFile":
            path = src.params["path"]
            try:
                size = os.path.getsize(path)
            except OSError as exc:
                raise IgnisIoError(f"cannot stat {path!r}: {exc}") from exc
            k = max(1, src.params["minPartitions"] or self.props.get_int("ignis.partitions"))
            bounds = [(size * i) // k for i in range(k + 1)]
            splits = [[bounds[i], bounds[i + 1]] for i in range(k)]
            for rank in range(runtime.size):
                mine = partitions_of_rank(rank, k, runtime.size)
                stage.per_rank_input[rank] = ["textfile", path, [splits[i] for i in mine]]
        else:
            paths = src.params["paths"]
            kind = "objectfile" if src.op == "partitionObjectFile" else "jsonfile"
            for rank in range(runtime.size):
                mine = partitions_of_rank(rank, len(paths), runtime.size)
                stage.per_rank_input[rank] = [kind, [paths[i] for i in mine]]

    def _ensure_driver_comm(self, runtime):
        if runtime.driver is None or runtime.driver_comm is None:
            spec = driver_spec(
                runtime.base,
                ProcessAddr(self.endpoint.host, self.endpoint.port, "driver", 0),
                self._comm_id(),
            )
            runtime.driver = spec
            self._build_comm_everywhere(runtime, spec, base_for=f"driver:{runtime.id}",
                                        barrier=False)
            runtime.driver_comm = Communicator(
                self.endpoint, spec, 0,
                connect_timeout=self._connect_timeout(),
                collective_timeout=self.props.get_float("ignis.transport.collectiveTimeout"),
                probe_interval=self.props.get_float("ignis.transport.probeInterval"),
            ).open()
        return runtime.driver_comm

    def _await_all(self, handles, unblock=None):
        results = []
        transport_error = None
        hard_error = None
        unblocked = False
        for h in handles:
            try:
                reply = self.endpoint.wait_reply(h, timeout=self._task_timeout())
            except TransportError as exc:
                transport_error = transport_error or exc
                results.append(None)
                reply = None
            else:
                if reply and reply[0] == "ok":
                    results.append(reply[1:])
                else:
                    kind, message = reply[1], reply[2]
                    exc = error_from_kind(kind, message)
                    if kind in RECOVERABLE_KINDS:
                        transport_error = transport_error or exc
                    else:
                        hard_error = hard_error or exc
                    results.append(None)
                    reply = None
            if reply is None and unblock is not None and not unblocked:
                unblocked = True
                unblock()  # wake peers stuck in a collective this stage aborted
        if hard_error is not None:
            raise hard_error
        if transport_error is not None:
            raise transport_error
        return results

    def _request_checked(self, ident, command):
        reply = self.endpoint.request(ident, command, timeout=self._task_timeout(),
                                      connect_timeout=self._connect_timeout())
        if reply and reply[0] == "ok":
            return reply[1:]
        raise error_from_kind(reply[1], reply[2])

    # -- actions -----------------------------------------------------------------------------

    def _run_final_stage(self, action, input_spec, steps, covers, plan_state):
        op = action.op
        covers = covers + [action.id]

        def run(terminal, driver_role=None):
            stage = Stage(action.worker_id, input_spec, steps, terminal, covers=covers)
            out = self._dispatch(stage, driver_role=driver_role)
            plan_state["attempt_nodes"].extend(covers)
            return out

        if op == "count":
            replies = run(["count"])
            totals = {r[0] for r in replies}
            if len(totals) != 1:
                raise IgnisError(f"executors disagree on count: {sorted(totals)}")
            return totals.pop()
        if op == "reduce":
            replies = run(["reduce", action.source.to_value(), action.params.get("tree")])
            return replies[0][0]
        if op == "aggregate":
            replies = run(["aggregate", action.params["zero"],
                           action.params["seq"].to_value(),
                           action.params["comb"].to_value(), action.params.get("tree")])
            return replies[0][0]
        if op in ("max", "min"):
            src = action.source.to_value() if action.source else None
            replies = run(["max", src, op == "max"])
            return replies[0][0]
        if op in ("collect", "take"):
            limit = action.params.get("n", -1)
            _, gathered = run(["collect", limit], driver_role="gather")
            values = self._gathered_values(gathered)
            return values[:limit] if limit >= 0 else values
        if op == "top":
            n = action.params["n"]
            _, gathered = run(["top", n], driver_role="gather")
            return sorted_values(self._gathered_values(gathered), reverse=True)[:n]
        if op in ("saveAsTextFile", "saveAsJsonFile", "saveAsObjectFile"):
            fmt = {"saveAsTextFile": "text", "saveAsJsonFile": "json",
                   "saveAsObjectFile": "object"}[op]
            run(["save", fmt, action.params["path"]])
            return action.params["path"]
        raise IgnisError(f"unknown action {op!r}")

    def _gathered_values(self, gathered):
        cap = self.props.get_int("ignis.driver.resultCap")
        total = sum(len(b) for b in gathered[1:])
        if total > cap:
            raise ResultTooLargeError(f"collected {total} bytes exceeds the {cap}-byte cap")
        values = []
        for blob in gathered[1:]:
            for container in deserialize_value(blob):
                vs, _ = container_values(container)
                values.extend(vs)
        return values

    def _run_void_call(self, action, plan_state):
        parent = self.graph[action.deps[0]] if action.deps else None
        inp, steps, covers = ["none"], [], []
        if parent is not None and parent.kind != "executor":
            inp, steps, covers = self._resolve_chain(parent, plan_state)
        stage = Stage(action.worker_id, inp, steps,
                      ["call", action.source.to_value(), True],
                      covers=covers + [action.id])
        self._dispatch(stage)
        plan_state["attempt_nodes"].extend(stage.covers)
        return None

    def _run_take_sample(self, action, plan_state):
        parent = self.graph[action.deps[0]]
        self._ensure_slot(parent, plan_state)
        runtime = self.workers[action.worker_id]
        counts_stage = Stage(action.worker_id, ["slot", parent.id], [], ["localCount"])
        replies = self._dispatch(counts_stage)
        counts = [r[0] for r in replies]
        total = sum(counts)
        n = min(action.params["n"], total)
        chosen = self._sample_indices(total, n, action.params["seed"])
        offsets = [0]
        for c in counts:
            offsets.append(offsets[-1] + c)
        stage = Stage(action.worker_id, ["slot", parent.id], [], ["takeByIndex", []],
                      covers=[action.id])
        stage.per_rank_terminal = {
            r: ["takeByIndex", sorted(i - offsets[r] for i in chosen
                                      if offsets[r] <= i < offsets[r + 1])]
            for r in range(runtime.size)
        }
        _, gathered = self._dispatch(stage, driver_role="gather")
        plan_state["attempt_nodes"].append(action.id)
        return self._gathered_values(gathered)

    def _sample_indices(self, total, n, seed):
        if n >= total:
            return set(range(total))
        chosen = set()
        stream = splitmix64(seed)
        # Floyd's uniform n-subset
        for j in range(total - n, total):
            t = next(stream) % (j + 1)
            chosen.add(t if t not in chosen else j)
        return chosen

    # -- importData ------------------------------------------------------------------------------

    def _run_import(self, node, plan_state):
        src_node = self.graph[node.deps[0]]
        src_runtime = self.workers[src_node.worker_id]
        dst_runtime = self.workers[node.worker_id]
        if src_runtime.id == dst_runtime.id:
            raise SameWorkerError("importData within one worker")
        self._ensure_slot(src_node, plan_state)
        spec = inter_spec(src_runtime.base, dst_runtime.base, self._comm_id())
        for runtime in (src_runtime, dst_runtime):
            self._build_comm_everywhere(runtime, spec, base_for="", barrier=False)

        node.state = "Running"
        node.exec_count += 1
        send_stage = Stage(src_runtime.id, ["slot", src_node.id], [],
                           ["importSend", spec.comm_id, dst_runtime.size])
        send_handles = [self.endpoint.send_request(
            ex.ident, ["exec", send_stage.value_for(r)],
            connect_timeout=self._connect_timeout())
            for r, ex in enumerate(src_runtime.executors)]
        recv_stage = Stage(dst_runtime.id, ["import_recv", spec.comm_id], [],
                           ["materialize"], out_node=node.id,
                           cache_tier=node.cache_tier if node.cached else None,
                           replicate=node.cached and dst_runtime.size > 1)
        recv_handles = [self.endpoint.send_request(
            ex.ident, ["exec", recv_stage.value_for(r)],
            connect_timeout=self._connect_timeout())
            for r, ex in enumerate(dst_runtime.executors)]
        self._await_all(send_handles + recv_handles)
        node.state = "Done"

        # the inter-worker communicator lives only for the transfer
        self.endpoint.invalidate_comm(spec.comm_id)
        for runtime in (src_runtime, dst_runtime):
            self._drop_comm_everywhere(runtime, spec.comm_id)
        plan_state["available"].add(node.id)
        plan_state["attempt_nodes"].append(node.id)
        if node.cached:
            node.cache_valid = True
            node.live_replicas = set(range(dst_runtime.size))

    def _drop_comm_everywhere(self, runtime, comm_id):
        handles = [self.endpoint.send_request(ex.ident, ["drop_comm", comm_id],
                                              connect_timeout=self._connect_timeout())
                   for ex in runtime.executors]
        try:
            self._await_all(handles)
        except TransportError:
            pass

    # -- recovery ------------------------------------------------------------------------------------

    def _recover(self, dead, executed):
        uncached_lost = [nid for nid, c in executed.items()
                         if not self.graph[nid].cache_valid]
        self.last_recovery = {"uncached_lost": sorted(set(uncached_lost)),
                              "recomputed": [], "restored_cache": []}
        for worker_id, ranks in dead.items():
            runtime = self.workers[worker_id]
            if len(ranks) >= runtime.size:
                raise RecoveryExhaustedError(
                    f"worker {worker_id} lost all {runtime.size} executors",
                    cause=PeerLostError("every executor"))
            for rank in ranks:
                old = runtime.executors[rank]
                self.endpoint.forget_dead(old.ident)
                if runtime.owns_procs and old.proc is not None:
                    try:
                        old.proc.kill()
                        old.proc.wait(timeout=2.0)
                    except Exception:
                        pass
                # never rebind a lost executor's port: peers may still hold
                # the old identity in their suspicion sets
                replacement = self._spawn_executor(
                    worker_id, rank, runtime.size, runtime.namespace, runtime.props,
                    avoid_ports=[old.addr.port])
                old.addr = replacement.addr
                old.proc = replacement.proc
                old.pid = replacement.pid
                self._suspect.pop(replacement.ident, None)
                for target in runtime.libraries:
                    self._request_checked(replacement.ident, ["import_lib", target])
            self._rebuild_comms(runtime, ranks)
            self._restore_caches(runtime, ranks)

    def _rebuild_comms(self, runtime, ranks):
        affected = [w for w in self.workers.values()
                    if w.id == runtime.id
                    or {e.ident for e in w.executors} == {e.ident for e in runtime.executors}]
        for w in affected:
            old = w.base
            spec = old
            for rank in ranks:
                spec = replaced_spec(spec, rank, w.executors[rank].addr, self._comm_id())
            w.base = spec
            self.endpoint.invalidate_comm(old.comm_id)
            self._drop_comm_everywhere(w, old.comm_id)
            self._build_comm_everywhere(w, spec, base_for=f"base:{w.id}", barrier=True)
            if w.driver is not None:
                self.endpoint.invalidate_comm(w.driver.comm_id)
                self._drop_comm_everywhere(w, w.driver.comm_id)
                w.driver = None
                w.driver_comm = None  # rebuilt lazily on next use

    def _restore_caches(self, runtime, ranks):
        p = runtime.size
        rankset = set(ranks)
        cached_nodes = [self.graph[nid] for nid in sorted(self._cached_nodes)
                        if self.graph[nid].worker_id == runtime.id
                        and self.graph[nid].cache_valid]
        for node in cached_nodes:
            # the replica of rank r lives on r+1; if that died too, it is gone
            unrestorable = p == 1 or any((r + 1) % p in rankset for r in rankset)
            if unrestorable:
                node.cache_valid = False
                node.live_replicas = set()
                continue
            tier = [node.cache_tier.kind, node.cache_tier.level, node.cache_tier.directory]
            for r in ranks:
                buddy = (r + 1) % p
                h1 = self.endpoint.send_request(
                    runtime.executors[buddy].ident,
                    ["share_send", node.id, "replica", r, runtime.id],
                    connect_timeout=self._connect_timeout())
                h2 = self.endpoint.send_request(
                    runtime.executors[r].ident,
                    ["share_recv", node.id, "slot", buddy, runtime.id, tier],
                    connect_timeout=self._connect_timeout())
                self._await_all([h1, h2])
            for r in ranks:
                prev = (r - 1) % p
                h1 = self.endpoint.send_request(
                    runtime.executors[prev].ident,
                    ["share_send", node.id, "slot", r, runtime.id],
                    connect_timeout=self._connect_timeout())
                h2 = self.endpoint.send_request(
                    runtime.executors[r].ident,
                    ["share_recv", node.id, "replica", prev, runtime.id, None],
                    connect_timeout=self._connect_timeout())
                self._await_all([h1, h2])
            node.live_replicas = set(range(p))
            self.last_recovery["restored_cache"].append(node.id)
