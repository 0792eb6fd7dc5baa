"""Reference applications and their sequential oracles.

Each workload is a plain driver program against the public API, paired with a
single-process oracle computing the same quantity independently; the oracles
are what the benchmark CLI and the acceptance suite compare against. All
generators are deterministic by seed.

Executor-side functions used by the iterative and hybrid workloads live here
too, registered under names; drivers load them with
``worker.loadLibrary("ignis.workloads")``.
"""

import math
import random
import time

from .api import ISource
from .registry import ignis_fn
from .values import fnv1a64, hash_value, serialize_value

DAMPING = 0.85  # canonical damping constant; not a reported value


# -- generators --------------------------------------------------------------------

def gen_lines(seed, n, width=16):
    rng = random.Random(seed)
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    return ["".join(rng.choice(alphabet) for _ in range(width)) for _ in range(n)]


def gen_sentences(seed, n, vocabulary=200):
    rng = random.Random(seed)
    words = [f"word{i}" for i in range(vocabulary)]
    return [" ".join(rng.choice(words) for _ in range(rng.randrange(3, 12)))
            for _ in range(n)]


def gen_digraph(seed, vertices, edges):
    """Random simple digraph as a sorted edge list (no self loops)."""
    rng = random.Random(seed)
    out = set()
    while len(out) < edges:
        a = rng.randrange(vertices)
        b = rng.randrange(vertices)
        if a != b:
            out.add((a, b))
    return sorted(out)


def gen_pagerank_graph(seed, vertices, out_degree=4):
    """Digraph where every vertex has at least one out- and one in-edge."""
    rng = random.Random(seed)
    edges = set()
    for v in range(vertices):
        edges.add((v, (v + 1) % vertices))  # a cycle guarantees both degrees
        for _ in range(out_degree - 1):
            w = rng.randrange(vertices)
            if w != v:
                edges.add((v, w))
    return sorted(edges)


def gen_points(seed, n, k=4, dim=2, spread=0.5):
    """Points drawn around k well-separated centers; returns (points, centers)."""
    rng = random.Random(seed)
    centers = [[10.0 * c + rng.random() for _ in range(dim)] for c in range(k)]
    points = []
    for i in range(n):
        c = centers[i % k]
        points.append([x + rng.gauss(0.0, spread) for x in c])
    return points, [list(c) for c in centers]


def gen_blocks(seed, n):
    rng = random.Random(seed)
    return [(i, "".join(rng.choice("0123456789abcdef") for _ in range(24)))
            for i in range(n)]


# -- sequential oracles ----------------------------------------------------------------

def seq_wordcount(sentences):
    counts = {}
    for line in sentences:
        for word in line.split():
            counts[word] = counts.get(word, 0) + 1
    return counts


def seq_sort(lines):
    return sorted(lines)


def seq_kmeans(points, centroids, iterations):
    """Lloyd iterations; returns (centroids, movement per iteration)."""
    centroids = [list(c) for c in centroids]
    movements = []
    for _ in range(iterations):
        sums = [[0.0] * len(centroids[0]) for _ in centroids]
        counts = [0] * len(centroids)
        for p in points:
            best = min(range(len(centroids)),
                       key=lambda i: _sqdist(p, centroids[i]))
            counts[best] += 1
            for d, x in enumerate(p):
                sums[best][d] += x
        moved = 0.0
        for i in range(len(centroids)):
            if counts[i]:
                new = [s / counts[i] for s in sums[i]]
            else:
                new = centroids[i]
            moved = max(moved, math.sqrt(_sqdist(new, centroids[i])))
            centroids[i] = new
        movements.append(moved)
    return centroids, movements


def _sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def seq_pagerank(edges, vertices, iterations, damping=DAMPING):
    """Dense power iteration with the same recurrence the dataflow uses."""
    out_degree = [0] * vertices
    for a, _ in edges:
        out_degree[a] += 1
    ranks = [1.0] * vertices
    for _ in range(iterations):
        sums = [0.0] * vertices
        for a, b in edges:
            sums[b] += ranks[a] / out_degree[a]
        ranks = [(1 - damping) + damping * s for s in sums]
    return ranks


def seq_transitive_closure(edges):
    """All reachable (x, y) pairs via repeated relational join."""
    closure = set(edges)
    while True:
        new = set(closure)
        by_src = {}
        for a, b in closure:
            by_src.setdefault(a, []).append(b)
        for a, b in closure:
            for c in by_src.get(b, ()):
                new.add((a, c))
        if new == closure:
            return closure
        closure = new


def minebench_merkle(header):
    # keep the root inside the signed 64-bit element model
    return fnv1a64(header.encode("utf-8")) & ((1 << 63) - 1)


def minebench_nonce(root, difficulty=64):
    nonce = 0
    while fnv1a64(root.to_bytes(8, "little") + nonce.to_bytes(8, "little")) % difficulty:
        nonce += 1
    return nonce


def seq_minebench(blocks, difficulty=64):
    return {i: minebench_nonce(minebench_merkle(h), difficulty) for i, h in blocks}


# -- executor-side functions ----------------------------------------------------------------

@ignis_fn(name="wl.parse_edge")
def _parse_edge(ctx, line):
    a, b = line.split()
    return (int(a), int(b))


@ignis_fn(name="wl.split_words")
def _split_words(ctx, line):
    return line.split()


@ignis_fn(name="wl.mb_merkle")
def _mb_merkle(ctx, pair):
    block_id, header = pair
    return (block_id, minebench_merkle(header))


@ignis_fn(name="wl.mb_pow")
def _mb_pow(ctx, pair):
    block_id, root = pair
    return (block_id, minebench_nonce(root, ctx.var("difficulty", 64)))


@ignis_fn(name="wl.parse_point")
def _parse_point(ctx, line):
    return [float(x) for x in line.split()]


@ignis_fn(name="wl.km_body")
def _km_body(ctx, points):
    """One Lloyd iteration: local sums, allreduce, identical new centroids."""
    centroids = ctx.state.get("centroids")
    if centroids is None:
        centroids = [list(c) for c in ctx.var("centroids")]
    k = len(centroids)
    dim = len(centroids[0])
    sums = [0.0] * (k * dim)
    counts = [0] * k
    for p in points:
        best = min(range(k), key=lambda i: _sqdist(p, centroids[i]))
        counts[best] += 1
        for d in range(dim):
            sums[best * dim + d] += p[d]
    if ctx.executors > 1:
        merged = ctx.comm.allreduce(
            sums + [float(c) for c in counts],
            lambda a, b: [x + y for x, y in zip(a, b)],
        )
        sums, counts = merged[:k * dim], merged[k * dim:]
    moved = 0.0
    new_centroids = []
    for i in range(k):
        if counts[i]:
            new = [sums[i * dim + d] / counts[i] for d in range(dim)]
        else:
            new = centroids[i]
        moved = max(moved, math.sqrt(_sqdist(new, centroids[i])))
        new_centroids.append(new)
    ctx.state["centroids"] = new_centroids
    ctx.state["movement"] = moved
    return points


@ignis_fn(name="wl.km_conv")
def _km_conv(ctx, points):
    # every executor holds the identical movement; contribute it once
    return ctx.state.get("movement", 0.0) if ctx.rank == 0 else 0.0


@ignis_fn(name="wl.km_final")
def _km_final(ctx, points):
    if ctx.rank != 0:
        return []
    return [(i, c) for i, c in enumerate(ctx.state.get("centroids", []))]


@ignis_fn(name="wl.nearest_centroid")
def _nearest_centroid(ctx, point):
    centroids = ctx.var("centroids")
    best = min(range(len(centroids)), key=lambda i: _sqdist(point, centroids[i]))
    return (best, 1)


@ignis_fn(name="wl.hybrid_wordcount")
def _hybrid_wordcount(ctx, words):
    """Collective wordcount: local count, exchange by key hash, emit own share.

    The same pattern as porting a message-passing kernel: the function gets
    the worker's communicator from the context and coordinates directly.
    """
    local = {}
    for w in words:
        local[w] = local.get(w, 0) + 1
    p = ctx.executors
    if p == 1:
        return sorted(local.items())
    outboxes = [[] for _ in range(p)]
    for w, c in local.items():
        outboxes[hash_value(w) % p].append((w, c))
    received = ctx.comm.alltoall([serialize_value(o) for o in outboxes])
    from .values import deserialize_value

    merged = {}
    for blob in received:
        for w, c in deserialize_value(blob):
            merged[w] = merged.get(w, 0) + c
    return sorted(merged.items())


@ignis_fn(name="wl.emit_rank", returns=True)
def _emit_rank(ctx):
    return [ctx.rank]


@ignis_fn(name="wl.gen_sentences_df")
def _gen_sentences_df(ctx):
    # deterministic input served from inside the engine (remote clients use
    # this so both sides of an equivalence check share the exact input)
    if ctx.rank != 0:
        return []
    return gen_sentences(ctx.var("seed"), ctx.var("size"))


@ignis_fn(name="wl.gen_digraph_df")
def _gen_digraph_df(ctx):
    if ctx.rank != 0:
        return []
    return [(a, b) for a, b in
            gen_digraph(ctx.var("seed"), ctx.var("vertices"), ctx.var("edges"))]


@ignis_fn(name="wl.barrier_only", returns=False)
def _barrier_only(ctx):
    if ctx.executors > 1:
        ctx.comm.barrier()


# -- drivers ------------------------------------------------------------------------------------

def run_wordcount(worker, seed, size, hybrid=False):
    lines = gen_sentences(seed, size)
    words = worker.parallelize(lines, worker.runtime.size * 2).flatmap("wl.split_words")
    if hybrid:
        counted = worker.call("wl.hybrid_wordcount", words)
        return sorted(counted.collect())
    pairs = words.map("lambda w: (w, 1)").reduceByKey("lambda a, b: a + b")
    return sorted(pairs.collect())


def run_terasort(worker, seed, size, tmpdir):
    lines = gen_lines(seed, size)
    path = f"{tmpdir}/terasort-input.txt"
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    df = (worker.textFile(path, minPartitions=worker.runtime.size * 2)
          .map("lambda x: x")
          .repartition(worker.runtime.size * 2)
          .sort())
    out = f"{tmpdir}/terasort-output"
    df.saveAsTextFile(out)
    result = df.collect()
    load = max(m.get("sort_load", 0) for m in worker.executorMetrics())
    return result, load


def run_kmeans(worker, seed, size, iterations=10, k=4, tmpdir=None):
    points, centers = gen_points(seed, size, k)
    path = f"{tmpdir}/kmeans-points.txt" if tmpdir else None
    if path:
        with open(path, "w", encoding="utf-8") as f:
            for p in points:
                f.write(" ".join(repr(x) for x in p) + "\n")
        df = worker.textFile(path, minPartitions=worker.runtime.size).map("wl.parse_point")
    else:
        df = worker.parallelize(points, worker.runtime.size)
    initial = [[float(x) for x in c] for c in centers]
    loop = df.iterate("wl.km_body", iterations=iterations, convergence="wl.km_conv",
                      finalize="wl.km_final", centroids=initial)
    indexed = loop.collect()
    centroids = [c for _, c in sorted(indexed)]
    ran, movements = loop.iterateResult()
    sizes = (df.map(ISource("wl.nearest_centroid", centroids=centroids))
             .reduceByKey("lambda a, b: a + b").collectAsMap())
    if tmpdir:
        loop.saveAsTextFile(f"{tmpdir}/kmeans-centroids")
    return centroids, movements, sizes


def run_pagerank(worker, seed, vertices, iterations=10, tmpdir=None):
    edges = gen_pagerank_graph(seed, vertices)
    if tmpdir:
        path = f"{tmpdir}/pagerank-edges.txt"
        with open(path, "w", encoding="utf-8") as f:
            for a, b in edges:
                f.write(f"{a} {b}\n")
        edges_df = worker.textFile(path, minPartitions=worker.runtime.size).map("wl.parse_edge")
    else:
        edges_df = worker.parallelize([(a, b) for a, b in edges],
                                      worker.runtime.size * 2)
    edges_df = edges_df.repartition(worker.runtime.size * 2)
    degrees = edges_df.map("lambda e: (fst e, 1)").reduceByKey("lambda a, b: a + b")
    # (src, (dst, out_degree)) is static across iterations: cache it
    fan = edges_df.join(degrees).cache()
    ranks = degrees.mapValues("lambda d: 1.0")
    for _ in range(iterations):
        contribs = (fan.join(ranks)
                    .flatmap("lambda e: [(fst fst snd e, (snd snd e) / (snd fst snd e))]"))
        ranks = contribs.reduceByKey("lambda a, b: a + b") \
                        .mapValues("lambda s: 0.15 + 0.85 * s")
    result = dict(ranks.collect())
    assert ranks.count() == len(result)
    return result


def run_transitive_closure(worker, seed, vertices=75, edge_count=200):
    edges = gen_digraph(seed, vertices, edge_count)
    tc = worker.parallelize([(a, b) for a, b in edges], worker.runtime.size).cache()
    reversed_tc = None
    while True:
        old_count = tc.count()
        # extend paths: (x, y) + (y, z) -> (x, z), keyed on the middle vertex
        by_dst = tc.map("lambda e: (snd e, fst e)")
        new_paths = by_dst.join(tc).map("lambda j: (fst snd j, snd snd j)")
        tc = tc.union(new_paths).distinct().cache()
        if tc.count() == old_count:
            break
    return set(map(tuple, tc.collect()))


def run_minebench(worker_a, worker_b, seed, size, difficulty=64, tmpdir=None):
    blocks = gen_blocks(seed, size)
    staged = worker_a.parallelize([(i, h) for i, h in blocks],
                                  worker_a.runtime.size * 2).map("wl.mb_merkle")
    if worker_b is not None:
        staged = worker_b.importData(staged)
    solved = staged.map(ISource("wl.mb_pow", difficulty=difficulty))
    result = dict(solved.collect())
    if tmpdir:
        solved.saveAsTextFile(f"{tmpdir}/minebench-nonces")
    return result


def run_workload(name, executors=2, seed=1, size=None, properties=None, tmpdir=None):
    """Benchmark entry point; returns (result summary, metrics dict)."""
    from .api import Ignis
    from .model import Properties

    props = properties.copy() if properties else Properties()
    props.set("ignis.executor.instances", str(executors))
    started = time.monotonic()
    with Ignis(props) as session:
        cluster = session.createCluster()
        worker = cluster.createWorker("bench", instances=executors)
        worker.loadLibrary("ignis.workloads")
        summary = {}
        if name == "wordcount":
            pairs = run_wordcount(worker, seed, size or 2000)
            summary = {"distinct_words": len(pairs), "total": sum(c for _, c in pairs)}
        elif name == "terasort":
            result, load = run_terasort(worker, seed, size or 100_000, tmpdir or "/tmp")
            summary = {"lines": len(result), "sorted": result == sorted(result),
                       "max_executor_load": load}
        elif name == "kmeans":
            centroids, movements, sizes = run_kmeans(
                worker, seed, size or 2000, tmpdir=tmpdir)
            summary = {"centroids": centroids, "iterations": len(movements),
                       "cluster_sizes": sizes}
        elif name == "pagerank":
            ranks = run_pagerank(worker, seed, size or 100, tmpdir=tmpdir)
            summary = {"vertices": len(ranks),
                       "top": sorted(ranks.items(), key=lambda kv: -kv[1])[:5]}
        elif name == "transitiveClosure":
            closure = run_transitive_closure(worker, seed, size or 75,
                                             (size or 75) * 200 // 75)
            summary = {"closure_edges": len(closure)}
        elif name == "minebench-sim":
            worker_b = cluster.createWorker("bench2", instances=executors)
            worker_b.loadLibrary("ignis.workloads")
            nonces = run_minebench(worker, worker_b, seed, size or 200, tmpdir=tmpdir)
            summary = {"blocks": len(nonces), "nonce_sum": sum(nonces.values())}
        else:
            raise ValueError(f"unknown workload {name!r}")
        metrics = {
            "workload": name,
            "executors": executors,
            "seed": seed,
            "size": size,
            "elapsed_seconds": time.monotonic() - started,
            "engine": session.stats(),
            "executor_metrics": [
                {k: v for k, v in m.items() if isinstance(v, (int, float))}
                for m in worker.executorMetrics()],
        }
    return summary, metrics
