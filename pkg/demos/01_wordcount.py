#!/usr/bin/env python3
# The classic first program: count words across executor processes.
#
# A session owns everything: clusters group workers, a worker is a set of
# executor processes bound to one function namespace. Transformations record
# lazily; the collect() at the end is the action that makes work happen.

from ignis import Ignis, Properties

props = Properties()
props.set("ignis.executor.instances", "2")

with Ignis(props) as ignis:
    cluster = ignis.createCluster()
    worker = cluster.createWorker("demo")

    # text lambdas cover pure expressions; splitting a string into words is a
    # registered function the engine ships with
    worker.loadLibrary("ignis.workloads")

    lines = [
        "the quick brown fox",
        "jumps over the lazy dog",
        "the dog sleeps",
    ]

    counts = (
        worker.parallelize(lines, 4)
        .flatmap("wl.split_words")
        .map("lambda w: (w, 1)")
        .reduceByKey("lambda a, b: a + b")
    )

    for word, n in sorted(counts.collect()):
        print(f"{word:8s} {n}")
