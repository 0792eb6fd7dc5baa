#!/usr/bin/env python3
# Embedding message-passing code in a dataflow job: a registered function
# receives the executor context, including the worker's live communicator,
# and coordinates with its peers directly. Dataflow operators prepare the
# input; the function does the collective part; operators take over again.

from ignis import Ignis, Properties
from ignis.workloads import gen_sentences, seq_wordcount

props = Properties()
props.set("ignis.executor.instances", "4")

with Ignis(props) as ignis:
    worker = ignis.createCluster().createWorker("hybrid")
    worker.loadLibrary("ignis.workloads")

    lines = gen_sentences(seed=1, n=200)
    words = worker.parallelize(lines, 8).flatmap("wl.split_words")

    # wl.hybrid_wordcount counts locally, routes counts to peers by key hash
    # through an alltoall on ctx.comm, and emits its merged share
    counted = worker.call("wl.hybrid_wordcount", words)
    hybrid = sorted(counted.collect())

    pure = sorted(
        words.map("lambda w: (w, 1)").reduceByKey("lambda a, b: a + b").collect()
    )

    oracle = sorted(seq_wordcount(lines).items())
    print("hybrid == pure operators:", hybrid == pure)
    print("hybrid == sequential oracle:", hybrid == oracle)
    print("sample:", hybrid[:5])
