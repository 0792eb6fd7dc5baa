"""Reference workloads against their sequential oracles (desk sizes)."""

import json
import subprocess
import sys

import pytest

from ignis import workloads as wl


def test_wordcount_matches_oracle(workers):
    for p in (1, 2, 4):
        got = wl.run_wordcount(workers[p], seed=5, size=200)
        assert got == sorted(wl.seq_wordcount(wl.gen_sentences(5, 200)).items())


def test_hybrid_wordcount_equals_pure_operator(workers):
    oracle = sorted(wl.seq_wordcount(wl.gen_sentences(8, 250)).items())
    for p in (1, 2, 4):
        pure = wl.run_wordcount(workers[p], seed=8, size=250)
        hybrid = wl.run_wordcount(workers[p], seed=8, size=250, hybrid=True)
        assert pure == hybrid == oracle


def test_terasort_small(workers, tmp_path):
    result, load = wl.run_terasort(workers[4], seed=4, size=3000, tmpdir=str(tmp_path))
    assert result == wl.seq_sort(wl.gen_lines(4, 3000))
    parts = sorted((tmp_path / "terasort-output").glob("part-*.txt"))
    saved = [l for f in parts for l in f.read_text().splitlines()]
    assert saved == result


def test_kmeans_matches_lloyd(workers, tmp_path):
    for p in (1, 2, 4):
        centroids, movements, sizes = wl.run_kmeans(
            workers[p], seed=11, size=200, iterations=10, tmpdir=str(tmp_path))
        points, centers = wl.gen_points(11, 200, 4)
        oracle_c, oracle_m = wl.seq_kmeans(points, [[float(x) for x in c] for c in centers], 10)
        for got, want in zip(centroids, oracle_c):
            for a, b in zip(got, want):
                assert abs(a - b) <= 1e-9
        assert len(movements) == 10
        for a, b in zip(movements, oracle_m):
            assert abs(a - b) <= 1e-9
        assert sum(sizes.values()) == 200


def test_pagerank_matches_dense_oracle(workers):
    oracle = wl.seq_pagerank(wl.gen_pagerank_graph(3, 60), 60, 10)
    previous = None
    for p in (1, 2, 4):
        ranks = wl.run_pagerank(workers[p], seed=3, vertices=60)
        assert len(ranks) == 60
        assert max(abs(ranks[v] - oracle[v]) for v in range(60)) < 1e-6
        if previous is not None:
            assert max(abs(ranks[v] - previous[v]) for v in range(60)) < 1e-9
        previous = ranks


def test_transitive_closure_matches_reachability(workers):
    closure = wl.run_transitive_closure(workers[2], seed=9, vertices=30, edge_count=60)
    assert closure == wl.seq_transitive_closure(wl.gen_digraph(9, 30, 60))


def test_minebench_two_workers_importdata(session, workers):
    cluster = session.createCluster()
    worker_b = cluster.createWorker("mb-b", instances=2)
    worker_b.loadLibrary("ignis.workloads")
    got = wl.run_minebench(workers[4], worker_b, seed=2, size=60)
    assert got == wl.seq_minebench(wl.gen_blocks(2, 60))


def test_workload_results_independent_of_p(workers):
    closure_sizes = set()
    for p in (1, 2, 4):
        closure = wl.run_transitive_closure(workers[p], seed=17, vertices=25, edge_count=50)
        closure_sizes.add(len(closure))
        counts = wl.run_wordcount(workers[p], seed=17, size=100)
        assert counts == sorted(wl.seq_wordcount(wl.gen_sentences(17, 100)).items())
    assert len(closure_sizes) == 1


def test_bench_cli_writes_metrics(tmp_path):
    out = tmp_path / "metrics.json"
    proc = subprocess.run(
        [sys.executable, "-m", "ignis.bench", "wordcount", "--executors", "2",
         "--seed", "3", "--size", "150", "--metrics", str(out)],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "wordcount" in proc.stdout
    metrics = json.loads(out.read_text())
    assert metrics["workload"] == "wordcount"
    assert metrics["executors"] == 2
    assert metrics["elapsed_seconds"] > 0
    assert len(metrics["executor_metrics"]) == 2
    assert all("stages" in m and "passes" in m for m in metrics["executor_metrics"])
    assert metrics["result"]["total"] > 0
