"""ignis-bench: run a reference workload and report metrics.

    ignis-bench WORKLOAD --executors P --seed S --size N [--metrics out.json]

WORKLOAD is one of wordcount, terasort, kmeans, pagerank, transitiveClosure,
minebench-sim. The metrics JSON schema:

    {
      "workload": str, "executors": int, "seed": int, "size": int | null,
      "elapsed_seconds": float,
      "engine": {"actions": int, "recoveries": int, "transport_failures": int},
      "executor_metrics": [{"stages": int, "passes": int,
                            "exchange_messages": int, "exchange_bytes": int,
                            "pid": int, ...} per executor],
      "result": workload-specific summary
    }
"""

import argparse
import json
import sys
import tempfile

from .workloads import run_workload

WORKLOAD_NAMES = ("wordcount", "terasort", "kmeans", "pagerank",
                  "transitiveClosure", "minebench-sim")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ignis-bench",
                                     description="Run a reference workload.")
    parser.add_argument("workload", choices=WORKLOAD_NAMES)
    parser.add_argument("--executors", type=int, default=2)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--size", type=int, default=None)
    parser.add_argument("--metrics", default=None, help="write metrics JSON here")
    args = parser.parse_args(argv)

    with tempfile.TemporaryDirectory(prefix="ignis-bench-") as tmpdir:
        summary, metrics = run_workload(args.workload, executors=args.executors,
                                        seed=args.seed, size=args.size, tmpdir=tmpdir)
    metrics["result"] = _plain(summary)
    print(f"{args.workload}: executors={args.executors} seed={args.seed} "
          f"size={args.size} elapsed={metrics['elapsed_seconds']:.2f}s")
    for key, value in metrics["result"].items():
        print(f"  {key}: {value}")
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2, default=str)
        print(f"metrics written to {args.metrics}")
    return 0


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


if __name__ == "__main__":
    sys.exit(main())
