#!/usr/bin/env python3
# Text lambdas: operator logic shipped as source text and interpreted by the
# executors, so a driver in any language can express the same functions.

from ignis import ISource, Ignis, Properties
from ignis.lambdas import eval_lambda, parse_lambda_source

# the language can be explored without an engine: parse once, evaluate anywhere
adder = parse_lambda_source("lambda a, b: a + b")
print("2 + 3 =", eval_lambda(adder, [2, 3]))

spread = parse_lambda_source("lambda x: if x % 2 == 0 then (x, [x, x * x]) else (x, [])")
print("spread(4) =", eval_lambda(spread, [4]))
print("spread(5) =", eval_lambda(spread, [5]))

# pairs, lists, projections and the total value order are all in the grammar
picker = parse_lambda_source("lambda p: if fst p >= snd p then fst p else snd p")
print("max of (3, 9):", eval_lambda(picker, [(3, 9)]))

# $name reads driver-captured variables from the executor context
scaled = parse_lambda_source("lambda x: $factor * x")
print("scaled:", eval_lambda(scaled, [7], {"factor": 100}))

# the same lambdas drive distributed operators
with Ignis(Properties()) as ignis:
    worker = ignis.createCluster().createWorker("lam", instances=2)
    df = worker.parallelize(list(range(10)), 4)
    odds_squared = df.filter("lambda x: x % 2 == 1").map(ISource("lambda x: x * x * $sign", sign=-1))
    print("distributed:", odds_squared.collect())
