import { spawn, ChildProcess } from "node:child_process";
import { createInterface } from "node:readline";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import {
  IgnisClient,
  Pair,
  ProtocolVersionError,
  RemoteError,
  Value,
  encodeValue,
  lambdaSource,
  registrySource,
} from "../src/index.js";

const here = dirname(fileURLToPath(import.meta.url));

let server: ChildProcess;
let port = 0;
let nativeWordcountHex = "";
let nativeClosureHex = "";

function hex(b: Uint8Array): string {
  return Buffer.from(b).toString("hex");
}

beforeAll(async () => {
  server = spawn("python3", [join(here, "server_fixture.py")], {
    stdio: ["pipe", "pipe", "inherit"],
  });
  const line = await new Promise<string>((resolve, reject) => {
    const rl = createInterface({ input: server.stdout! });
    rl.once("line", resolve);
    server.once("exit", (code) => reject(new Error(`fixture exited early: ${code}`)));
    setTimeout(() => reject(new Error("fixture startup timed out")), 60_000);
  });
  const info = JSON.parse(line);
  port = info.port;
  nativeWordcountHex = info.wordcount_tlv;
  nativeClosureHex = info.closure_tlv;
}, 90_000);

afterAll(() => {
  server.stdin?.end();
  setTimeout(() => server.kill(), 2_000).unref();
});

describe("remote driver client", () => {
  it("handshakes and pings", async () => {
    const client = await IgnisClient.connect("127.0.0.1", port);
    expect(await client.ping()).toBe("pong");
    client.close();
  });

  it("rejects a protocol version mismatch", async () => {
    // a client compiled against a future protocol must fail loudly
    const net = await import("node:net");
    const raw = net.createConnection({ host: "127.0.0.1", port });
    await new Promise((resolve) => raw.once("connect", resolve));
    const body = Buffer.from([0x49, 0x47, 0x4e, 0x52, 0x02]); // IGNR v2
    const frame = Buffer.concat([Buffer.alloc(4), body]);
    frame.writeUInt32LE(body.length, 0);
    raw.write(frame);
    const reply = await new Promise<Buffer>((resolve) => raw.once("data", resolve));
    expect(reply.readUInt8(4)).toBe(1); // status byte after the length prefix
    raw.destroy();
  });

  it("parallelize + collect of an empty dataframe", async () => {
    const client = await IgnisClient.connect("127.0.0.1", port);
    const cluster = await client.createCluster();
    const worker = await client.createWorker(cluster, "ts-empty", 1n);
    const df = await client.parallelize(worker, [], 2n);
    expect(await client.collect(df)).toEqual([]);
    client.close();
  }, 60_000);

  it("runs a mapped pipeline with lambdas and captured variables", async () => {
    const client = await IgnisClient.connect("127.0.0.1", port);
    const cluster = await client.createCluster();
    const worker = await client.createWorker(cluster, "ts-map", 2n);
    const df = await client.parallelize(worker, [1n, 2n, 3n], 2n);
    const mapped = await client.map(df, lambdaSource("lambda x: $k * x + 1", { k: 10n }));
    expect(await client.collect(mapped)).toEqual([11n, 21n, 31n]);
    expect(await client.count(mapped)).toBe(3n);
    expect(await client.reduce(mapped, lambdaSource("lambda a, b: a + b"))).toBe(63n);
    client.close();
  }, 60_000);

  it("surfaces engine errors as client exceptions with the server message", async () => {
    const client = await IgnisClient.connect("127.0.0.1", port);
    const cluster = await client.createCluster();
    const worker = await client.createWorker(cluster, "ts-err", 1n);
    const df = await client.parallelize(worker, [], 1n);
    await expect(client.reduce(df, lambdaSource("lambda a, b: a + b")))
      .rejects.toThrowError(RemoteError);
    await expect(client.reduce(df, lambdaSource("lambda a, b: a + b")))
      .rejects.toThrowError(/empty/i);
    client.close();
  }, 60_000);

  it("wordcount equals the native run byte-for-byte", async () => {
    const client = await IgnisClient.connect("127.0.0.1", port);
    const cluster = await client.createCluster();
    const worker = await client.createWorker(cluster, "ts-wc", 2n);
    await client.loadLibrary(worker, "ignis.workloads");

    // the exact seeded sentences the native run used (seed 6, size 120),
    // served from inside the engine so neither side duplicates the generator
    const sentences = await fetchSentences(client, worker);
    const df = await client.parallelize(worker, sentences, 4n);
    const words = await client.flatmap(df, registrySource("wl.split_words"));
    const pairs = await client.map(words, lambdaSource("lambda w: (w, 1)"));
    const counted = await client.reduceByKey(pairs, lambdaSource("lambda a, b: a + b"));
    const out = (await client.collect(counted)) as Pair[];
    out.sort((a, b) => {
      const ka = a.first as string;
      const kb = b.first as string;
      return ka < kb ? -1 : ka > kb ? 1 : 0;
    });
    expect(hex(encodeValue(out))).toBe(nativeWordcountHex);
    client.close();
  }, 120_000);

  it("transitive closure equals the native run byte-for-byte", async () => {
    const client = await IgnisClient.connect("127.0.0.1", port);
    const cluster = await client.createCluster();
    const worker = await client.createWorker(cluster, "ts-tc", 2n);
    await client.loadLibrary(worker, "ignis.workloads");
    const edges = await fetchEdges(client, worker);
    let tc = await client.cache(await client.parallelize(worker, edges, 2n));
    for (;;) {
      const before = await client.count(tc);
      const byDst = await client.map(tc, lambdaSource("lambda e: (snd e, fst e)"));
      const joined = await client.join(byDst, tc);
      const extended = await client.map(joined, lambdaSource("lambda j: (fst snd j, snd snd j)"));
      tc = await client.cache(await client.distinct(await client.union(tc, extended)));
      if ((await client.count(tc)) === before) break;
    }
    const closure = (await client.collect(tc)) as Pair[];
    const sorted = closure
      .map((p) => [p.first as bigint, p.second as bigint] as [bigint, bigint])
      .sort((a, b) => (a[0] - b[0] !== 0n ? Number(a[0] - b[0]) : Number(a[1] - b[1])))
      .map(([a, b]) => [a, b] as Value);
    expect(hex(encodeValue(sorted))).toBe(nativeClosureHex);
    client.close();
  }, 120_000);
});

/** The fixture's inputs, regenerated engine-side so both runs share them. */
async function fetchSentences(client: IgnisClient, worker: bigint): Promise<Value[]> {
  const df = await client.callFunction(worker, registrySource("wl.gen_sentences_df", {
    seed: 6n,
    size: 120n,
  }));
  return client.collect(df);
}

async function fetchEdges(client: IgnisClient, worker: bigint): Promise<Value[]> {
  const df = await client.callFunction(worker, registrySource("wl.gen_digraph_df", {
    seed: 6n,
    vertices: 20n,
    edges: 40n,
  }));
  return client.collect(df);
}
