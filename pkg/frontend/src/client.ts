/**
 * Remote driver client for the engine's RPC protocol.
 *
 * The client mirrors the driver API over length-framed binary messages:
 * handshake "IGNR" v1, then per call a u16 LE method id plus a TLV-encoded
 * argument list; the response is one status byte (0 ok, 1 error) plus a TLV
 * payload. Server objects stay server-side; the client only holds opaque
 * handles. Operator logic travels as text lambdas or registry names with
 * captured variables; no code is ever serialized.
 *
 * One connection carries one outstanding request at a time; callers that
 * want parallel requests open more clients.
 */

import * as net from "node:net";

import { Pair, Value, decodeValue, encodeValue } from "./tlv.js";

const MAGIC = Uint8Array.from([0x49, 0x47, 0x4e, 0x52]); // "IGNR"
export const PROTOCOL_VERSION = 1;

// Frozen method-id table for protocol version 1 (see the engine docs).
export const METHOD_IDS: Record<string, number> = {
  ping: 1,
  start: 2,
  stop: 3,
  createCluster: 4,
  createWorker: 5,
  parallelize: 6,
  textFile: 7,
  partitionJsonFile: 8,
  partitionObjectFile: 9,
  importData: 10,
  loadLibrary: 11,
  call: 12,
  voidCall: 13,
  map: 14,
  filter: 15,
  flatmap: 16,
  keyBy: 17,
  mapValues: 18,
  keys: 19,
  values: 20,
  mapPartitions: 21,
  groupByKey: 22,
  groupBy: 23,
  reduceByKey: 24,
  aggregateByKey: 25,
  sortBy: 26,
  sort: 27,
  sortByKey: 28,
  union: 29,
  join: 30,
  distinct: 31,
  sample: 32,
  sampleByKey: 33,
  takeSample: 34,
  count: 35,
  max: 36,
  min: 37,
  countByKey: 38,
  countByValue: 39,
  reduce: 40,
  treeReduce: 41,
  aggregate: 42,
  treeAggregate: 43,
  fold: 44,
  repartition: 45,
  partitionBy: 46,
  collect: 47,
  collectAsMap: 48,
  take: 49,
  top: 50,
  persist: 51,
  cache: 52,
  unpersist: 53,
  uncache: 54,
  saveAsTextFile: 55,
  saveAsJsonFile: 56,
  saveAsObjectFile: 57,
  iterate: 58,
};

export class RemoteError extends Error {}
export class ProtocolVersionError extends Error {}

export type Handle = bigint;
export type Source = Value; // [kind, target, params] descriptor

/** Text lambda source: `lambdaSource("lambda x: x + 1", {k: 2n})`. */
export function lambdaSource(text: string, params: Record<string, Value> = {}): Source {
  const colon = text.indexOf(":");
  if (colon < 0 || !text.trimStart().startsWith("lambda")) {
    throw new TypeError("expected 'lambda <params>: <body>'");
  }
  const head = text.slice(0, colon).replace("lambda", "");
  const names = head
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0);
  const body = text.slice(colon + 1).trim();
  return ["lambda", new Pair(names, body), paramsList(params)];
}

/** Registered or module function source by name. */
export function registrySource(name: string, params: Record<string, Value> = {}): Source {
  return ["registry", name, paramsList(params)];
}

function paramsList(params: Record<string, Value>): Value[] {
  return Object.entries(params).map(([k, v]) => new Pair(k, v));
}

class FrameReader {
  private buffered: Uint8Array = new Uint8Array(0);
  private waiters: Array<(frame: Uint8Array) => void> = [];
  private failure: Error | null = null;
  private failWaiters: Array<(err: Error) => void> = [];

  push(chunk: Uint8Array): void {
    const merged = new Uint8Array(this.buffered.length + chunk.length);
    merged.set(this.buffered, 0);
    merged.set(chunk, this.buffered.length);
    this.buffered = merged;
    this.drain();
  }

  fail(err: Error): void {
    this.failure = err;
    for (const reject of this.failWaiters.splice(0)) reject(err);
  }

  private drain(): void {
    while (this.waiters.length > 0 && this.buffered.length >= 4) {
      const view = new DataView(this.buffered.buffer, this.buffered.byteOffset, 4);
      const length = view.getUint32(0, true);
      if (this.buffered.length < 4 + length) return;
      const frame = this.buffered.slice(4, 4 + length);
      this.buffered = this.buffered.slice(4 + length);
      const resolve = this.waiters.shift()!;
      this.failWaiters.shift();
      resolve(frame);
    }
  }

  next(): Promise<Uint8Array> {
    if (this.failure) return Promise.reject(this.failure);
    return new Promise((resolve, reject) => {
      this.waiters.push(resolve);
      this.failWaiters.push(reject);
      this.drain();
    });
  }
}

export class IgnisClient {
  private socket: net.Socket;
  private frames = new FrameReader();
  private queue: Promise<unknown> = Promise.resolve();

  private constructor(socket: net.Socket) {
    this.socket = socket;
    socket.on("data", (chunk) => this.frames.push(chunk));
    socket.on("error", (err) => this.frames.fail(err));
    socket.on("close", () => this.frames.fail(new RemoteError("connection closed")));
  }

  static async connect(host: string, port: number): Promise<IgnisClient> {
    const socket = await new Promise<net.Socket>((resolve, reject) => {
      const s = net.createConnection({ host, port }, () => {
        s.off("error", reject);
        resolve(s);
      });
      s.once("error", reject);
    });
    socket.setNoDelay(true);
    const client = new IgnisClient(socket);
    const hello = new Uint8Array(5);
    hello.set(MAGIC, 0);
    hello[4] = PROTOCOL_VERSION;
    client.sendFrame(hello);
    const reply = await client.frames.next();
    if (reply[0] !== 0) {
      const message = decodeValue(reply.slice(1));
      client.close();
      throw new ProtocolVersionError(String(message));
    }
    return client;
  }

  close(): void {
    this.socket.destroy();
  }

  private sendFrame(body: Uint8Array): void {
    const frame = new Uint8Array(4 + body.length);
    new DataView(frame.buffer).setUint32(0, body.length, true);
    frame.set(body, 4);
    this.socket.write(frame);
  }

  /** Raw method invocation; one outstanding request at a time. */
  call(method: string, ...args: Value[]): Promise<Value> {
    const id = METHOD_IDS[method];
    if (id === undefined) throw new RemoteError(`unknown method ${method}`);
    const run = async (): Promise<Value> => {
      const payload = encodeValue(args);
      const body = new Uint8Array(2 + payload.length);
      new DataView(body.buffer).setUint16(0, id, true);
      body.set(payload, 2);
      this.sendFrame(body);
      const reply = await this.frames.next();
      const result = decodeValue(reply.slice(1));
      if (reply[0] !== 0) throw new RemoteError(String(result));
      return result;
    };
    const next = this.queue.then(run, run);
    this.queue = next.catch(() => undefined);
    return next;
  }

  // -- driver surface -------------------------------------------------------

  ping(): Promise<Value> {
    return this.call("ping");
  }

  async createCluster(properties?: Record<string, string>): Promise<Handle> {
    const props = properties
      ? Object.entries(properties).map(([k, v]) => new Pair(k, v))
      : null;
    return (await this.call("createCluster", props)) as Handle;
  }

  async createWorker(
    cluster: Handle,
    namespace = "",
    instances: bigint | null = null,
    shared = false,
  ): Promise<Handle> {
    return (await this.call("createWorker", cluster, namespace, instances, shared)) as Handle;
  }

  async parallelize(worker: Handle, data: Value[], partitions: bigint | null = null): Promise<Handle> {
    return (await this.call("parallelize", worker, data, partitions)) as Handle;
  }

  async textFile(worker: Handle, path: string, minPartitions: bigint | null = null): Promise<Handle> {
    return (await this.call("textFile", worker, path, minPartitions)) as Handle;
  }

  async importData(worker: Handle, dataframe: Handle): Promise<Handle> {
    return (await this.call("importData", worker, dataframe)) as Handle;
  }

  async loadLibrary(worker: Handle, target: string): Promise<Value> {
    return this.call("loadLibrary", worker, target);
  }

  async callFunction(worker: Handle, source: Source, dataframe: Handle | null = null): Promise<Handle> {
    return (await this.call("call", worker, source, dataframe)) as Handle;
  }

  async map(df: Handle, source: Source): Promise<Handle> {
    return (await this.call("map", df, source)) as Handle;
  }

  async filter(df: Handle, source: Source): Promise<Handle> {
    return (await this.call("filter", df, source)) as Handle;
  }

  async flatmap(df: Handle, source: Source): Promise<Handle> {
    return (await this.call("flatmap", df, source)) as Handle;
  }

  async reduceByKey(df: Handle, source: Source): Promise<Handle> {
    return (await this.call("reduceByKey", df, source)) as Handle;
  }

  async groupByKey(df: Handle): Promise<Handle> {
    return (await this.call("groupByKey", df)) as Handle;
  }

  async join(df: Handle, other: Handle): Promise<Handle> {
    return (await this.call("join", df, other)) as Handle;
  }

  async union(df: Handle, other: Handle): Promise<Handle> {
    return (await this.call("union", df, other)) as Handle;
  }

  async distinct(df: Handle): Promise<Handle> {
    return (await this.call("distinct", df)) as Handle;
  }

  async sort(df: Handle, ascending = true): Promise<Handle> {
    return (await this.call("sort", df, ascending)) as Handle;
  }

  async cache(df: Handle): Promise<Handle> {
    return (await this.call("cache", df)) as Handle;
  }

  async count(df: Handle): Promise<bigint> {
    return (await this.call("count", df)) as bigint;
  }

  async collect(df: Handle): Promise<Value[]> {
    return (await this.call("collect", df)) as Value[];
  }

  async collectAsMap(df: Handle): Promise<Map<Value, Value>> {
    const pairs = (await this.call("collectAsMap", df)) as Pair[];
    return new Map(pairs.map((p) => [p.first, p.second]));
  }

  async take(df: Handle, n: bigint): Promise<Value[]> {
    return (await this.call("take", df, n)) as Value[];
  }

  async top(df: Handle, n: bigint): Promise<Value[]> {
    return (await this.call("top", df, n)) as Value[];
  }

  async reduce(df: Handle, source: Source): Promise<Value> {
    return this.call("reduce", df, source);
  }
}
