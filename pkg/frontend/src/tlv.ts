/**
 * Canonical TLV codec for the engine's element model.
 *
 * The mapping to JavaScript values:
 *
 *   Null  <-> null            Bool  <-> boolean
 *   I64   <-> bigint          F64   <-> number
 *   Str   <-> string          Bytes <-> Uint8Array
 *   Pair  <-> Pair            List  <-> Value[]
 *
 * Note that every JS `number` encodes as an IEEE-754 double; integers that
 * must stay integers are bigints. The byte layout matches the engine exactly
 * (tag byte; little-endian fixed or length-prefixed payloads), which the
 * shared golden vector file pins down bit for bit.
 */

export class Pair {
  constructor(public readonly first: Value, public readonly second: Value) {}
}

export type Value =
  | null
  | boolean
  | bigint
  | number
  | string
  | Uint8Array
  | Pair
  | Value[];

const TAG_NULL = 0;
const TAG_BOOL = 1;
const TAG_I64 = 2;
const TAG_F64 = 3;
const TAG_STR = 4;
const TAG_BYTES = 5;
const TAG_PAIR = 6;
const TAG_LIST = 7;

const I64_MIN = -(2n ** 63n);
const I64_MAX = 2n ** 63n - 1n;

const utf8Encoder = new TextEncoder();
const utf8Decoder = new TextDecoder("utf-8", { fatal: true });

class Writer {
  private chunks: Uint8Array[] = [];
  private scratch = new DataView(new ArrayBuffer(8));

  byte(b: number): void {
    this.chunks.push(Uint8Array.of(b));
  }

  raw(bytes: Uint8Array): void {
    this.chunks.push(bytes);
  }

  u32(n: number): void {
    const buf = new Uint8Array(4);
    new DataView(buf.buffer).setUint32(0, n, true);
    this.chunks.push(buf);
  }

  i64(n: bigint): void {
    const buf = new Uint8Array(8);
    new DataView(buf.buffer).setBigInt64(0, n, true);
    this.chunks.push(buf);
  }

  f64(n: number): void {
    const buf = new Uint8Array(8);
    new DataView(buf.buffer).setFloat64(0, n, true);
    this.chunks.push(buf);
  }

  finish(): Uint8Array {
    let total = 0;
    for (const c of this.chunks) total += c.length;
    const out = new Uint8Array(total);
    let at = 0;
    for (const c of this.chunks) {
      out.set(c, at);
      at += c.length;
    }
    return out;
  }
}

function writeValue(v: Value, out: Writer): void {
  if (v === null) {
    out.byte(TAG_NULL);
  } else if (typeof v === "boolean") {
    out.byte(TAG_BOOL);
    out.byte(v ? 1 : 0);
  } else if (typeof v === "bigint") {
    if (v < I64_MIN || v > I64_MAX) {
      throw new RangeError(`integer ${v} does not fit in 64 bits`);
    }
    out.byte(TAG_I64);
    out.i64(v);
  } else if (typeof v === "number") {
    out.byte(TAG_F64);
    out.f64(v);
  } else if (typeof v === "string") {
    const raw = utf8Encoder.encode(v);
    out.byte(TAG_STR);
    out.u32(raw.length);
    out.raw(raw);
  } else if (v instanceof Uint8Array) {
    out.byte(TAG_BYTES);
    out.u32(v.length);
    out.raw(v);
  } else if (v instanceof Pair) {
    out.byte(TAG_PAIR);
    writeValue(v.first, out);
    writeValue(v.second, out);
  } else if (Array.isArray(v)) {
    out.byte(TAG_LIST);
    out.u32(v.length);
    for (const item of v) writeValue(item, out);
  } else {
    throw new TypeError(`unsupported element ${String(v)}`);
  }
}

export function encodeValue(v: Value): Uint8Array {
  const w = new Writer();
  writeValue(v, w);
  return w.finish();
}

class Reader {
  private view: DataView;
  offset = 0;

  constructor(private buf: Uint8Array) {
    this.view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  }

  private need(n: number): void {
    if (this.offset + n > this.buf.length) {
      throw new RangeError(`truncated value at byte offset ${this.offset}`);
    }
  }

  byte(): number {
    this.need(1);
    return this.buf[this.offset++];
  }

  u32(): number {
    this.need(4);
    const n = this.view.getUint32(this.offset, true);
    this.offset += 4;
    return n;
  }

  i64(): bigint {
    this.need(8);
    const n = this.view.getBigInt64(this.offset, true);
    this.offset += 8;
    return n;
  }

  f64(): number {
    this.need(8);
    const n = this.view.getFloat64(this.offset, true);
    this.offset += 8;
    return n;
  }

  raw(n: number): Uint8Array {
    this.need(n);
    const out = this.buf.slice(this.offset, this.offset + n);
    this.offset += n;
    return out;
  }

  atEnd(): boolean {
    return this.offset === this.buf.length;
  }
}

function readValue(r: Reader): Value {
  const tag = r.byte();
  switch (tag) {
    case TAG_NULL:
      return null;
    case TAG_BOOL: {
      const b = r.byte();
      if (b !== 0 && b !== 1) throw new RangeError(`bad bool byte ${b}`);
      return b === 1;
    }
    case TAG_I64:
      return r.i64();
    case TAG_F64:
      return r.f64();
    case TAG_STR:
      return utf8Decoder.decode(r.raw(r.u32()));
    case TAG_BYTES:
      return r.raw(r.u32());
    case TAG_PAIR: {
      const first = readValue(r);
      return new Pair(first, readValue(r));
    }
    case TAG_LIST: {
      const n = r.u32();
      const items: Value[] = [];
      for (let i = 0; i < n; i++) items.push(readValue(r));
      return items;
    }
    default:
      throw new RangeError(`unknown tag 0x${tag.toString(16)}`);
  }
}

export function decodeValue(buf: Uint8Array): Value {
  const r = new Reader(buf);
  const v = readValue(r);
  if (!r.atEnd()) throw new RangeError("trailing bytes after value");
  return v;
}

/** Structural equality under the element model (Pair/bytes aware). */
export function valuesEqual(a: Value, b: Value): boolean {
  const ea = encodeValue(a);
  const eb = encodeValue(b);
  if (ea.length !== eb.length) return false;
  for (let i = 0; i < ea.length; i++) if (ea[i] !== eb[i]) return false;
  return true;
}
