"""Element model: tagged values, their canonical binary form, ordering and hashing.

Elements flowing through the engine are plain Python objects mapped onto eight
tags:

    None -> Null        bool -> Bool        int -> I64 (must fit in 64 bits)
    float -> F64        str -> Str          bytes -> Bytes
    tuple(2) -> Pair    list -> List

The canonical encoding is a TLV scheme (tag byte, little-endian fixed or
length-prefixed payload). It is injective: distinct values never encode to the
same bytes, and decode(encode(v)) == v. Storage tiers, the wire protocol and
hashing all use this one encoding, which is what makes hashes and dedup
identical across processes (and across the remote client implementation).

Ordering is total: primary key is the tag rank in the order above, inside a
tag the natural order applies. I64 and F64 are deliberately not compared
numerically against each other (the tag rank wins) and NaN sorts after every
other float, equal to itself. Note that 0.0 and -0.0 compare equal but encode
to different bytes, so they are one sort key yet two distinct hash/dedup keys.
"""

import math
import struct
from functools import cmp_to_key

from .errors import EncodeError, MalformedEncodingError

TAG_NULL = 0
TAG_BOOL = 1
TAG_I64 = 2
TAG_F64 = 3
TAG_STR = 4
TAG_BYTES = 5
TAG_PAIR = 6
TAG_LIST = 7

_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def value_tag(v):
    """Tag of a value; raises EncodeError for objects outside the model."""
    if v is None:
        return TAG_NULL
    if isinstance(v, bool):  # bool first: it is a subclass of int
        return TAG_BOOL
    if isinstance(v, int):
        return TAG_I64
    if isinstance(v, float):
        return TAG_F64
    if isinstance(v, str):
        return TAG_STR
    if isinstance(v, bytes):
        return TAG_BYTES
    if isinstance(v, tuple):
        if len(v) != 2:
            raise EncodeError(f"pairs have exactly two components, got {len(v)}")
        return TAG_PAIR
    if isinstance(v, list):
        return TAG_LIST
    raise EncodeError(f"unsupported element type {type(v).__name__!r}")


def write_value(v, out):
    """Append the canonical encoding of v to bytearray `out`."""
    tag = value_tag(v)
    out.append(tag)
    if tag == TAG_NULL:
        return
    if tag == TAG_BOOL:
        out.append(1 if v else 0)
    elif tag == TAG_I64:
        if not (_I64_MIN <= v <= _I64_MAX):
            raise EncodeError(f"integer {v} does not fit in 64 bits")
        out += _I64.pack(v)
    elif tag == TAG_F64:
        out += _F64.pack(v)
    elif tag == TAG_STR:
        b = v.encode("utf-8")
        out += _U32.pack(len(b))
        out += b
    elif tag == TAG_BYTES:
        out += _U32.pack(len(v))
        out += v
    elif tag == TAG_PAIR:
        write_value(v[0], out)
        write_value(v[1], out)
    else:  # TAG_LIST
        out += _U32.pack(len(v))
        for item in v:
            write_value(item, out)


def serialize_value(v):
    out = bytearray()
    write_value(v, out)
    return bytes(out)


def read_value(buf, offset=0):
    """Decode one value from buf at offset; returns (value, next_offset)."""
    if offset >= len(buf):
        raise MalformedEncodingError("truncated value: missing tag", offset)
    tag = buf[offset]
    offset += 1
    if tag == TAG_NULL:
        return None, offset
    if tag == TAG_BOOL:
        if offset >= len(buf):
            raise MalformedEncodingError("truncated bool", offset)
        b = buf[offset]
        if b not in (0, 1):
            raise MalformedEncodingError(f"bad bool byte {b:#x}", offset)
        return b == 1, offset + 1
    if tag == TAG_I64:
        if offset + 8 > len(buf):
            raise MalformedEncodingError("truncated i64", offset)
        return _I64.unpack_from(buf, offset)[0], offset + 8
    if tag == TAG_F64:
        if offset + 8 > len(buf):
            raise MalformedEncodingError("truncated f64", offset)
        return _F64.unpack_from(buf, offset)[0], offset + 8
    if tag == TAG_STR or tag == TAG_BYTES:
        if offset + 4 > len(buf):
            raise MalformedEncodingError("truncated length", offset)
        n = _U32.unpack_from(buf, offset)[0]
        offset += 4
        if offset + n > len(buf):
            raise MalformedEncodingError(f"truncated payload of {n} bytes", offset)
        raw = bytes(buf[offset:offset + n])
        offset += n
        if tag == TAG_BYTES:
            return raw, offset
        try:
            return raw.decode("utf-8"), offset
        except UnicodeDecodeError as exc:
            raise MalformedEncodingError(f"invalid utf-8: {exc}", offset - n) from exc
    if tag == TAG_PAIR:
        a, offset = read_value(buf, offset)
        b, offset = read_value(buf, offset)
        return (a, b), offset
    if tag == TAG_LIST:
        if offset + 4 > len(buf):
            raise MalformedEncodingError("truncated list count", offset)
        n = _U32.unpack_from(buf, offset)[0]
        offset += 4
        items = []
        for _ in range(n):
            item, offset = read_value(buf, offset)
            items.append(item)
        return items, offset
    raise MalformedEncodingError(f"unknown tag {tag:#x}", offset - 1)


def deserialize_value(buf):
    v, end = read_value(buf, 0)
    if end != len(buf):
        raise MalformedEncodingError("trailing bytes after value", end)
    return v


# -- ordering ------------------------------------------------------------------

def _cmp(a, b):
    return (a > b) - (a < b)


def compare_values(a, b):
    """Total order over all values; returns -1, 0 or 1."""
    ta, tb = value_tag(a), value_tag(b)
    if ta != tb:
        return -1 if ta < tb else 1
    if ta == TAG_NULL:
        return 0
    if ta == TAG_F64:
        na, nb = math.isnan(a), math.isnan(b)
        if na or nb:
            if na and nb:
                return 0
            return 1 if na else -1  # NaN sorts last
        return _cmp(a, b)
    if ta == TAG_PAIR:
        c = compare_values(a[0], b[0])
        return c if c else compare_values(a[1], b[1])
    if ta == TAG_LIST:
        for x, y in zip(a, b):
            c = compare_values(x, y)
            if c:
                return c
        return _cmp(len(a), len(b))
    # Bool/I64/Str/Bytes all have the natural Python order
    return _cmp(a, b)


def equal_values(a, b):
    return compare_values(a, b) == 0


value_key = cmp_to_key(compare_values)


def _fast_sort_key(elems):
    # Homogeneous primitive runs can sort on the native key, which is much
    # faster than cmp_to_key. NaNs and mixed tags fall back to the comparator.
    tag = None
    for v in elems:
        t = value_tag(v)
        if t in (TAG_PAIR, TAG_LIST, TAG_NULL):
            return None
        if t == TAG_F64 and math.isnan(v):
            return None
        if tag is None:
            tag = t
        elif t != tag:
            return None
    return (lambda v: v) if tag is not None else None


def sorted_values(elems, reverse=False):
    """Sort under compare_values; fast path for homogeneous primitives."""
    key = _fast_sort_key(elems)
    if key is not None:
        return sorted(elems, reverse=reverse)
    return sorted(elems, key=value_key, reverse=reverse)


def sorted_decorated(pairs, reverse=False):
    """Sort (image, payload) tuples by image only. Stable."""
    images = [im for im, _ in pairs]
    key = _fast_sort_key(images)
    if key is not None:
        return sorted(pairs, key=lambda p: p[0], reverse=reverse)
    return sorted(pairs, key=lambda p: value_key(p[0]), reverse=reverse)


# -- hashing -------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data):
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64_MASK
    return h


def hash_value(v):
    """FNV-1a 64 over the canonical encoding; identical on every process."""
    return fnv1a64(serialize_value(v))


# -- JSON mapping (saveAsJsonFile and friends) ----------------------------------

def value_to_json(v):
    """Map a value onto plain JSON-encodable Python data.

    Null->null, Bool->bool, I64->int, F64->number (NaN/inf rejected),
    Str->string, Bytes->base64 string, Pair->2-element array, List->array.
    """
    import base64

    tag = value_tag(v)
    if tag == TAG_F64 and not math.isfinite(v):
        from .errors import IgnisIoError
        raise IgnisIoError("non-finite floats cannot be written as JSON")
    if tag == TAG_BYTES:
        return base64.b64encode(v).decode("ascii")
    if tag == TAG_PAIR:
        return [value_to_json(v[0]), value_to_json(v[1])]
    if tag == TAG_LIST:
        return [value_to_json(x) for x in v]
    return v


def json_to_value(j):
    """Inverse of value_to_json up to the documented ambiguities.

    JSON arrays always come back as List (a saved Pair is indistinguishable
    from a 2-element List) and strings come back as Str (base64 Bytes are not
    recognizable). Objects are flattened to a List of (key, value) pairs in
    key order so arbitrary JSON files can still be ingested.
    """
    if isinstance(j, dict):
        return [(k, json_to_value(j[k])) for k in sorted(j)]
    if isinstance(j, list):
        return [json_to_value(x) for x in j]
    return j
