"""Canonical encoding for the grid's value trees.

Everything that crosses a process boundary (demand payloads, WAL records,
wire frames, network documents) is first lowered to a "tree": nested
combinations of int, float, str, list and dict-with-str-keys. A tree has
exactly one canonical text form (sorted map keys, no insignificant
whitespace, shortest-roundtrip floats) so that hashing the bytes of equal
trees always agrees.

Two byte encodings of the same tree model exist:

* text  - canonical JSON subset, always starts with one of ``{[" -0..9``
* binary - tag/length-prefixed, always starts with a tag byte < 0x10

The first payload byte therefore identifies the encoding, which is what
lets a peer switch its transport encoding mid-run without a handshake.
"""

from __future__ import annotations

import json
import math
import struct

TEXT_ENCODING = "text"
BINARY_ENCODING = "binary"

_TAG_INT = 0x01
_TAG_FLOAT = 0x02
_TAG_STR = 0x03
_TAG_LIST = 0x04
_TAG_MAP = 0x05

_I64_MIN = -(2**63)
_I64_MAX = 2**63 - 1


class MalformedEncoding(ValueError):
    """Bytes do not parse as (or are not the canonical form of) a tree."""


def _check_tree(tree):
    if isinstance(tree, bool):
        raise MalformedEncoding("bool is not part of the tree model")
    if isinstance(tree, int):
        if not _I64_MIN <= tree <= _I64_MAX:
            raise MalformedEncoding("integer out of 64-bit range: %d" % tree)
        return
    if isinstance(tree, float):
        if not math.isfinite(tree):
            raise MalformedEncoding("non-finite float in tree")
        return
    if isinstance(tree, str):
        return
    if isinstance(tree, list):
        for item in tree:
            _check_tree(item)
        return
    if isinstance(tree, dict):
        for key, value in tree.items():
            if not isinstance(key, str) or not key:
                raise MalformedEncoding("map keys must be non-empty strings")
            _check_tree(value)
        return
    raise MalformedEncoding("unsupported tree node type: %r" % type(tree))


def text_encode(tree) -> bytes:
    """Canonical text bytes of *tree* (sorted keys, no whitespace, UTF-8)."""
    _check_tree(tree)
    return json.dumps(
        tree, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def _reject_constant(name):
    raise MalformedEncoding("non-finite constant in encoding: %s" % name)


def text_decode(data: bytes):
    """Parse canonical text bytes back into a tree.

    Rejects anything outside the tree model (null, bool, NaN) and any
    non-canonical byte form: the round trip text_encode(text_decode(b)) == b
    must hold.
    """
    if not isinstance(data, (bytes, bytearray)):
        raise MalformedEncoding("expected bytes")
    if len(data) == 0:
        raise MalformedEncoding("empty encoding")
    try:
        tree = json.loads(data.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedEncoding("unparseable encoding: %s" % exc) from exc
    _check_tree(tree)
    if text_encode(tree) != bytes(data):
        raise MalformedEncoding("non-canonical byte form")
    return tree


def binary_encode(tree) -> bytes:
    """Length-prefixed binary bytes of the same tree model, big-endian."""
    _check_tree(tree)
    out = bytearray()
    _binary_write(tree, out)
    return bytes(out)


def _binary_write(tree, out: bytearray):
    if isinstance(tree, int):
        out.append(_TAG_INT)
        out += struct.pack(">q", tree)
    elif isinstance(tree, float):
        out.append(_TAG_FLOAT)
        out += struct.pack(">d", tree)
    elif isinstance(tree, str):
        raw = tree.encode("utf-8")
        out.append(_TAG_STR)
        out += struct.pack(">I", len(raw))
        out += raw
    elif isinstance(tree, list):
        out.append(_TAG_LIST)
        out += struct.pack(">I", len(tree))
        for item in tree:
            _binary_write(item, out)
    else:  # dict, keys sorted so the binary form is canonical too
        out.append(_TAG_MAP)
        out += struct.pack(">I", len(tree))
        for key in sorted(tree):
            raw = key.encode("utf-8")
            out += struct.pack(">I", len(raw))
            out += raw
            _binary_write(tree[key], out)


def binary_decode(data: bytes):
    """Parse binary tree bytes; raises MalformedEncoding on any defect."""
    if not isinstance(data, (bytes, bytearray)):
        raise MalformedEncoding("expected bytes")
    tree, offset = _binary_read(bytes(data), 0)
    if offset != len(data):
        raise MalformedEncoding("trailing bytes after binary tree")
    _check_tree(tree)
    return tree


def _take(data: bytes, offset: int, count: int):
    end = offset + count
    if end > len(data):
        raise MalformedEncoding("truncated binary tree")
    return data[offset:end], end


def _binary_read(data: bytes, offset: int):
    tag_bytes, offset = _take(data, offset, 1)
    tag = tag_bytes[0]
    if tag == _TAG_INT:
        raw, offset = _take(data, offset, 8)
        return struct.unpack(">q", raw)[0], offset
    if tag == _TAG_FLOAT:
        raw, offset = _take(data, offset, 8)
        value = struct.unpack(">d", raw)[0]
        if not math.isfinite(value):
            raise MalformedEncoding("non-finite float in binary tree")
        return value, offset
    if tag == _TAG_STR:
        raw, offset = _take(data, offset, 4)
        length = struct.unpack(">I", raw)[0]
        raw, offset = _take(data, offset, length)
        try:
            return raw.decode("utf-8"), offset
        except UnicodeDecodeError as exc:
            raise MalformedEncoding("invalid UTF-8 in binary tree") from exc
    if tag == _TAG_LIST:
        raw, offset = _take(data, offset, 4)
        count = struct.unpack(">I", raw)[0]
        items = []
        for _ in range(count):
            item, offset = _binary_read(data, offset)
            items.append(item)
        return items, offset
    if tag == _TAG_MAP:
        raw, offset = _take(data, offset, 4)
        count = struct.unpack(">I", raw)[0]
        result = {}
        previous = None
        for _ in range(count):
            raw, offset = _take(data, offset, 4)
            key_len = struct.unpack(">I", raw)[0]
            raw, offset = _take(data, offset, key_len)
            try:
                key = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedEncoding("invalid UTF-8 map key") from exc
            if previous is not None and key <= previous:
                raise MalformedEncoding("map keys out of canonical order")
            previous = key
            value, offset = _binary_read(data, offset)
            result[key] = value
        return result, offset
    raise MalformedEncoding("unknown binary tag 0x%02x" % tag)


def decode_any(data: bytes):
    """Decode a payload in either encoding, sniffing the first byte."""
    if len(data) == 0:
        raise MalformedEncoding("empty encoding")
    if data[0] < 0x10:
        return binary_decode(data)
    return text_decode(data)
