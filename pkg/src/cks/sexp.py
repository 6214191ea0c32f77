"""Canonical binary S-expressions.

Grammar (no whitespace, exactly one encoding per value)::

    value := atom | list
    atom  := "L" uvarint(len) bytes
    list  := "(" value* ")"

``uvarint`` is unsigned LEB128 and must be minimal. Requests and responses are
``CanonicalMessage`` values encoded as ``(op (tag value) (tag value) ...)``.
"""

from __future__ import annotations

import re
from typing import Iterable, Iterator, Union

from .errors import DecodeError, InvalidTag

Sexp = Union[bytes, list]

ATOM = 0x4C  # "L"
OPEN = 0x28  # "("
CLOSE = 0x29  # ")"
MAX_DEPTH = 32
MAX_TAG_LEN = 32

_TAG_RE = re.compile(r"[a-z0-9_]{1,32}\Z")


def uvarint(n: int) -> bytes:
    if n < 0:
        raise ValueError("uvarint must be non-negative")
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _read_uvarint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    start = pos
    while True:
        if pos >= len(buf):
            raise DecodeError("truncated length")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
        if shift > 63:
            raise DecodeError("length overflow")
    # a trailing zero group means a non-minimal encoding
    if pos - start > 1 and buf[pos - 1] == 0:
        raise DecodeError("non-minimal length")
    return result, pos


def _encode_into(out: bytearray, value: Sexp, depth: int) -> None:
    if isinstance(value, (bytes, bytearray, memoryview)):
        out.append(ATOM)
        out += uvarint(len(value))
        out += value
    elif isinstance(value, (list, tuple)):
        if depth >= MAX_DEPTH:
            raise ValueError("nesting too deep")
        out.append(OPEN)
        for item in value:
            _encode_into(out, item, depth + 1)
        out.append(CLOSE)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


def encode(value: Sexp) -> bytes:
    out = bytearray()
    _encode_into(out, value, 0)
    return bytes(out)


def _decode_at(buf: bytes, pos: int, depth: int) -> tuple[Sexp, int]:
    if pos >= len(buf):
        raise DecodeError("unexpected end of input")
    marker = buf[pos]
    if marker == ATOM:
        n, pos = _read_uvarint(buf, pos + 1)
        end = pos + n
        if end > len(buf):
            raise DecodeError("truncated atom")
        return bytes(buf[pos:end]), end
    if marker == OPEN:
        if depth >= MAX_DEPTH:
            raise DecodeError("nesting too deep")
        items: list = []
        pos += 1
        while True:
            if pos >= len(buf):
                raise DecodeError("unterminated list")
            if buf[pos] == CLOSE:
                return items, pos + 1
            item, pos = _decode_at(buf, pos, depth + 1)
            items.append(item)
    raise DecodeError(f"unexpected byte 0x{marker:02x} at {pos}")


def decode(buf: bytes) -> Sexp:
    value, pos = _decode_at(buf, 0, 0)
    if pos != len(buf):
        raise DecodeError("trailing bytes")
    return value


def check_tag(tag: str) -> str:
    if not isinstance(tag, str) or not _TAG_RE.match(tag):
        raise InvalidTag(f"invalid tag {tag!r}")
    return tag


def int_atom(n: int) -> bytes:
    return str(int(n)).encode("ascii")


def atom_int(raw: bytes) -> int:
    text = raw.decode("ascii", "strict") if raw else ""
    if not re.fullmatch(r"-?(0|[1-9][0-9]*)", text) or text == "-0":
        raise DecodeError(f"not a canonical integer: {raw!r}")
    return int(text)


class CanonicalMessage:
    """``(operation, ((tag, value), ...))``; immutable and validated on construction."""

    __slots__ = ("operation", "arguments")

    def __init__(self, operation: str, arguments: Iterable[tuple[str, bytes]] = ()):
        check_tag(operation)
        args = tuple((check_tag(t), bytes(v)) for t, v in arguments)
        object.__setattr__(self, "operation", operation)
        object.__setattr__(self, "arguments", args)

    def __setattr__(self, name, value):
        raise AttributeError("CanonicalMessage is immutable")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CanonicalMessage):
            return NotImplemented
        return self.operation == other.operation and self.arguments == other.arguments

    def __hash__(self) -> int:
        return hash((self.operation, self.arguments))

    def __repr__(self) -> str:
        return f"CanonicalMessage(operation={self.operation!r}, arguments={self.arguments!r})"

    @classmethod
    def build(cls, operation: str, *pairs: tuple[str, object], **fields: object) -> "CanonicalMessage":
        """Convenience constructor: str/int values are converted to atoms, lists repeat the tag."""
        args: list[tuple[str, bytes]] = []
        for tag, value in list(pairs) + list(fields.items()):
            if value is None:
                continue
            values = value if isinstance(value, (list, tuple)) else [value]
            for v in values:
                args.append((tag, _to_atom(v)))
        return cls(operation, tuple(args))

    def __iter__(self) -> Iterator[tuple[str, bytes]]:
        return iter(self.arguments)

    def get(self, tag: str, default: bytes | None = None) -> bytes | None:
        for t, v in self.arguments:
            if t == tag:
                return v
        return default

    def require(self, tag: str) -> bytes:
        v = self.get(tag)
        if v is None:
            raise DecodeError(f"missing argument {tag!r}")
        return v

    def get_all(self, tag: str) -> list[bytes]:
        return [v for t, v in self.arguments if t == tag]

    def get_str(self, tag: str, default: str | None = None) -> str | None:
        v = self.get(tag)
        if v is None:
            return default
        try:
            return v.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"argument {tag!r} is not UTF-8") from exc

    def get_int(self, tag: str, default: int | None = None) -> int | None:
        v = self.get(tag)
        return default if v is None else atom_int(v)


def _to_atom(value: object) -> bytes:
    if isinstance(value, bool):
        return b"1" if value else b"0"
    if isinstance(value, int):
        return int_atom(value)
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value)
    raise TypeError(f"cannot convert {type(value).__name__} to an atom")


def encode_canonical(msg: CanonicalMessage) -> bytes:
    out = bytearray()
    out.append(OPEN)
    op = msg.operation.encode("ascii")
    out.append(ATOM)
    out += uvarint(len(op))
    out += op
    for tag, value in msg.arguments:
        t = tag.encode("ascii")
        out.append(OPEN)
        out.append(ATOM)
        out += uvarint(len(t))
        out += t
        out.append(ATOM)
        out += uvarint(len(value))
        out += value
        out.append(CLOSE)
    out.append(CLOSE)
    return bytes(out)


def decode_canonical(buf: bytes) -> CanonicalMessage:
    tree = decode(buf)
    if not isinstance(tree, list) or not tree or not isinstance(tree[0], bytes):
        raise DecodeError("message must be a list headed by an operation atom")
    pairs = []
    for item in tree[1:]:
        if not (isinstance(item, list) and len(item) == 2 and all(isinstance(x, bytes) for x in item)):
            raise DecodeError("arguments must be (tag value) pairs")
        pairs.append(item)
    try:
        op = tree[0].decode("ascii")
        args = tuple((t.decode("ascii"), v) for t, v in pairs)
        return CanonicalMessage(op, args)
    except (UnicodeDecodeError, InvalidTag) as exc:
        raise DecodeError(str(exc)) from exc


def pairs(items: Iterable[tuple[str, object]]) -> list[list[bytes]]:
    """Encode a field list as nested ``(tag value)`` lists for structured atoms."""
    return [[check_tag(t).encode("ascii"), _to_atom(v)] for t, v in items if v is not None]
