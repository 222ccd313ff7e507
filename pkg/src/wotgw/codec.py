"""JSON key coding/decoding driven by a long-name <-> short-code dictionary.

Object keys equal to a dictionary long name are replaced by the short code
on the device-bound path and restored on the client-bound path. Values are
never rewritten. The hot tree-rewrite runs in a compiled extension when it
was built, with a pure-Python fallback selected at import time.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Iterable

try:
    from wotgw._kernel_cy import rewrite_keys as _rewrite_keys

    _KERNEL = "compiled"
except ImportError:
    from wotgw._kernel_py import rewrite_keys as _rewrite_keys

    _KERNEL = "pure"

_EMPTY = frozenset()


def active_kernel() -> str:
    """Name of the key-rewrite kernel in use: 'compiled' or 'pure'."""
    return _KERNEL


class MappingError(ValueError):
    """Malformed mapping document or broken dictionary invariant."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class KeyCollisionError(ValueError):
    """A document key equals an existing short code, so encoding would not round-trip."""

    def __init__(self, path: str, key: str):
        super().__init__(f"key {key!r} at {path or '/'} collides with a short code")
        self.path = path or "/"
        self.key = key


class FloatToken(float):
    """Float remembering its source text so re-serialization is byte-stable."""

    __slots__ = ("text",)

    def __new__(cls, text: str):
        self = super().__new__(cls, text)
        self.text = text
        return self


class MappingDictionary:
    """Bijective long-name <-> short-code table.

    Validated on construction: nonempty keys, pairwise distinct long names,
    pairwise distinct short codes, and no short code equal to any long name
    (that would make decoding ambiguous). Immutable after construction and
    safe to share across threads.
    """

    __slots__ = ("name", "entries", "to_short", "to_long", "short_codes")

    def __init__(self, entries: Iterable[tuple[str, str]], name: str = "unnamed"):
        entries = tuple((long, short) for long, short in entries)
        validate_entries(entries)
        self.name = name
        self.entries = entries
        self.to_short = {long: short for long, short in entries}
        self.to_long = {short: long for long, short in entries}
        self.short_codes = frozenset(self.to_long)

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self) -> str:
        return f"MappingDictionary({self.name!r}, {len(self.entries)} entries)"



def validate_entries(entries, lines=None) -> None:
    """Check dictionary invariants; ``lines`` maps entry index -> source line."""

    def line(i):
        return lines[i] if lines else None

    longs: dict[str, int] = {}
    shorts: dict[str, int] = {}
    for i, (long, short) in enumerate(entries):
        if not long or not short:
            raise MappingError("empty key in mapping entry", line(i))
        if long in longs:
            raise MappingError(f"duplicate long name {long!r}", line(i))
        if short in shorts:
            raise MappingError(f"duplicate short code {short!r}", line(i))
        longs[long] = i
        shorts[short] = i
    for short, i in shorts.items():
        if short in longs:
            raise MappingError(
                f"short code {short!r} collides with a long name", line(i)
            )


EMPTY_MAPPING = MappingDictionary((), name="empty")


def load_mapping(source: str, name: str = "unnamed") -> MappingDictionary:
    """Load a mapping document, auto-detecting the JSON-object or line format."""
    if source.lstrip()[:1] == "{":
        return load_mapping_json(source, name)
    return load_mapping_text(source, name)


def load_mapping_text(source: str, name: str = "unnamed") -> MappingDictionary:
    """Parse the line format: ``long_name<TAB or space>short_code`` per line.

    '#' starts a comment line, blank lines are ignored. Errors report the
    offending line number.
    """
    entries: list[tuple[str, str]] = []
    lines: list[int] = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split("\t") if "\t" in stripped else stripped.split()
        parts = [p.strip() for p in parts if p.strip()]
        if len(parts) != 2:
            raise MappingError(
                f"expected 'long_name short_code', got {stripped!r}", lineno
            )
        entries.append((parts[0], parts[1]))
        lines.append(lineno)
    validate_entries(entries, lines)
    return MappingDictionary(entries, name)


def load_mapping_json(source: str, name: str = "unnamed") -> MappingDictionary:
    """Parse the JSON-object format: ``{"long_name": "short_code", ...}``."""
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise MappingError(f"invalid JSON mapping document: {exc}", exc.lineno)
    if not isinstance(doc, dict):
        raise MappingError("JSON mapping document must be an object")
    for long, short in doc.items():
        if not isinstance(short, str):
            raise MappingError(f"short code for {long!r} must be a string")
    return MappingDictionary(tuple(doc.items()), name)


def load_mapping_file(path: str, name: str | None = None) -> MappingDictionary:
    with open(path, encoding="utf-8") as fh:
        return load_mapping(fh.read(), name or path)


def encode_keys(doc: Any, mapping: MappingDictionary) -> Any:
    """Replace long-name object keys with short codes, recursively.

    Rejects documents containing a key equal to any short code: silently
    double-mapping such a key would break the round trip.
    """
    try:
        return _rewrite_keys(doc, mapping.to_short, mapping.short_codes)
    except ValueError as exc:
        key = exc.args[0]
        raise KeyCollisionError(_find_key_path(doc, key, mapping.short_codes), key)


def decode_keys(doc: Any, mapping: MappingDictionary) -> Any:
    """Replace short-code object keys with their long names; unknown keys pass through."""
    return _rewrite_keys(doc, mapping.to_long, _EMPTY)


def _find_key_path(value: Any, key: str, forbidden: frozenset, path: str = "") -> str:
    """Locate the first occurrence of a forbidden key, for error reporting."""
    if isinstance(value, dict):
        for k, sub in value.items():
            here = f"{path}/{k}"
            if k in forbidden:
                return here
            found = _find_key_path(sub, key, forbidden, here)
            if found:
                return found
    elif isinstance(value, list):
        for i, item in enumerate(value):
            found = _find_key_path(item, key, forbidden, f"{path}/{i}")
            if found:
                return found
    return ""


# --- canonical serialization -------------------------------------------------
#
# Minified, insertion-ordered serialization is the byte-count and wire basis;
# the key-sorted variant feeds digests so that whitespace and key order do not
# split cache keys. Floats parsed via parse_json() re-emit their source text.


def parse_json(data: bytes | str) -> Any:
    """Parse JSON preserving float source tokens (see FloatToken)."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    return json.loads(data, parse_float=FloatToken)


def dumps_min(value: Any) -> str:
    """Minified serialization, object keys in insertion order."""
    out: list[str] = []
    _write(value, out, sort=False)
    return "".join(out)


def dumps_sorted(value: Any) -> str:
    """Minified serialization with object keys sorted (digest basis)."""
    out: list[str] = []
    _write(value, out, sort=True)
    return "".join(out)


def _write(value: Any, out: list[str], sort: bool) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, FloatToken):
        out.append(value.text)
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite number not representable in JSON: {value}")
        out.append(repr(value))
    elif isinstance(value, dict):
        out.append("{")
        first = True
        items = sorted(value.items()) if sort else value.items()
        for key, sub in items:
            if not isinstance(key, str):
                raise TypeError(f"object key must be a string, got {type(key).__name__}")
            if not first:
                out.append(",")
            first = False
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _write(sub, out, sort)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _write(item, out, sort)
        out.append("]")
    else:
        raise TypeError(f"not JSON-serializable: {type(value).__name__}")


def canonical_bytes(value: Any) -> bytes:
    return dumps_min(value).encode("utf-8")


def digest_value(value: Any) -> str:
    """Digest of the key-sorted minified serialization."""
    return hashlib.sha256(dumps_sorted(value).encode("utf-8")).hexdigest()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def payload_size_delta(original: Any, coded: Any) -> tuple[int, int]:
    """Byte lengths (before, after) of the minified serializations."""
    return len(canonical_bytes(original)), len(canonical_bytes(coded))
