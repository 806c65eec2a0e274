"""Deterministic identities: canonical parameter bytes and the two operator digests.

Everything here is pure and platform-independent. Deduplication correctness
rests on these digests, so the encoding is fixed: SHA-256 over a
length-prefixed field concatenation, domain-separated by a one-byte tag per
identity kind. Artifact content hashes are untagged SHA-256 of the raw bytes
so they can be recomputed by any external tool.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .errors import UnsupportedValue

_TAG_TASK = b"\x01"
_TAG_EXEC = b"\x02"


@dataclass(frozen=True)
class ContentHash:
    """Address of an immutable artifact: lowercase-hex SHA-256 of its bytes."""

    digest: str

    def raw(self) -> bytes:
        return bytes.fromhex(self.digest)

    def __str__(self) -> str:
        return self.digest


@dataclass(frozen=True)
class TaskIdentity:
    """Digest of (model, canonical params, ordered input hashes).

    Equality means the computation is the same work and its output is
    shareable across workflows and tenants.
    """

    digest: str

    def __str__(self) -> str:
        return self.digest


@dataclass(frozen=True)
class ExecSignature:
    """Digest of (model, canonical params, resource class), inputs omitted.

    Equality means two operators are batch-compatible on one loaded executor.
    """

    digest: str

    def __str__(self) -> str:
        return self.digest


def canonicalize_params(params: Mapping[str, Any]) -> bytes:
    """Serialize a parameter map to its unique canonical byte form.

    Keys are sorted lexicographically at every nesting level, floats are
    rendered in shortest round-trip decimal form, and the output is UTF-8.
    Allowed values: str, bool, int, finite float, None, and nested lists and
    string-keyed maps thereof.
    """
    out = bytearray()
    _write_value(out, params)
    return bytes(out)


def _write_value(out: bytearray, value: Any) -> None:
    if value is None:
        out += b"null"
    elif isinstance(value, bool):
        out += b"true" if value else b"false"
    elif isinstance(value, int):
        out += str(value).encode("ascii")
    elif isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise UnsupportedValue(f"non-finite float {value!r} is not canonicalizable")
        out += repr(value).encode("ascii")
    elif isinstance(value, str):
        out += json.dumps(value, ensure_ascii=False).encode("utf-8")
    elif isinstance(value, (list, tuple)):
        out += b"["
        for i, item in enumerate(value):
            if i:
                out += b","
            _write_value(out, item)
        out += b"]"
    elif isinstance(value, Mapping):
        out += b"{"
        for i, key in enumerate(sorted(value.keys())):
            if not isinstance(key, str):
                raise UnsupportedValue(f"map key {key!r} is not a string")
            if i:
                out += b","
            out += json.dumps(key, ensure_ascii=False).encode("utf-8")
            out += b":"
            _write_value(out, value[key])
        out += b"}"
    else:
        raise UnsupportedValue(f"value of type {type(value).__name__} is not canonicalizable")


def content_hash(data: bytes) -> ContentHash:
    """Hash raw artifact bytes to their store address."""
    return ContentHash(hashlib.sha256(data).hexdigest())


def model_hash_for_ref(model_ref: str) -> ContentHash:
    """Stand-in model digest: hash of the opaque model identifier string.

    At desk scale model weights are never materialized, so the reference
    string (id plus version) is the hashed execution context.
    """
    return content_hash(model_ref.encode("utf-8"))


def _digest_fields(tag: bytes, fields: Iterable[bytes]) -> str:
    h = hashlib.sha256()
    h.update(tag)
    for field in fields:
        h.update(len(field).to_bytes(8, "big"))
        h.update(field)
    return h.hexdigest()


def task_identity(
    model_hash: ContentHash,
    params: Mapping[str, Any],
    input_hashes: Iterable[ContentHash],
) -> TaskIdentity:
    """Identity over the full execution context, input order included."""
    fields = [model_hash.raw(), canonicalize_params(params)]
    fields.extend(h.raw() for h in input_hashes)
    return TaskIdentity(_digest_fields(_TAG_TASK, fields))


def exec_signature(
    model_hash: ContentHash,
    params: Mapping[str, Any],
    resource_class: str,
) -> ExecSignature:
    """Batch-compatibility signature: like task_identity but inputs replaced
    by the resource class, so input-distinct operators can share it."""
    fields = [
        model_hash.raw(),
        canonicalize_params(params),
        str(resource_class).encode("utf-8"),
    ]
    return ExecSignature(_digest_fields(_TAG_EXEC, fields))
