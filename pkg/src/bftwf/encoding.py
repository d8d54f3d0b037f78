"""Canonical serialization and hashing shared by every node.

Anything that is hashed into a block or compared across replicas goes
through :func:`canonical`, so it must be bit-exact: UTF-8 JSON with sorted
keys and no insignificant whitespace.
"""

import hashlib
import json
import struct

HASH_ID = "sha256"
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

_FRAME = struct.Struct(">I")


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def from_canonical(data: bytes):
    return json.loads(data.decode("utf-8"))


def digest(data: bytes, hash_id: str = HASH_ID) -> bytes:
    if hash_id != "sha256":
        return hashlib.new(hash_id, data).digest()
    return hashlib.sha256(data).digest()


def frame(payload: bytes) -> bytes:
    """Length-prefix a payload (4-byte big-endian length)."""
    return _FRAME.pack(len(payload)) + payload


def unframe(buf: bytes):
    """Split complete frames off ``buf``; returns (frames, remainder)."""
    frames = []
    pos = 0
    while len(buf) - pos >= 4:
        (n,) = _FRAME.unpack_from(buf, pos)
        if len(buf) - pos - 4 < n:
            break
        frames.append(bytes(buf[pos + 4 : pos + 4 + n]))
        pos += 4 + n
    return frames, buf[pos:]
