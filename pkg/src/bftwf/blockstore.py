"""Local hash chain, one workflow operation per block.

On-disk layout (``chain.log``)::

    header : b"BWFC" | u8 format version | u8 len | hash id (ascii)
    record*: u32 length | u64 seq | 32B prevHash | u32 originNode
             | u32 payload length | payload | 32B hash

Records are positional: the k-th record is block k.  A torn trailing record
is dropped on load.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .encoding import DIGEST_SIZE, HASH_ID, ZERO_DIGEST, digest

MAGIC = b"BWFC"
FORMAT_VERSION = 1
_HEAD = struct.Struct(">Q32sII")
_LEN = struct.Struct(">I")
_HASH_PREFIX = struct.Struct(">Q")
_ORIGIN = struct.Struct(">I")


class ChainError(Exception):
    pass


class SequenceGap(ChainError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"sequence-gap: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class ChainConfigError(ChainError):
    pass


def block_hash(seq: int, prev_hash: bytes, payload: bytes, origin: int, hash_id: str = HASH_ID) -> bytes:
    return digest(_HASH_PREFIX.pack(seq) + prev_hash + payload + _ORIGIN.pack(origin), hash_id)


@dataclass(frozen=True)
class Block:
    sequenceNumber: int
    prevHash: bytes
    payload: bytes
    originNode: int
    hash: bytes

    @classmethod
    def build(cls, seq: int, prev_hash: bytes, payload: bytes, origin: int, hash_id: str = HASH_ID) -> "Block":
        return cls(seq, prev_hash, payload, origin, block_hash(seq, prev_hash, payload, origin, hash_id))

    def recompute(self, hash_id: str = HASH_ID) -> bytes:
        return block_hash(self.sequenceNumber, self.prevHash, self.payload, self.originNode, hash_id)

    def encode(self) -> bytes:
        return _HEAD.pack(self.sequenceNumber, self.prevHash, self.originNode, len(self.payload)) + self.payload + self.hash

    @classmethod
    def decode(cls, rec: bytes) -> "Block":
        seq, prev, origin, n = _HEAD.unpack_from(rec, 0)
        start = _HEAD.size
        if len(rec) != start + n + DIGEST_SIZE:
            raise ChainError("bad record length")
        return cls(seq, prev, bytes(rec[start : start + n]), origin, bytes(rec[start + n :]))

    def to_dict(self) -> dict:
        return {
            "seq": self.sequenceNumber,
            "prevHash": self.prevHash.hex(),
            "originNode": self.originNode,
            "payload": self.payload.decode("utf-8", "replace"),
            "hash": self.hash.hex(),
        }


@dataclass
class VerifyReport:
    ok: bool
    head: bytes | None = None
    broken_at: int | None = None
    missing: list[bytes] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "head": self.head.hex() if self.head else None,
            "brokenAt": self.broken_at,
            "missing": [h.hex() for h in self.missing],
        }


class ChainStore:
    """Append-only block log with seq and hash indexes.

    ``path=None`` keeps everything in memory (simulation).
    """

    def __init__(self, path: Path | str | None = None, hash_id: str = HASH_ID, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.hash_id = hash_id
        self.fsync = fsync
        self.blocks: dict[int, Block] = {}
        self._by_hash: dict[bytes, int] = {}
        self._head = 0
        self._fh = None
        # Set when a stored record in the middle of the log cannot be parsed;
        # blocks from here on are unreadable until the log is truncated.
        self.damaged_at: int | None = None
        if self.path is not None:
            self._open()

    # -- persistence ---------------------------------------------------------

    def _header(self) -> bytes:
        hid = self.hash_id.encode("ascii")
        return MAGIC + bytes([FORMAT_VERSION, len(hid)]) + hid

    def _open(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "wb") as fh:
                fh.write(self._header())
        else:
            self._load()
        self._fh = open(self.path, "ab")

    def _load(self) -> None:
        data = self.path.read_bytes()
        if data[:4] != MAGIC or len(data) < 6:
            raise ChainConfigError("not a chain log")
        hid = data[6 : 6 + data[5]].decode("ascii")
        if hid != self.hash_id:
            raise ChainConfigError(f"chain uses {hid}, configured {self.hash_id}")
        pos = 6 + data[5]
        k = 0
        good_end = pos
        while pos < len(data):
            if pos + 4 > len(data):
                break  # torn length prefix
            (n,) = _LEN.unpack_from(data, pos)
            if pos + 4 + n > len(data):
                # A torn write leaves a short record.  If the record's own
                # header says it fits in the file, the prefix was damaged.
                inner = self._inner_end(data, pos)
                if inner is not None and inner <= len(data):
                    self.damaged_at = k + 1
                break
            try:
                blk = Block.decode(data[pos + 4 : pos + 4 + n])
            except (ChainError, struct.error):
                self.damaged_at = k + 1
                break
            k += 1
            self._index(k, blk)
            pos += 4 + n
            good_end = pos
        if self.damaged_at is None and good_end != len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
        self._advance_head()

    @staticmethod
    def _inner_end(data: bytes, pos: int) -> int | None:
        start = pos + 4
        if start + _HEAD.size > len(data):
            return None
        plen = _HEAD.unpack_from(data, start)[3]
        return start + _HEAD.size + plen + DIGEST_SIZE

    def _write(self, blk: Block) -> None:
        if self._fh is None:
            return
        rec = blk.encode()
        self._fh.write(_LEN.pack(len(rec)) + rec)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _rewrite(self) -> None:
        if self.path is None:
            return
        self.close()
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(self._header())
            for k in range(1, self._head + 1):
                rec = self.blocks[k].encode()
                fh.write(_LEN.pack(len(rec)) + rec)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        self._fh = open(self.path, "ab")

    # -- index ---------------------------------------------------------------

    def _index(self, k: int, blk: Block) -> None:
        old = self.blocks.get(k)
        if old is not None:
            self._by_hash.pop(old.hash, None)
        self.blocks[k] = blk
        self._by_hash[blk.hash] = k

    def _advance_head(self) -> None:
        while self._head + 1 in self.blocks:
            self._head += 1

    @property
    def head_seq(self) -> int:
        return self._head

    @property
    def head_hash(self) -> bytes:
        return self.blocks[self._head].hash if self._head else ZERO_DIGEST

    @property
    def head(self) -> tuple[int, bytes]:
        return self._head, self.head_hash

    def __len__(self) -> int:
        return self._head

    def get(self, seq: int) -> Block | None:
        return self.blocks.get(seq)

    def get_by_hash(self, h: bytes) -> Block | None:
        k = self._by_hash.get(h)
        return self.blocks.get(k) if k is not None else None

    def seq_of(self, h: bytes) -> int | None:
        if h == ZERO_DIGEST:
            return 0
        return self._by_hash.get(h)

    def range(self, start: int, count: int) -> list[Block]:
        out = []
        for k in range(max(start, 1), start + count):
            blk = self.blocks.get(k)
            if blk is None:
                break
            out.append(blk)
        return out

    # -- mutation ------------------------------------------------------------

    def append_ordered(self, payload: bytes, origin: int, seq: int | None = None) -> Block:
        """Build the next block on the head and persist it."""
        if self.damaged_at is not None:
            raise ChainError(f"log damaged at block {self.damaged_at}; truncate first")
        if seq is None:
            seq = self._head + 1
        if seq != self._head + 1:
            raise SequenceGap(self._head + 1, seq)
        blk = Block.build(seq, self.head_hash, payload, origin, self.hash_id)
        self._write(blk)
        self._index(seq, blk)
        self._head = seq
        return blk

    def insert(self, blk: Block) -> None:
        """Store an already verified block (catch-up path)."""
        if self.damaged_at is not None:
            raise ChainError(f"log damaged at block {self.damaged_at}; truncate first")
        k = blk.sequenceNumber
        self._index(k, blk)
        if k == self._head + 1:
            self._write(blk)
            self._head = k
            while self._head + 1 in self.blocks:
                self._head += 1
                self._write(self.blocks[self._head])

    def truncate(self, keep_upto: int) -> None:
        for k in [k for k in self.blocks if k > keep_upto]:
            self._by_hash.pop(self.blocks.pop(k).hash, None)
        self._head = min(self._head, keep_upto)
        self.damaged_at = None
        self._rewrite()

    def wipe(self) -> None:
        self.blocks.clear()
        self._by_hash.clear()
        self._head = 0
        self.damaged_at = None
        self._rewrite()


def verify_chain(store: ChainStore, from_hash: bytes | None = None) -> VerifyReport:
    """Walk back from ``from_hash`` (default: the local head) to genesis.

    Every block's hash is recomputed and must match both its stored hash and
    its successor's ``prevHash``.  Stops at the first broken link.
    """
    hid = store.hash_id
    if from_hash is None:
        from_hash = store.head_hash
        if store.damaged_at is not None:
            # Everything below the damaged record must still verify.
            below = verify_chain(store, from_hash)
            if not below.ok:
                return below
            return VerifyReport(False, from_hash, broken_at=store.damaged_at)
    if from_hash == ZERO_DIGEST:
        return VerifyReport(True, from_hash)
    top = store.seq_of(from_hash)
    if top is None:
        return VerifyReport(False, from_hash, missing=[from_hash])
    missing = []
    expected: bytes | None = from_hash
    for k in range(top, 0, -1):
        blk = store.blocks.get(k)
        if blk is None:
            if expected is not None:
                missing.append(expected)
            expected = None
            continue
        if blk.sequenceNumber != k or blk.recompute(hid) != blk.hash:
            return VerifyReport(False, from_hash, broken_at=k, missing=missing)
        if expected is not None and blk.hash != expected:
            return VerifyReport(False, from_hash, broken_at=k, missing=missing)
        expected = blk.prevHash
    if expected is not None and expected != ZERO_DIGEST:
        return VerifyReport(False, from_hash, broken_at=1, missing=missing)
    return VerifyReport(not missing, from_hash, missing=missing)


def verify_segment(blocks: list[Block], prev_hash: bytes, hash_id: str = HASH_ID) -> int:
    """Check a contiguous run of blocks hangs off ``prev_hash``.

    Returns the number of leading blocks that verify.
    """
    good = 0
    expected_seq = blocks[0].sequenceNumber if blocks else 0
    for blk in blocks:
        if blk.sequenceNumber != expected_seq or blk.prevHash != prev_hash or blk.recompute(hash_id) != blk.hash:
            break
        prev_hash = blk.hash
        expected_seq += 1
        good += 1
    return good


# -- peer block exchange ------------------------------------------------------


@dataclass
class PeerMessage:
    kind: str  # "BlockRequest" | "BlockSend"
    sender: int
    body: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sender": self.sender, "body": self.body}

    @classmethod
    def from_dict(cls, d: dict) -> "PeerMessage":
        return cls(d["kind"], int(d["sender"]), dict(d["body"]))


def encode_blocks(blocks: list[Block]) -> list[str]:
    return [b.encode().hex() for b in blocks]


def decode_blocks(raw: list[str]) -> list[Block]:
    out = []
    for r in raw:
        try:
            out.append(Block.decode(bytes.fromhex(r)))
        except (ValueError, ChainError, struct.error):
            continue
    return out


MAX_SEND = 1 << 20


def serve_peer(store: ChainStore, msg: PeerMessage, self_id: int) -> PeerMessage | None:
    """Answer a BlockRequest with whatever blocks are held locally."""
    if msg.kind != "BlockRequest":
        return None
    body = msg.body
    if "hash" in body:
        blk = store.get_by_hash(bytes.fromhex(body["hash"]))
        blocks = [blk] if blk else []
    else:
        start = int(body.get("from", 1))
        end = int(body.get("to", start))
        blocks = store.range(start, min(end - start + 1, MAX_SEND))
    return PeerMessage("BlockSend", self_id, {"blocks": encode_blocks(blocks), "nonce": body.get("nonce")})


def accept_blocks(store: ChainStore, blocks: list[Block], target: tuple[int, bytes] | None = None) -> tuple[int, bool]:
    """Verify and store blocks received from a peer.

    Blocks must extend the local head contiguously.  With ``target`` (the
    consensus-attested height and hash of the last block) the whole segment
    up to that height must be present and end exactly at that hash, otherwise
    nothing is stored.  Returns ``(stored, sender_ok)``; an invalid block
    discards the rest of the batch and marks the sender as suspect.
    """
    blocks = sorted(blocks, key=lambda b: b.sequenceNumber)
    blocks = [b for b in blocks if b.sequenceNumber > store.head_seq]
    if target is not None:
        blocks = [b for b in blocks if b.sequenceNumber <= target[0]]
    if not blocks or blocks[0].sequenceNumber != store.head_seq + 1:
        return 0, True
    good = verify_segment(blocks, store.head_hash, store.hash_id)
    sender_ok = good == len(blocks)
    run = blocks[:good]
    if target is not None:
        if not run or run[-1].sequenceNumber != target[0]:
            return 0, sender_ok
        if run[-1].hash != target[1]:
            return 0, False
    for b in run:
        store.insert(b)
    return len(run), sender_ok
