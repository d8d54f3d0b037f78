import pytest
from hypothesis import given
from hypothesis import strategies as st

from bftwf.blockstore import (
    Block,
    ChainConfigError,
    ChainError,
    ChainStore,
    PeerMessage,
    SequenceGap,
    accept_blocks,
    decode_blocks,
    serve_peer,
    verify_chain,
)
from bftwf.encoding import ZERO_DIGEST
from oracles import chain_hash, chain_records


def filled(n, path=None, origin=lambda k: k % 4):
    store = ChainStore(path)
    for k in range(1, n + 1):
        store.append_ordered(f'{{"op":{k}}}'.encode(), origin(k))
    return store


def test_genesis_block():
    store = ChainStore()
    blk = store.append_ordered(b"first", 2)
    assert (blk.sequenceNumber, blk.prevHash, blk.originNode) == (1, ZERO_DIGEST, 2)
    assert blk.hash == chain_hash(1, ZERO_DIGEST, b"first", 2)


def test_hashes_match_raw_oracle_and_are_identical_across_nodes():
    a, b = filled(12), filled(12)
    prev = ZERO_DIGEST
    for k in range(1, 13):
        blk = a.get(k)
        assert blk.hash == chain_hash(k, prev, blk.payload, blk.originNode)
        assert blk.hash == b.get(k).hash
        prev = blk.hash


def test_sequence_gap():
    store = filled(3)
    with pytest.raises(SequenceGap) as exc:
        store.append_ordered(b"x", 0, seq=5)
    assert (exc.value.expected, exc.value.got) == (4, 5)


def test_verify_ok():
    store = filled(10)
    report = verify_chain(store)
    assert report.ok and report.head == store.head_hash and report.broken_at is None


def test_flipped_payload_byte_on_disk(tmp_path):
    path = tmp_path / "chain.log"
    filled(10, path).close()
    raw = bytearray(path.read_bytes())
    off, length = chain_records(bytes(raw))[5]  # block 6
    payload_at = off + 4 + 8 + 32 + 4 + 4
    raw[payload_at] ^= 0x20
    path.write_bytes(bytes(raw))
    store = ChainStore(path)
    blk = store.get(6)
    assert chain_hash(6, blk.prevHash, blk.payload, blk.originNode) != blk.hash  # oracle agrees it is broken
    report = verify_chain(store)
    assert not report.ok and report.broken_at == 6


def test_missing_block_reported():
    store = filled(10)
    h4 = store.get(4).hash
    del store.blocks[4]
    report = verify_chain(store)
    assert not report.ok and report.missing == [h4]


def test_empty_chain_verifies():
    assert verify_chain(ChainStore()).ok


def test_serve_range_and_unknown_hash():
    store = filled(10)
    reply = serve_peer(store, PeerMessage("BlockRequest", 1, {"from": 4, "to": 7, "nonce": 9}), 0)
    blocks = decode_blocks(reply.body["blocks"])
    assert [b.sequenceNumber for b in blocks] == [4, 5, 6, 7] and reply.body["nonce"] == 9
    reply = serve_peer(store, PeerMessage("BlockRequest", 1, {"hash": "00" * 32}), 0)
    assert reply.body["blocks"] == []
    assert serve_peer(store, PeerMessage("BlockSend", 1, {}), 0) is None


def test_bad_prev_hash_discarded():
    source = filled(6)
    dest = filled(3)
    good = source.range(4, 3)
    forged = Block.build(5, b"\x07" * 32, good[1].payload, good[1].originNode)
    stored, sender_ok = accept_blocks(dest, [good[0], forged, good[2]])
    assert (stored, sender_ok) == (1, False)
    assert dest.head_seq == 4 and dest.get(5) is None


def test_accept_requires_attested_target():
    source = filled(8)
    dest = ChainStore()
    # Short of the target: nothing stored.
    assert accept_blocks(dest, source.range(1, 5), (8, source.head_hash)) == (0, True)
    assert dest.head_seq == 0
    # Right length, wrong final hash: nothing stored, sender suspect.
    assert accept_blocks(dest, source.range(1, 8), (8, b"\x01" * 32)) == (0, False)
    assert accept_blocks(dest, source.range(1, 8), (8, source.head_hash)) == (8, True)
    assert dest.head_hash == source.head_hash


def test_persistence_reload(tmp_path):
    path = tmp_path / "chain.log"
    store = filled(20, path)
    head = store.head_hash
    store.close()
    again = ChainStore(path)
    assert again.head_seq == 20 and again.head_hash == head and verify_chain(again).ok
    again.append_ordered(b"more", 1)
    again.close()
    assert ChainStore(path).head_seq == 21


def test_hash_function_mismatch(tmp_path):
    path = tmp_path / "chain.log"
    filled(2, path).close()
    with pytest.raises(ChainConfigError):
        ChainStore(path, hash_id="sha512")


def test_other_hash_function(tmp_path):
    store = ChainStore(tmp_path / "c.log", hash_id="sha512")
    store.append_ordered(b"x", 0)
    assert len(store.head_hash) == 64 and verify_chain(store).ok


def test_truncate_and_damage(tmp_path):
    path = tmp_path / "chain.log"
    filled(10, path).close()
    raw = bytearray(path.read_bytes())
    off, _ = chain_records(bytes(raw))[3]
    raw[off] ^= 0xFF  # length prefix of block 4
    path.write_bytes(bytes(raw))
    store = ChainStore(path)
    assert store.damaged_at == 4 and store.head_seq == 3
    assert verify_chain(store).broken_at == 4
    with pytest.raises(ChainError):
        store.append_ordered(b"x", 0)
    store.truncate(3)
    store.append_ordered(b"x", 0)
    store.close()
    reloaded = ChainStore(path)
    assert reloaded.head_seq == 4 and verify_chain(reloaded).ok


# -- properties -------------------------------------------------------------

payloads = st.lists(st.binary(min_size=0, max_size=40), min_size=1, max_size=15)


@given(payloads, st.data())
def test_single_bit_flip_is_caught_at_that_block(tmp_path_factory, blobs, data):
    path = tmp_path_factory.mktemp("flip") / "chain.log"
    store = ChainStore(path)
    for i, p in enumerate(blobs):
        store.append_ordered(p, i % 3)
    store.close()
    raw = bytearray(path.read_bytes())
    records = chain_records(bytes(raw))
    k = data.draw(st.integers(1, len(records)))
    off, length = records[k - 1]
    pos = data.draw(st.integers(off, off + length - 1))
    raw[pos] ^= 1 << data.draw(st.integers(0, 7))
    path.write_bytes(bytes(raw))
    report = verify_chain(ChainStore(path))
    assert not report.ok and report.broken_at == k


@given(payloads)
def test_append_then_verify_always_ok(blobs):
    store = ChainStore()
    for i, p in enumerate(blobs):
        store.append_ordered(p, i)
        assert verify_chain(store).ok


@given(payloads, st.data())
def test_torn_write_reloads_verifiable_prefix(tmp_path_factory, blobs, data):
    path = tmp_path_factory.mktemp("torn") / "chain.log"
    store = ChainStore(path)
    hashes = [store.append_ordered(p, 0).hash for p in blobs]
    store.close()
    raw = path.read_bytes()
    cut = data.draw(st.integers(6 + raw[5], len(raw)))
    path.write_bytes(raw[:cut])
    again = ChainStore(path)
    assert verify_chain(again).ok
    assert [again.get(k).hash for k in range(1, again.head_seq + 1)] == hashes[: again.head_seq]
