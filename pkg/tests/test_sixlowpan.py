"""Fragmentation/reassembly against the brute-force oracle, golden
vectors, and the reassembly table's drop/timeout behavior."""

import pathlib
import random

import pytest
from hypothesis import given, settings, strategies as st

from modnet.pktbuf import Backend, buffer_create
from modnet.sixlowpan import (BudgetTooSmall, DatagramTooLarge,
                              MalformedFragment, ReassemblyStatus,
                              ReassemblyTable, fragment, parse_payload)
from oracles import fragment_oracle, reassemble_oracle

SRC = b"\x00" * 7 + b"\x01"
DST = b"\x00" * 7 + b"\x02"


def pattern(n):
    return bytes((i * 7 + 13) & 0xFF for i in range(n))


def make_table(**kw):
    return ReassemblyTable(buffer_create(8192, Backend.DYNAMIC), **kw)


def feed_all(table, frags, src=SRC, dst=DST, now=0):
    result = None
    for frag in frags:
        result = table.step(frag, src, dst, now)
    return result


# -- fragment ----------------------------------------------------------------

def test_small_datagram_unfragmented():
    frags = fragment(pattern(80), 110, 1)
    assert len(frags) == 1
    assert frags[0][0] == 0x41
    assert len(frags[0]) == 81


def test_1280_byte_datagram_matches_oracle():
    frags = fragment(pattern(1280), 110, 21)
    assert frags == fragment_oracle(pattern(1280), 110, 21)
    # FRAG1 carries 104 bytes (largest multiple of 8 <= 106)
    assert len(frags[0]) == 4 + 104


def test_budget_too_small():
    with pytest.raises(BudgetTooSmall):
        fragment(pattern(100), 15, 1)


def test_datagram_too_large():
    with pytest.raises(DatagramTooLarge):
        fragment(pattern(2048), 110, 1)


def test_golden_vectors():
    path = pathlib.Path(__file__).parent / "data" / "frag_vectors.txt"
    lines = path.read_text().splitlines()
    i = 0
    cases = 0
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line.startswith("case "):
            continue
        fields = dict(kv.split("=") for kv in line[5:].split())
        size, budget = int(fields["size"]), int(fields["budget"])
        tag, n = int(fields["tag"]), int(fields["n"])
        expected = []
        while i < len(lines) and lines[i].startswith("  "):
            expected.append(bytes.fromhex(lines[i].strip()))
            i += 1
        assert len(expected) == n
        assert fragment(pattern(size), budget, tag) == expected
        cases += 1
    assert cases >= 10


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=1, max_value=1400),
       st.integers(min_value=16, max_value=110),
       st.integers(min_value=0, max_value=0xFFFF))
def test_fragment_matches_oracle_property(size, budget, tag):
    datagram = pattern(size)
    assert fragment(datagram, budget, tag) == \
        fragment_oracle(datagram, budget, tag)


# -- reassembly --------------------------------------------------------------

def test_reassemble_in_order():
    datagram = pattern(1280)
    frags = fragment(datagram, 110, 9)
    status, chain, _ = feed_all(make_table(), frags)
    assert status == ReassemblyStatus.COMPLETE
    assert chain.to_bytes() == datagram


def test_reassemble_reversed_order():
    datagram = pattern(600)
    frags = fragment(datagram, 110, 9)
    status, chain, _ = feed_all(make_table(), list(reversed(frags)))
    assert status == ReassemblyStatus.COMPLETE
    assert chain.to_bytes() == datagram


def test_reassemble_all_permutations_three_fragments():
    import itertools
    datagram = pattern(250)
    frags = fragment(datagram, 110, 3)
    assert len(frags) == 3
    for perm in itertools.permutations(frags):
        status, chain, _ = feed_all(make_table(), list(perm))
        assert status == ReassemblyStatus.COMPLETE
        assert chain.to_bytes() == datagram


def test_duplicate_fragment_idempotent():
    datagram = pattern(300)
    frags = fragment(datagram, 110, 4)
    table = make_table()
    table.step(frags[0], SRC, DST, 0)
    table.step(frags[0], SRC, DST, 0)  # identical duplicate: fine
    status, chain, _ = feed_all(table, frags[1:])
    assert status == ReassemblyStatus.COMPLETE
    assert chain.to_bytes() == datagram


def test_overlap_with_differing_content_drops_entry():
    datagram = pattern(300)
    frags = fragment(datagram, 110, 4)
    table = make_table()
    table.step(frags[0], SRC, DST, 0)
    poisoned = frags[0][:4] + bytes(len(frags[0]) - 4)
    status, _, _ = table.step(poisoned, SRC, DST, 0)
    assert status == ReassemblyStatus.DROPPED
    assert not table.entries
    assert table.buffer.stats().used == 0


def test_table_full_drops_new_datagram_only():
    table = make_table(max_entries=2)
    for tag in (1, 2):
        frags = fragment(pattern(300), 110, tag)
        table.step(frags[0], SRC, DST, 0)
    frags3 = fragment(pattern(300), 110, 3)
    status, _, _ = table.step(frags3[0], SRC, DST, 0)
    assert status == ReassemblyStatus.DROPPED
    assert len(table.entries) == 2  # existing entries untouched


def test_timeout_reclaims_buffer():
    table = make_table(timeout_us=5_000_000)
    frags = fragment(pattern(1280), 110, 7)
    feed_all(table, frags[:-1])  # one FRAGN missing
    assert table.buffer.stats().used > 0
    assert table.expire(5_000_000) == 1
    assert not table.entries
    assert table.buffer.stats().used == 0


def test_malformed_fragment_rejected():
    table = make_table()
    with pytest.raises(MalformedFragment):
        table.step(b"\xc0\x10", SRC, DST, 0)  # truncated FRAG1
    with pytest.raises(MalformedFragment):
        parse_payload(b"\x00\x01\x02")  # unknown dispatch
    with pytest.raises(MalformedFragment):
        parse_payload(b"")


def test_concurrent_reassembly_two_sources():
    table = make_table(max_entries=2)
    d1, d2 = pattern(500), pattern(400)[::-1]
    f1 = fragment(d1, 110, 11)
    f2 = fragment(d2, 110, 12)
    rng = random.Random(3)
    interleaved = [("a", f) for f in f1] + [("b", f) for f in f2]
    rng.shuffle(interleaved)
    done = {}
    for which, frag in interleaved:
        src = SRC if which == "a" else DST
        status, chain, _ = table.step(frag, src, DST, 0)
        if status == ReassemblyStatus.COMPLETE:
            done[which] = chain.to_bytes()
    assert done == {"a": d1, "b": d2}


# -- round-trip property suite ----------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=1, max_value=1400),
       st.integers(min_value=16, max_value=110),
       st.randoms(use_true_random=False))
def test_fragment_shuffle_reassemble_identity(size, budget, rng):
    datagram = pattern(size)
    frags = fragment(datagram, budget, 1)
    assert reassemble_oracle(frags) == datagram  # oracle self-check
    shuffled = list(frags)
    rng.shuffle(shuffled)
    table = make_table()
    last = None
    for frag in shuffled:
        if frag[0] == 0x41:
            assert frag[1:] == datagram
            return
        last = table.step(frag, SRC, DST, 0)
    status, chain, _ = last
    assert status == ReassemblyStatus.COMPLETE
    assert chain.to_bytes() == datagram
