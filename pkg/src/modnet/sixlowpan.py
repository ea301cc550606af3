"""Adaptation layer: uncompressed-IPv6 dispatch plus fragmentation and
reassembly, so 1280-byte datagrams traverse 127-byte link frames.

Fragment encodings (big-endian):

    FRAG1:  5 dispatch bits 11000 | 11-bit datagram_size, 16-bit tag
            (4 bytes) followed by the leading datagram bytes
    FRAGN:  5 dispatch bits 11100 | size, tag, 1-byte offset in 8-byte
            units (5 bytes) followed by an 8-aligned slice
    uncompressed IPv6: single dispatch byte 0x41 followed by the datagram

All offsets are multiples of 8 bytes; only the final fragment may carry a
tail that is not.  Header compression (IPHC) is out of scope; only the
uncompressed dispatch path exists.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from . import netapi
from .metrics import CopySite
from .netapi import ENOTSUP, DEMUX_ALL, DEMUX_RAW, MsgKind
from .pktbuf import AllocPriority, NoBufferSpace, PacketChain, ProtocolType

DISPATCH_UNCOMPRESSED = 0x41
FRAG1_DISPATCH = 0b11000
FRAGN_DISPATCH = 0b11100
FRAG1_HDR_LEN = 4
FRAGN_HDR_LEN = 5
MAX_DATAGRAM = 2047  # 11-bit size field
MIN_BUDGET = 16  # must fit FRAGN header + one 8-byte unit

DEFAULT_REASSEMBLY_ENTRIES = 2
DEFAULT_REASSEMBLY_TIMEOUT_US = 5_000_000


class SixlowpanError(Exception):
    pass


class DatagramTooLarge(SixlowpanError):
    pass


class BudgetTooSmall(SixlowpanError):
    pass


class MalformedFragment(SixlowpanError):
    pass


def fragment(datagram: bytes, link_payload_budget: int, tag: int) -> list[bytes]:
    """Slice a datagram into link-sized adaptation-layer payloads.

    Datagrams that fit in budget-1 bytes go out unfragmented behind the
    0x41 dispatch byte; otherwise FRAG1 carries the largest 8-aligned
    leading piece and FRAGN fragments carry 8-aligned slices (tail excepted).
    """
    size = len(datagram)
    if size > MAX_DATAGRAM:
        raise DatagramTooLarge(f"{size} > {MAX_DATAGRAM}")
    if link_payload_budget < MIN_BUDGET:
        raise BudgetTooSmall(f"budget {link_payload_budget} < {MIN_BUDGET}")
    if size <= link_payload_budget - 1:
        return [bytes([DISPATCH_UNCOMPRESSED]) + datagram]

    frag1_data = ((link_payload_budget - FRAG1_HDR_LEN) // 8) * 8
    fragn_data = ((link_payload_budget - FRAGN_HDR_LEN) // 8) * 8
    frags = [struct.pack("!HH", (FRAG1_DISPATCH << 11) | size, tag & 0xFFFF)
             + datagram[:frag1_data]]
    offset = frag1_data
    while offset < size:
        chunk = datagram[offset:offset + fragn_data]
        frags.append(struct.pack("!HHB", (FRAGN_DISPATCH << 11) | size,
                                 tag & 0xFFFF, offset // 8) + chunk)
        offset += len(chunk)
    return frags


@dataclass
class ParsedFragment:
    kind: str  # "uncompressed" | "frag1" | "fragn"
    datagram_size: int = 0
    tag: int = 0
    offset: int = 0  # bytes
    data: bytes = b""


def parse_payload(payload: bytes) -> ParsedFragment:
    if not payload:
        raise MalformedFragment("empty payload")
    if payload[0] == DISPATCH_UNCOMPRESSED:
        if len(payload) < 2:
            raise MalformedFragment("uncompressed dispatch without datagram")
        return ParsedFragment("uncompressed", data=payload[1:])
    dispatch = payload[0] >> 3
    if dispatch == FRAG1_DISPATCH:
        if len(payload) < FRAG1_HDR_LEN + 1:
            raise MalformedFragment("truncated FRAG1")
        word, tag = struct.unpack_from("!HH", payload)
        return ParsedFragment("frag1", word & 0x7FF, tag, 0,
                              payload[FRAG1_HDR_LEN:])
    if dispatch == FRAGN_DISPATCH:
        if len(payload) < FRAGN_HDR_LEN + 1:
            raise MalformedFragment("truncated FRAGN")
        word, tag, off_units = struct.unpack_from("!HHB", payload)
        return ParsedFragment("fragn", word & 0x7FF, tag, off_units * 8,
                              payload[FRAGN_HDR_LEN:])
    raise MalformedFragment(f"unknown dispatch byte 0x{payload[0]:02x}")


class ReassemblyStatus(enum.Enum):
    INCOMPLETE = "incomplete"
    COMPLETE = "complete"
    DROPPED = "dropped"


@dataclass
class ReassemblyEntry:
    key: tuple
    size: int
    snip: object  # CONTROL-priority buffer snip of datagram_size
    deadline_us: int
    packet_id: int
    received: set = field(default_factory=set)  # 8-byte unit indices

    def units(self) -> int:
        return (self.size + 7) // 8


class ReassemblyTable:
    """At most ``max_entries`` concurrent datagrams; expired entries give
    their buffer back in full."""

    def __init__(self, buffer, metrics=None,
                 max_entries: int = DEFAULT_REASSEMBLY_ENTRIES,
                 timeout_us: int = DEFAULT_REASSEMBLY_TIMEOUT_US):
        self.buffer = buffer
        self.metrics = metrics
        self.max_entries = max_entries
        self.timeout_us = timeout_us
        self.entries: dict[tuple, ReassemblyEntry] = {}

    def memory_bytes(self) -> int:
        from .metrics import REASSEMBLY_ENTRY_OVERHEAD
        return sum(e.size + REASSEMBLY_ENTRY_OVERHEAD
                   for e in self.entries.values())

    def _count(self, name):
        if self.metrics is not None:
            self.metrics.count(name)

    def _drop_entry(self, entry):
        self.entries.pop(entry.key, None)
        self.buffer.release(entry.snip)

    def expire(self, now_us: int):
        """Release every entry whose deadline passed; returns count."""
        stale = [e for e in self.entries.values() if now_us >= e.deadline_us]
        for entry in stale:
            self._drop_entry(entry)
            self._count("reassembly_timeouts")
        return len(stale)

    def step(self, payload: bytes, src, dst, now_us: int):
        """Feed one adaptation-layer payload; returns
        (status, datagram chain or None, packet_id or None)."""
        parsed = parse_payload(payload)  # MalformedFragment propagates
        if parsed.kind == "uncompressed":
            raise MalformedFragment("unfragmented payload fed to reassembly")
        size = parsed.datagram_size
        if parsed.offset + len(parsed.data) > size:
            raise MalformedFragment("fragment exceeds datagram size")
        is_tail = parsed.offset + len(parsed.data) == size
        if len(parsed.data) % 8 != 0 and not is_tail:
            raise MalformedFragment("non-final fragment not 8-aligned")
        if not parsed.data:
            raise MalformedFragment("empty fragment")

        key = (bytes(src), bytes(dst), size, parsed.tag)
        entry = self.entries.get(key)
        if entry is None:
            if len(self.entries) >= self.max_entries:
                self._count("reassembly_table_full")
                return ReassemblyStatus.DROPPED, None, None
            try:
                snip = self.buffer.alloc_snip(
                    size=size, proto=ProtocolType.IPV6,
                    prio=AllocPriority.CONTROL)
            except NoBufferSpace:
                self._count("reassembly_drops_nobuf")
                return ReassemblyStatus.DROPPED, None, None
            pid = (self.metrics.new_packet_id()
                   if self.metrics is not None else 0)
            entry = ReassemblyEntry(key, size, snip,
                                    now_us + self.timeout_us, pid)
            self.entries[key] = entry

        start_unit = parsed.offset // 8
        n_units = (len(parsed.data) + 7) // 8
        units = range(start_unit, start_unit + n_units)
        overlap = [u for u in units if u in entry.received]
        if overlap:
            # duplicates must be byte-identical; divergence poisons the entry
            current = bytes(entry.snip.data[parsed.offset:
                                            parsed.offset + len(parsed.data)])
            if current != parsed.data:
                self._drop_entry(entry)
                self._count("reassembly_overlap_drops")
                return ReassemblyStatus.DROPPED, None, None
        entry.snip.data[parsed.offset:parsed.offset + len(parsed.data)] = \
            parsed.data
        entry.received.update(units)
        if self.metrics is not None:
            self.metrics.record_copy(CopySite.BUF_INTERNAL, entry.packet_id,
                                     len(parsed.data))

        if len(entry.received) == entry.units():
            self.entries.pop(key, None)
            return (ReassemblyStatus.COMPLETE, PacketChain(entry.snip),
                    entry.packet_id)
        return ReassemblyStatus.INCOMPLETE, None, entry.packet_id


class SixlowpanModule:
    """One adaptation-layer context per node, serving all interfaces."""

    def __init__(self, link_payload_budget: int | None = None,
                 max_reassembly: int = DEFAULT_REASSEMBLY_ENTRIES,
                 timeout_us: int = DEFAULT_REASSEMBLY_TIMEOUT_US):
        from .link import MAX_PAYLOAD
        self.budget = link_payload_budget or MAX_PAYLOAD
        self.max_reassembly = max_reassembly
        self.timeout_us = timeout_us
        self.reassembly_table: ReassemblyTable | None = None
        self._tag = 0
        self.ctx = None

    def on_spawn(self, ctx):
        self.ctx = ctx
        self.reassembly_table = ReassemblyTable(
            ctx.node.pktbuf, ctx.node.metrics,
            self.max_reassembly, self.timeout_us)
        ctx.node.registry.register(ProtocolType.SIXLOWPAN, DEMUX_ALL, ctx)

    def _next_tag(self):
        self._tag = (self._tag + 1) & 0xFFFF
        return self._tag

    def __call__(self, ctx, msg):
        if not isinstance(msg, object) or not hasattr(msg, "kind"):
            return
        if msg.kind == MsgKind.MSG_SND:
            self._send(ctx, msg)
        elif msg.kind == MsgKind.MSG_RCV:
            self._receive(ctx, msg)
        elif msg.kind in (MsgKind.MSG_GET, MsgKind.MSG_SET):
            msg.ack(ENOTSUP)
        else:
            msg.ack(ENOTSUP)

    # -- TX -----------------------------------------------------------------
    def _send(self, ctx, msg):
        node = ctx.node
        pkt = msg.pkt
        prio = msg.meta.get("prio", AllocPriority.SEND_APP)
        iface = msg.meta.get("iface", 0)
        link_ctx = node.wiring.get(f"link{iface}")
        if link_ctx is None:
            node.metrics.count("sixlowpan_no_link")
            node.pktbuf.release(pkt.head)
            return
        size = pkt.total_size
        pid = msg.meta.get("packet_id")
        down_meta = {"dst_link": msg.meta.get("next_hop_link"),
                     "iface": iface, "packet_id": pid, "prio": prio}
        if size <= self.budget - 1:
            try:
                out = node.pktbuf.prepend_header(
                    pkt, 1, ProtocolType.SIXLOWPAN, prio)
            except NoBufferSpace:
                node.metrics.count("sixlowpan_tx_drops_nobuf")
                node.pktbuf.release(pkt.head)
                return
            out.head.data[0] = DISPATCH_UNCOMPRESSED
            node.sched.post(link_ctx, netapi.NetMessage(
                kind=MsgKind.MSG_SND, pkt=out, meta=down_meta))
            return
        # fragment: slice datagram bytes into per-frame snips; the source
        # chain is freed first so peak usage is one datagram, not two
        datagram = pkt.to_bytes()
        node.pktbuf.release(pkt.head)
        try:
            frags = fragment(datagram, self.budget, self._next_tag())
        except SixlowpanError:
            node.metrics.count("sixlowpan_tx_too_large")
            return
        snips = []
        try:
            for frag in frags:
                snips.append(node.pktbuf.alloc_snip(
                    payload=frag, proto=ProtocolType.SIXLOWPAN, prio=prio))
        except NoBufferSpace:
            for s in snips:
                node.pktbuf.release(s)
            node.metrics.count("sixlowpan_tx_drops_nobuf")
            return
        # pace fragments 1 us apart so the link mailbox never overflows
        # on large datagrams
        for i, snip in enumerate(snips):
            if pid is not None:
                node.metrics.record_copy(CopySite.BUF_INTERNAL, pid,
                                         snip.size)
            message = netapi.NetMessage(kind=MsgKind.MSG_SND,
                                        pkt=PacketChain(snip),
                                        meta=dict(down_meta))
            node.sched.call_later(
                i, lambda m=message: node.sched.post(link_ctx, m))

    # -- RX -----------------------------------------------------------------
    def _receive(self, ctx, msg):
        node = ctx.node
        payload = msg.pkt.to_bytes()
        src = msg.meta.get("src_link", b"")
        dst = msg.meta.get("dst_link", b"")
        up_meta = {k: msg.meta[k] for k in ("src_link", "dst_link", "iface")
                   if k in msg.meta}
        try:
            parsed = parse_payload(payload)
        except MalformedFragment:
            node.metrics.count("sixlowpan_rx_malformed")
            node.pktbuf.release(msg.pkt.head)
            return
        if parsed.kind == "uncompressed":
            pid = msg.meta.get("packet_id")
            node.pktbuf.release(msg.pkt.head)  # data survives in parsed.data
            try:
                snip = node.pktbuf.alloc_snip(
                    payload=parsed.data, proto=ProtocolType.IPV6,
                    prio=AllocPriority.RECEIVE)
            except NoBufferSpace:
                node.metrics.count("sixlowpan_rx_drops_nobuf")
                return
            if pid is not None:
                node.metrics.record_copy(CopySite.BUF_INTERNAL, pid,
                                         len(parsed.data))
            self._deliver_up(node, PacketChain(snip), pid, up_meta)
            return
        # fragmented path
        table = self.reassembly_table
        try:
            status, chain, entry_pid = table.step(
                payload, src, dst, node.sched.now_us)
        except MalformedFragment:
            node.metrics.count("sixlowpan_rx_malformed")
            node.pktbuf.release(msg.pkt.head)
            return
        frame_pid = msg.meta.get("packet_id")
        if entry_pid and frame_pid and entry_pid != frame_pid:
            node.metrics.merge_packet(entry_pid, frame_pid)
        node.pktbuf.release(msg.pkt.head)
        if status == ReassemblyStatus.COMPLETE:
            self._deliver_up(node, chain, entry_pid, up_meta)
        elif status == ReassemblyStatus.INCOMPLETE:
            node.sched.call_later(
                self.timeout_us + 1,
                lambda: table.expire(node.sched.now_us))

    def _deliver_up(self, node, chain, pid, up_meta):
        meta = dict(up_meta)
        meta["packet_id"] = pid
        matched = netapi.dispatch(node, ProtocolType.IPV6, DEMUX_RAW,
                                  chain, meta)
        node.pktbuf.release(chain.head)  # dispatch holds one ref per receiver
        if matched == 0:
            node.metrics.count("sixlowpan_rx_no_receiver")
