"""Link-layer module: 802.15.4-lite framing over the simulated radio.

Wire format, bit exact (17-byte header, frame <= 127 bytes):

    dst_long  8 bytes big-endian
    src_long  8 bytes big-endian
    seq       1 byte, increments mod 256 per device
    payload   1..110 bytes

No PAN ids, frame control or FCS: corruption is modeled by simulated link
loss, not checksums.  The format is normative for trace decoding and the
golden-frame tests.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

from . import netapi
from .metrics import CopySite
from .netapi import ENOTSUP, OK, DEMUX_ALL, MsgKind
from .netdev import (BROADCAST_LONG, DevEventType, DevNotify, DevStatus,
                     Unsupported)
from .pktbuf import AllocPriority, NoBufferSpace, PacketChain, ProtocolType

HEADER_LEN = 17
MAX_FRAME = 127
MAX_PAYLOAD = MAX_FRAME - HEADER_LEN  # 110


class LinkError(Exception):
    pass


class FrameTooShort(LinkError):
    pass


class PayloadTooLarge(LinkError):
    pass


@dataclass
class LinkFrame:
    dst_long: bytes
    src_long: bytes
    seq: int
    payload: bytes


def link_encode(dst_long: bytes, src_long: bytes, seq: int,
                payload: bytes) -> bytes:
    if not 1 <= len(payload) <= MAX_PAYLOAD:
        raise PayloadTooLarge(
            f"payload must be 1..{MAX_PAYLOAD} bytes, got {len(payload)}")
    return struct.pack("!8s8sB", dst_long, src_long, seq & 0xFF) + payload


def link_decode(frame: bytes) -> LinkFrame:
    if len(frame) < HEADER_LEN + 1:
        raise FrameTooShort(f"{len(frame)} bytes < {HEADER_LEN + 1}")
    if len(frame) > MAX_FRAME:
        raise PayloadTooLarge(f"{len(frame)} bytes > {MAX_FRAME}")
    dst, src, seq = struct.unpack_from("!8s8sB", frame)
    return LinkFrame(dst, src, seq, frame[HEADER_LEN:])


class LinkModule:
    """Owns one device.  Downward: serialize chain + frame + dev_send.
    Upward: dev_recv into a RECEIVE-priority snip, dispatch to the
    adaptation layer."""

    def __init__(self, device):
        self.device = device
        self._seq = 0
        self._pending: deque[bytes] = deque()  # frames waiting on TX slot
        self.ctx = None

    def on_spawn(self, ctx):
        self.ctx = ctx
        self.device.owner = ctx
        self.device.event_sink = ctx
        self.device.node = ctx.node

    def __call__(self, ctx, msg):
        if isinstance(msg, DevNotify):
            self._poll_events(ctx)
            return
        if msg.kind == MsgKind.MSG_SND:
            self._send(ctx, msg)
        elif msg.kind == MsgKind.MSG_RCV:
            # nothing below the link layer
            self._drop(ctx, msg, "link_unexpected_rcv")
        elif msg.kind in (MsgKind.MSG_GET, MsgKind.MSG_SET):
            self._option(msg)
        else:
            msg.ack(ENOTSUP)

    # -- TX ----------------------------------------------------------------
    def _send(self, ctx, msg):
        node = ctx.node
        payload = msg.pkt.to_bytes()
        pid = msg.meta.get("packet_id")
        if not 1 <= len(payload) <= MAX_PAYLOAD:
            self._drop(ctx, msg, "link_payload_too_large")
            return
        if pid is not None:
            node.metrics.record_copy(CopySite.BUF_TO_DEV, pid, len(payload))
        node.pktbuf.release(msg.pkt.head)
        dst = msg.meta.get("dst_link", BROADCAST_LONG)
        frame = link_encode(dst, self.device.addr_long, self._seq, payload)
        self._seq = (self._seq + 1) & 0xFF
        self._transmit(ctx, frame)

    def _transmit(self, ctx, frame):
        status = self.device.dev_send(frame)
        if status == DevStatus.BUSY:
            self._pending.append(frame)
        elif status == DevStatus.TOO_LARGE:
            ctx.node.metrics.count("link_tx_too_large")

    # -- RX / events ---------------------------------------------------------
    def _poll_events(self, ctx):
        # one event per notification: every queued event has its own
        # DevNotify, and servicing them one at a time lets upper layers
        # drain between frame arrivals instead of piling RX snips up
        ev = self.device.dev_poll_event()
        if ev == DevEventType.TX_DONE:
            if self._pending:
                self._transmit(ctx, self._pending.popleft())
        elif ev == DevEventType.RX_READY:
            self._receive(ctx)

    def _receive(self, ctx):
        node = ctx.node
        raw = self.device.dev_recv()
        try:
            frame = link_decode(raw)
        except LinkError:
            node.metrics.count("link_rx_malformed")
            return
        if frame.dst_long not in (self.device.addr_long, BROADCAST_LONG):
            node.metrics.count("link_rx_filtered")
            return
        try:
            snip = node.pktbuf.alloc_snip(
                payload=frame.payload, proto=ProtocolType.SIXLOWPAN,
                prio=AllocPriority.RECEIVE)
        except NoBufferSpace:
            node.metrics.count("link_rx_drops_nobuf")
            return
        pid = node.metrics.new_packet_id()
        node.metrics.record_copy(CopySite.DEV_TO_BUF, pid, len(frame.payload))
        pkt = PacketChain(snip)
        meta = {"src_link": frame.src_long, "dst_link": frame.dst_long,
                "iface": self.device.id, "packet_id": pid}
        matched = netapi.dispatch(node, ProtocolType.SIXLOWPAN, DEMUX_ALL,
                                  pkt, meta)
        node.pktbuf.release(snip)  # dispatch holds one ref per receiver
        if matched == 0:
            node.metrics.count("link_rx_no_receiver")

    # -- options -------------------------------------------------------------
    def _option(self, msg):
        key, value = msg.option
        try:
            if msg.kind == MsgKind.MSG_GET:
                msg.ack(OK, self.device.dev_get(key))
            else:
                msg.ack(self.device.dev_set(key, value))
        except (Unsupported, ValueError, TypeError):
            # unknown key or a value the device cannot parse
            msg.ack(ENOTSUP)

    def _drop(self, ctx, msg, counter):
        ctx.node.metrics.count(counter)
        if msg.pkt is not None:
            ctx.node.pktbuf.release(msg.pkt.head)
