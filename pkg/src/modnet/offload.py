"""Full-stack offload device module.

Stands in for a network chip that already runs UDP/IPv6 on-silicon: it
services the unified message interface at the transport level, so a node
needs only the socket layer and this module.  Datagrams either loop back
locally or cross a private channel to a paired offload module on another
node; the chip's internals are opaque by definition, so no link frames are
involved.
"""

from __future__ import annotations

from . import netapi
from .metrics import CopySite
from .netapi import ENOTSUP, OK, MsgKind, NetMessage, OptionKey
from .pktbuf import AllocPriority, NoBufferSpace, PacketChain, ProtocolType

BRIDGE_DELAY_US = 10


class OffloadModule:
    """Accepts MSG_SND with (dst_ip, dst_port) metadata and answers
    MSG_GET(ADDRESS); everything else is unsupported."""

    def __init__(self, addr: bytes):
        self.addr = addr
        self.peer = None  # paired offload module context, set after build
        self.ctx = None

    def on_spawn(self, ctx):
        self.ctx = ctx

    def __call__(self, ctx, msg):
        if msg.kind == MsgKind.MSG_SND:
            if "raw" in msg.meta:
                self._ingress(ctx, msg)
            else:
                self._egress(ctx, msg)
        elif msg.kind == MsgKind.MSG_GET:
            key, _ = msg.option
            if key == OptionKey.ADDRESS:
                msg.ack(OK, self.addr)
            else:
                msg.ack(ENOTSUP)
        elif msg.kind == MsgKind.MSG_RCV:
            if msg.pkt is not None:
                ctx.node.pktbuf.release(msg.pkt.head)
        else:
            msg.ack(ENOTSUP)

    # -- TX: socket layer handed us a payload chain ------------------------
    def _egress(self, ctx, msg):
        node = ctx.node
        data = msg.pkt.to_bytes()
        pid = msg.meta.get("packet_id")
        if pid is not None:
            # handover into the chip's own buffer: copy #2 of the TX path
            node.metrics.record_copy(CopySite.BUF_TO_DEV, pid, len(data))
        node.pktbuf.release(msg.pkt.head)
        bridge = {"raw": data, "src_ip": self.addr,
                  "src_port": msg.meta.get("src_port"),
                  "dst_port": msg.meta.get("dst_port")}
        dst_ip = msg.meta.get("dst_ip")
        if self.peer is not None and dst_ip != self.addr:
            target = self.peer
        else:
            target = ctx  # loopback
        node.sched.call_later(
            BRIDGE_DELAY_US,
            lambda: node.sched.post(target, NetMessage(
                kind=MsgKind.MSG_SND, meta=bridge)))

    # -- RX: datagram arriving from the chip -------------------------------
    def _ingress(self, ctx, msg):
        node = ctx.node
        data = msg.meta["raw"]
        try:
            snip = node.pktbuf.alloc_snip(payload=data,
                                          proto=ProtocolType.APP,
                                          prio=AllocPriority.RECEIVE)
        except NoBufferSpace:
            node.metrics.count("offload_rx_drops_nobuf")
            return
        pid = node.metrics.new_packet_id()
        node.metrics.record_copy(CopySite.DEV_TO_BUF, pid, len(data))
        meta = {"src_ip": msg.meta.get("src_ip"),
                "src_port": msg.meta.get("src_port"),
                "dst_port": msg.meta.get("dst_port"), "packet_id": pid}
        matched = netapi.dispatch(node, ProtocolType.UDP, meta["dst_port"],
                                  PacketChain(snip), meta)
        node.pktbuf.release(snip)  # dispatch holds one ref per receiver
        if matched == 0:
            node.metrics.count("offload_rx_no_port")
