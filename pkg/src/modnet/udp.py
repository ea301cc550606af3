"""UDP codec with IPv6 pseudo-header checksum, port demux, and the
application-facing socket API.

The socket layer is where the copy-twice discipline starts and ends:
``sendto`` copies the payload into the central buffer exactly once, and
``recvfrom`` copies it out exactly once.  Everything between is header
prepends and (for large datagrams) in-buffer slicing.
"""

from __future__ import annotations

import struct
from collections import deque

from . import netapi
from .metrics import CopySite
from .netapi import ENOTSUP, MsgKind, NetMessage
from .pktbuf import AllocPriority, NoBufferSpace, PacketChain, ProtocolType

HEADER_LEN = 8
MAX_PAYLOAD = 1192  # 1240 - 40 (IPv6) - 8 (UDP)
NEXT_HEADER_UDP = 17
DEFAULT_SOCK_QUEUE = 4


class UdpError(Exception):
    pass


class PortInUse(UdpError):
    pass


class SockTimeout(UdpError):
    pass


class PayloadTooLarge(UdpError):
    pass


def _ones_complement_sum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def _pseudo_header(src_ip: bytes, dst_ip: bytes, udp_len: int) -> bytes:
    return src_ip + dst_ip + struct.pack("!I3xB", udp_len, NEXT_HEADER_UDP)


def udp_checksum(src_ip: bytes, dst_ip: bytes, udp_bytes: bytes) -> int:
    """Checksum as transmitted: one's complement of the one's-complement
    sum over pseudo-header + UDP header + payload, with a computed 0x0000
    mapped to 0xFFFF."""
    total = _ones_complement_sum(
        _pseudo_header(src_ip, dst_ip, len(udp_bytes)) + udp_bytes)
    csum = ~total & 0xFFFF
    return 0xFFFF if csum == 0 else csum


def udp_verify(src_ip: bytes, dst_ip: bytes, udp_bytes: bytes) -> bool:
    """Verify a received datagram; checksum 0x0000 is invalid over IPv6."""
    received = struct.unpack_from("!H", udp_bytes, 6)[0]
    if received == 0:
        return False
    total = _ones_complement_sum(
        _pseudo_header(src_ip, dst_ip, len(udp_bytes)) + udp_bytes)
    return total == 0xFFFF


def udp_encode_header(src_port: int, dst_port: int, length: int,
                      checksum: int = 0) -> bytes:
    return struct.pack("!HHHH", src_port, dst_port, length, checksum)


class UdpModule:
    """Transport context: prepend + checksum downward, verify + port demux
    upward.  Registers for IPv6 next-header 17."""

    def __init__(self, local_addr: bytes):
        self.local_addr = local_addr
        self.ctx = None

    def on_spawn(self, ctx):
        self.ctx = ctx
        ctx.node.registry.register(ProtocolType.IPV6, NEXT_HEADER_UDP, ctx)

    def __call__(self, ctx, msg):
        if msg.kind == MsgKind.MSG_SND:
            self._send(ctx, msg)
        elif msg.kind == MsgKind.MSG_RCV:
            self._receive(ctx, msg)
        elif msg.kind in (MsgKind.MSG_GET, MsgKind.MSG_SET):
            msg.ack(ENOTSUP)
        else:
            msg.ack(ENOTSUP)

    def _send(self, ctx, msg):
        node = ctx.node
        pkt = msg.pkt
        prio = msg.meta.get("prio", AllocPriority.SEND_APP)
        length = HEADER_LEN + pkt.total_size
        try:
            out = node.pktbuf.prepend_header(pkt, HEADER_LEN,
                                             ProtocolType.UDP, prio)
        except NoBufferSpace:
            node.metrics.count("udp_tx_drops_nobuf")
            node.pktbuf.release(pkt.head)
            return
        out.head.data[:] = udp_encode_header(
            msg.meta["src_port"], msg.meta["dst_port"], length)
        csum = udp_checksum(self.local_addr, msg.meta["dst_ip"],
                            out.to_bytes())
        struct.pack_into("!H", out.head.data, 6, csum)
        net = node.wiring.get("net")
        if net is None:
            node.metrics.count("udp_no_net")
            node.pktbuf.release(out.head)
            return
        node.sched.post(net, NetMessage(
            kind=MsgKind.MSG_SND, pkt=out,
            meta={"dst_ip": msg.meta["dst_ip"],
                  "next_header": NEXT_HEADER_UDP,
                  "packet_id": msg.meta.get("packet_id"), "prio": prio}))

    def _receive(self, ctx, msg):
        node = ctx.node
        data = msg.pkt.to_bytes()
        pid = msg.meta.get("packet_id")
        if len(data) < HEADER_LEN:
            node.metrics.count("udp_rx_malformed")
            node.pktbuf.release(msg.pkt.head)
            return
        src_port, dst_port, length, _ = struct.unpack_from("!HHHH", data)
        if length != len(data) or length < HEADER_LEN:
            node.metrics.count("udp_rx_malformed")
            node.pktbuf.release(msg.pkt.head)
            return
        if not udp_verify(msg.meta["src_ip"], msg.meta["dst_ip"], data):
            node.metrics.count("udp_rx_bad_checksum")
            node.pktbuf.release(msg.pkt.head)
            return
        payload = data[HEADER_LEN:]
        node.pktbuf.release(msg.pkt.head)  # data survives in payload
        if not payload:
            node.metrics.count("udp_rx_empty")
            return
        try:
            snip = node.pktbuf.alloc_snip(
                payload=payload, proto=ProtocolType.APP,
                prio=AllocPriority.RECEIVE)
        except NoBufferSpace:
            node.metrics.count("udp_rx_drops_nobuf")
            return
        if pid is not None:
            node.metrics.record_copy(CopySite.BUF_INTERNAL, pid,
                                     len(payload))
        meta = {"src_ip": msg.meta["src_ip"], "src_port": src_port,
                "dst_port": dst_port, "packet_id": pid,
                "hop_limit": msg.meta.get("hop_limit")}
        matched = netapi.dispatch(node, ProtocolType.UDP, dst_port,
                                  PacketChain(snip), meta)
        node.pktbuf.release(snip)  # dispatch holds one ref per receiver
        if matched == 0:
            node.metrics.count("udp_rx_no_port")


class Socket:
    """One bound UDP port with a bounded receive queue (drop-oldest)."""

    def __init__(self, layer: "SocketLayer", port: int,
                 queue_capacity: int = DEFAULT_SOCK_QUEUE):
        self.layer = layer
        self.port = port
        self.queue_capacity = queue_capacity
        self.queue: deque = deque()  # (src_ip, src_port, chain, pid, hop_limit)
        self.on_ready = None  # optional app callback, runs in sock context
        self.closed = False
        self.last_hop_limit = None  # hop limit of the last recvfrom datagram

    # -- app API -------------------------------------------------------------
    def sendto(self, dst_ip: bytes, dst_port: int, payload: bytes) -> int:
        """Copy the payload into the buffer once and hand it to the current
        transport wiring.  Raises NoBufferSpace as back-pressure; in that
        case nothing was sent."""
        assert not self.closed
        if not payload:
            raise UdpError("empty payload")
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"{len(payload)} > {MAX_PAYLOAD}")
        node = self.layer.ctx.node
        pid = node.metrics.new_packet_id()
        snip = node.pktbuf.alloc_snip(payload=payload,
                                      proto=ProtocolType.APP,
                                      prio=AllocPriority.SEND_APP)
        node.metrics.record_copy(CopySite.APP_TO_BUF, pid, len(payload))
        transport = node.wiring.get("transport")
        if transport is None:
            node.pktbuf.release(snip)
            raise UdpError("no transport wired")
        node.metrics.count("udp_sent")
        node.sched.post(transport, NetMessage(
            kind=MsgKind.MSG_SND, pkt=PacketChain(snip),
            meta={"src_port": self.port, "dst_port": dst_port,
                  "dst_ip": dst_ip, "packet_id": pid,
                  "prio": AllocPriority.SEND_APP}))
        return pid

    def recvfrom(self, timeout_us: int = 1_000_000):
        """Pop one datagram, copying the payload out of the buffer (the
        one buffer-to-app copy).  Raises SockTimeout when nothing arrives."""
        assert not self.closed
        node = self.layer.ctx.node
        if not self.queue:
            node.sched.wait_for(lambda: len(self.queue) > 0, timeout_us)
            if not self.queue:
                raise SockTimeout(f"port {self.port}")
        src_ip, src_port, pkt, pid, hop_limit = self.queue.popleft()
        self.last_hop_limit = hop_limit
        payload = pkt.to_bytes()
        if pid is not None:
            node.metrics.record_copy(CopySite.BUF_TO_APP, pid, len(payload))
        node.metrics.count("udp_delivered")
        node.pktbuf.release(pkt.head)
        return src_ip, src_port, payload

    def recv_nowait(self):
        if not self.queue:
            return None
        return self.recvfrom(timeout_us=0)

    def close(self):
        self.layer.close(self)

    # -- called from the sock context ------------------------------------------
    def _deliver(self, node, src_ip, src_port, pkt, pid, hop_limit=None):
        if len(self.queue) >= self.queue_capacity:
            _, _, old, _, _ = self.queue.popleft()
            node.pktbuf.release(old.head)
            node.metrics.count("sock_queue_drops")
        self.queue.append((src_ip, src_port, pkt, pid, hop_limit))
        if self.on_ready is not None:
            self.on_ready(self)


class SocketLayer:
    """App-facing context owning every socket on its node.  Each bound
    socket is one registry entry (UDP, port) targeting this context."""

    def __init__(self):
        self.ctx = None
        self.ports: dict[int, Socket] = {}

    def on_spawn(self, ctx):
        self.ctx = ctx

    def open(self, port: int,
             queue_capacity: int = DEFAULT_SOCK_QUEUE) -> Socket:
        if port in self.ports:
            raise PortInUse(f"port {port}")
        sock = Socket(self, port, queue_capacity)
        self.ctx.node.registry.register(ProtocolType.UDP, port, self.ctx)
        self.ports[port] = sock
        return sock

    def close(self, sock: Socket):
        if sock.closed:
            return
        sock.closed = True
        node = self.ctx.node
        node.registry.unregister(ProtocolType.UDP, sock.port, self.ctx)
        self.ports.pop(sock.port, None)
        while sock.queue:
            _, _, pkt, _, _ = sock.queue.popleft()
            node.pktbuf.release(pkt.head)

    def __call__(self, ctx, msg):
        if msg.kind == MsgKind.MSG_RCV:
            sock = self.ports.get(msg.meta.get("dst_port"))
            if sock is None or sock.closed:
                ctx.node.pktbuf.release(msg.pkt.head)
                ctx.node.metrics.count("sock_no_port")
                return
            sock._deliver(ctx.node, msg.meta.get("src_ip"),
                          msg.meta.get("src_port"), msg.pkt,
                          msg.meta.get("packet_id"),
                          msg.meta.get("hop_limit"))
        elif msg.kind in (MsgKind.MSG_GET, MsgKind.MSG_SET):
            msg.ack(ENOTSUP)
        elif msg.kind == MsgKind.MSG_SND:
            # apps call sendto directly; nothing routes data down to us
            if msg.pkt is not None:
                ctx.node.pktbuf.release(msg.pkt.head)
        else:
            msg.ack(ENOTSUP)
