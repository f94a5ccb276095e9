"""Cache-hit forwarding: the per-hook programs that bypass the fallback.

The egress program consults the filter/egressip/egress caches, prepends a
cached 64-byte header template and redirects straight to the host NIC; the
ingress program validates the destination, strips the outer headers and
redirects to the destination veth.  Every failure degrades to a pass-to-
fallback verdict; these programs never drop a frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional

from . import packet
from .cache import HostCaches, is_fastpath_allowed
from .packet import ParsedFrame

REDIRECT = "redirect"
REDIRECT_PEER = "redirect_peer"
PASS = "pass"


@dataclass
class Verdict:
    kind: str
    frame: ParsedFrame
    target_ifidx: Optional[int] = None
    miss_marked: bool = False


@dataclass
class ProgContext:
    caches: HostCaches
    hold_on: bool = False
    rpeer_mode: bool = False
    ingress_ifidx: Optional[int] = None
    # Outer IP identification source for template-built frames.
    next_ip_id: Callable[[], int] = lambda: 0


def _mark_miss(frame: ParsedFrame, ctx: ProgContext, inner: bool) -> bool:
    # The hold-on flag suppresses cache initialization by withholding the
    # miss mark; forwarding behaviour is unchanged.
    if ctx.hold_on:
        return False
    packet.set_miss_mark(frame, inner=inner)
    return True


def egress_prog(frame: ParsedFrame, ctx: ProgContext) -> Verdict:
    """Filter check, cached encapsulation and redirect for container frames."""
    if frame.ip is None:
        return Verdict(PASS, frame)
    tup = frame.five_tuple()

    # Step 1: both directions must be whitelisted.
    if not is_fastpath_allowed(ctx.caches.filter, tup):
        marked = _mark_miss(frame, ctx, inner=False)
        return Verdict(PASS, frame, miss_marked=marked)

    # Step 2: resolve peer host and its cached outer headers.
    host_ip = ctx.caches.egressip.get(tup.dst_ip)
    if host_ip is None:
        marked = _mark_miss(frame, ctx, inner=False)
        return Verdict(PASS, frame, miss_marked=marked)
    egress_info = ctx.caches.egress.get(host_ip)
    if egress_info is None:
        marked = _mark_miss(frame, ctx, inner=False)
        return Verdict(PASS, frame, miss_marked=marked)

    # Step 3: the reversed flow's ingress entry must be ready, otherwise the
    # conntrack state could expire while only one direction stays cached.
    # Re-initialization on this path cannot cure the miss, so no mark.
    ingress_info = ctx.caches.ingress.get(tup.src_ip)
    if ingress_info is None or not ingress_info.complete:
        return Verdict(PASS, frame)

    # Step 4: grow headroom and install the template over the headroom plus
    # the inner Ethernet header, then patch the per-packet outer fields.
    inner_bytes = frame.serialize()
    buf = bytearray(egress_info.header_template + inner_bytes[packet.ETH_LEN:])
    wire_len = len(buf)
    struct.pack_into("!H", buf, 16, wire_len - packet.ETH_LEN)           # outer IP total length
    struct.pack_into("!H", buf, 18, ctx.next_ip_id() & 0xFFFF)           # outer IP identification
    struct.pack_into("!H", buf, 24, 0)
    struct.pack_into("!H", buf, 24, packet.internet_checksum(bytes(buf[14:34])))
    struct.pack_into("!H", buf, 38, wire_len - packet.ETH_LEN - packet.IPV4_LEN)  # outer UDP length
    struct.pack_into("!H", buf, 34, packet.outer_udp_source_port(tup))   # outer UDP source port
    wire = packet.parse_frame(buf)

    # Step 5: redirect to the cached host interface.
    return Verdict(REDIRECT, wire, target_ifidx=egress_info.host_ifidx)


def _destination_check(frame: ParsedFrame, ctx: ProgContext) -> bool:
    if ctx.ingress_ifidx is None:
        return False
    dev = ctx.caches.devmap.get(ctx.ingress_ifidx)
    if dev is None:
        return False
    if frame.dst_mac() != dev.mac:
        return False
    if frame.ethertype() != packet.ETHERTYPE_IPV4 or frame.ip is None:
        return False
    if frame.dst_ip() != dev.ip:
        return False
    if frame.ttl() < 1:
        return False
    return True


def ingress_prog(frame: ParsedFrame, ctx: ProgContext) -> Verdict:
    """Destination check, filter check, cached decapsulation and redirect."""
    # Step 1: the frame must actually be ours: arrival interface known,
    # MAC/IP matching, TTL alive and a well-formed tunnel encapsulation.
    if not _destination_check(frame, ctx) or not frame.is_tunnel or frame.inner_ip is None:
        return Verdict(PASS, frame)

    # Step 2: same filter gate as egress, on the canonical (reversed) tuple.
    tup = frame.five_tuple(inner=True).swapped()
    if not is_fastpath_allowed(ctx.caches.filter, tup):
        marked = _mark_miss(frame, ctx, inner=True)
        return Verdict(PASS, frame, miss_marked=marked)

    # Step 3: local delivery info must be complete, and the reverse
    # direction's egress mapping must exist (conntrack compatibility).
    ingress_info = ctx.caches.ingress.get(frame.dst_ip(inner=True))
    if ingress_info is None or not ingress_info.complete:
        marked = _mark_miss(frame, ctx, inner=True)
        return Verdict(PASS, frame, miss_marked=marked)
    if ctx.caches.egressip.get(frame.src_ip(inner=True)) is None:
        return Verdict(PASS, frame)

    assert frame.inner_eth is not None and frame.l4 is not None
    end = frame.l4 + frame.udp_length()
    buf = bytearray(frame.buf[frame.inner_eth:end])
    buf[0:6] = ingress_info.dmac
    buf[6:12] = ingress_info.smac
    inner = packet.parse_frame(buf)
    return Verdict(REDIRECT_PEER, inner, target_ifidx=ingress_info.veth_ifidx)
