"""Rewriting-based tunneling: masquerade container frames instead of
encapsulating them.

The sender rewrites container MACs/IPs to host values and stores a restore
key in the IP identification field; the receiver looks the key up together
with the sending host IP and rewrites everything back.  Wire overhead is
zero bytes.  Keys are allocated on the host that will receive the
masqueraded packets and delivered in-band during the standard VXLAN
handshake, one direction per half round trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from . import packet
from .cache import EGRESS, INGRESS, HostCaches, LruMap, is_fastpath_allowed, whitelist_direction
from .fastpath import PASS, REDIRECT, REDIRECT_PEER, ProgContext, Verdict, _mark_miss
from .initpath import InitOutcome
from .packet import FiveTuple, ParsedFrame

DEFAULT_RW_EGRESS_CAP = 1024
DEFAULT_INGRESSIP_CAP = 4096
MAX_RESTORE_KEY = 0xFFFF


class IncompleteInfo(Exception):
    """Masquerade attempted before the egress entry finished initializing."""


class KeySpaceExhausted(Exception):
    """All 16-bit restore keys for one peer host are live."""


@dataclass
class RwEgressInfo:
    """Masquerade ingredients for one destination container."""

    src_mac: bytes = b""
    dst_mac: bytes = b""
    src_ip: str = ""
    dst_ip: str = ""
    host_ifidx: int = 0
    restore_key: int = 0

    @property
    def complete(self) -> bool:
        return bool(self.src_mac and self.dst_mac and self.src_ip and self.dst_ip) and self.restore_key != 0


@dataclass
class RwState:
    """Receiver-side restore maps plus the sender-side egress map.

    ingressip: (restore key, sending host IP) -> (src container IP, dst
    container IP).  The MAC/veth half of restoring lives in the shared
    standard ingress cache.
    """

    egress: LruMap[str, RwEgressInfo] = field(default_factory=lambda: LruMap(DEFAULT_RW_EGRESS_CAP))
    ingressip: LruMap[tuple[int, str], tuple[str, str]] = field(
        default_factory=lambda: LruMap(DEFAULT_INGRESSIP_CAP)
    )

    @classmethod
    def with_capacity(cls, capacity: Optional[int]) -> "RwState":
        if capacity is None:
            return cls()
        return cls(egress=LruMap(capacity), ingressip=LruMap(capacity))


def allocate_restore_key(
    rw: RwState,
    src_host_ip: str,
    src_container_ip: str,
    dst_container_ip: str,
    *,
    max_key: int = MAX_RESTORE_KEY,
) -> int:
    """Smallest unused nonzero key for the peer, idempotent per container pair."""
    pair = (src_container_ip, dst_container_ip)
    used = set()
    for (key, host_ip), value in rw.ingressip.items():
        if host_ip != src_host_ip:
            continue
        if value == pair:
            return key
        used.add(key)
    for candidate in range(1, max_key + 1):
        if candidate not in used:
            rw.ingressip.put((candidate, src_host_ip), pair)
            return candidate
    raise KeySpaceExhausted(f"no restore keys left for peer {src_host_ip}")


def masquerade(frame: ParsedFrame, info: RwEgressInfo) -> ParsedFrame:
    """Rewrite a container frame to host addressing; length is unchanged."""
    if not info.complete:
        raise IncompleteInfo(repr(info))
    out = packet.parse_frame(frame.serialize())
    out.buf[0:6] = info.dst_mac
    out.buf[6:12] = info.src_mac
    ip = out.ip_offset()
    out.buf[ip + 12 : ip + 16] = packet.ip_bytes(info.src_ip)
    out.buf[ip + 16 : ip + 20] = packet.ip_bytes(info.dst_ip)
    struct.pack_into("!H", out.buf, ip + 4, info.restore_key)
    out.refresh_ip_checksum()
    _refresh_l4_checksum(out)
    return out


def restore(
    frame: ParsedFrame, rw: RwState, ingress: LruMap
) -> Optional[tuple[ParsedFrame, int]]:
    """Undo masquerading; None means the frame must go to the fallback."""
    key = (frame.ident(), frame.src_ip())
    pair = rw.ingressip.get(key)
    if pair is None:
        return None
    src_cip, dst_cip = pair
    info = ingress.get(dst_cip)
    if info is None or not info.complete:
        return None
    out = packet.parse_frame(frame.serialize())
    out.buf[0:6] = info.dmac
    out.buf[6:12] = info.smac
    ip = out.ip_offset()
    out.buf[ip + 12 : ip + 16] = packet.ip_bytes(src_cip)
    out.buf[ip + 16 : ip + 20] = packet.ip_bytes(dst_cip)
    # The original identification was overwritten by the restore key and is
    # not recoverable; it stays as the key value.
    out.refresh_ip_checksum()
    _refresh_l4_checksum(out)
    return out, info.veth_ifidx


def _refresh_l4_checksum(frame: ParsedFrame) -> None:
    """Recompute the transport checksum after an IP rewrite."""
    proto = frame.ip_proto()
    ip = frame.ip_offset()
    l4 = frame.l4_offset()
    end = ip + frame.total_length()
    seg = bytearray(frame.buf[l4:end])
    if proto == packet.PROTO_TCP and len(seg) >= packet.TCP_LEN:
        struct.pack_into("!H", seg, 16, 0)
        struct.pack_into("!H", seg, 16, packet.l4_checksum(frame.src_ip(), frame.dst_ip(), proto, bytes(seg)))
    elif proto == packet.PROTO_UDP and len(seg) >= packet.UDP_LEN:
        struct.pack_into("!H", seg, 6, 0)
        struct.pack_into("!H", seg, 6, packet.l4_checksum(frame.src_ip(), frame.dst_ip(), proto, bytes(seg)) or 0xFFFF)
    else:
        return  # ICMP checksums do not cover the pseudo-header
    frame.buf[l4:end] = seg


def rw_egress_prog(frame: ParsedFrame, ctx: ProgContext, rw: RwState) -> Verdict:
    """Masquerading fast path; gate structure mirrors the template fast path."""
    if frame.ip is None:
        return Verdict(PASS, frame)
    tup = frame.five_tuple()
    if not is_fastpath_allowed(ctx.caches.filter, tup):
        marked = _mark_miss(frame, ctx, inner=False)
        return Verdict(PASS, frame, miss_marked=marked)
    info = rw.egress.get(tup.dst_ip)
    if info is None or not info.complete:
        marked = _mark_miss(frame, ctx, inner=False)
        return Verdict(PASS, frame, miss_marked=marked)
    ingress_info = ctx.caches.ingress.get(tup.src_ip)
    if ingress_info is None or not ingress_info.complete:
        return Verdict(PASS, frame)
    wire = masquerade(frame, info)
    return Verdict(REDIRECT, wire, target_ifidx=info.host_ifidx)


def rw_ingress_prog(frame: ParsedFrame, ctx: ProgContext, rw: RwState) -> Verdict:
    """Restore masqueraded frames; tunnel frames keep the standard marking."""
    from .fastpath import _destination_check, ingress_prog

    if frame.is_tunnel:
        # VXLAN frames here are handshake traffic.  The standard ingress
        # steps apply (so the filter-miss mark arms the init hooks) but the
        # reverse-egressip gate never holds in this mode, so they always
        # end in a pass to the fallback.
        return ingress_prog(frame, ctx)
    if not _destination_check(frame, ctx):
        return Verdict(PASS, frame)
    hit = restore(frame, rw, ctx.caches.ingress)
    if hit is None:
        return Verdict(PASS, frame)
    restored, veth_ifidx = hit
    tup = restored.five_tuple().swapped()
    if not is_fastpath_allowed(ctx.caches.filter, tup):
        return Verdict(PASS, frame)
    return Verdict(REDIRECT_PEER, restored, target_ifidx=veth_ifidx)


def rw_egress_init(
    frame: ParsedFrame, caches: HostCaches, rw: RwState, egress_ifidx: int
) -> InitOutcome:
    """Outbound hook: learn host addressing and allocate the reverse key.

    Runs on miss+steady VXLAN frames like the standard egress-init, but
    fills the rewrite egress entry instead of capturing a header template,
    and stamps the freshly allocated reverse-flow key into the inner
    identification field so the peer learns it.
    """
    out = InitOutcome(frame)
    if not frame.is_tunnel or frame.inner_ip is None:
        return out
    marks = packet.read_tos_marks(frame, inner=True)
    if marks.miss and marks.steady:
        tup = frame.five_tuple(inner=True)
        if whitelist_direction(caches.filter, tup, EGRESS):
            out.writes.append(("filter", tup))
        entry = rw.egress.get(tup.dst_ip)
        if entry is None:
            entry = RwEgressInfo()
            rw.egress.put(tup.dst_ip, entry)
            out.writes.append(("rw_egress", tup.dst_ip))
        entry.src_mac = frame.src_mac()
        entry.dst_mac = frame.dst_mac()
        entry.src_ip = frame.src_ip()
        entry.dst_ip = frame.dst_ip()
        entry.host_ifidx = egress_ifidx
        reverse_key = allocate_restore_key(rw, frame.dst_ip(), tup.dst_ip, tup.src_ip)
        out.writes.append(("rw_ingressip", (reverse_key, frame.dst_ip())))
        frame.set_ident(reverse_key, inner=True)
    if marks.miss or marks.steady:
        packet.clear_marks(frame, inner=True)
    return out


def rw_ingress_init(frame: ParsedFrame, caches: HostCaches, rw: RwState) -> InitOutcome:
    """Veth-side hook: record inner MACs and adopt the delivered key."""
    out = InitOutcome(frame)
    if frame.ip is None:
        return out
    marks = packet.read_tos_marks(frame)
    if marks.miss and marks.steady:
        info = caches.ingress.get(frame.dst_ip())
        if info is not None:
            if (info.dmac, info.smac) != (frame.dst_mac(), frame.src_mac()):
                out.writes.append(("ingress", frame.dst_ip()))
            info.dmac = frame.dst_mac()
            info.smac = frame.src_mac()
            tup = frame.five_tuple().swapped()
            if whitelist_direction(caches.filter, tup, INGRESS):
                out.writes.append(("filter", tup))
            key = frame.ident()
            if key != 0:
                entry = rw.egress.get(frame.src_ip())
                if entry is None:
                    entry = RwEgressInfo()
                    rw.egress.put(frame.src_ip(), entry)
                    out.writes.append(("rw_egress", frame.src_ip()))
                if entry.restore_key != key:
                    entry.restore_key = key
                    out.writes.append(("rw_key", frame.src_ip()))
    if marks.miss or marks.steady:
        packet.clear_marks(frame)
    return out
