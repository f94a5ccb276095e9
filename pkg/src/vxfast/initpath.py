"""Cache initialization hooks and user-space daemon registrations.

The egress-init hook sits where frames leave the host interface; the
ingress-init hook sits at the container-side veth.  Both fire only on
frames carrying the miss and steady marks together, learn cache entries
from the frame itself, and strip the marks.  Frames carrying only one mark
are passed on with the marks cleared but teach nothing: a host never puts
a marked frame on the wire or into a container.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import packet
from .cache import (
    EGRESS,
    INGRESS,
    EgressInfo,
    HostCaches,
    IngressInfo,
    DevInfo,
    DEVMAP_CAP,
    CacheCapacityError,
    PutResult,
    whitelist_direction,
)
from .packet import ParsedFrame, ZERO_MAC


class DuplicateContainer(Exception):
    """A container IP was provisioned twice on one host."""


@dataclass
class InitOutcome:
    frame: ParsedFrame
    # (map name, key) pairs written, for coherency audits.
    writes: list[tuple[str, object]] = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return bool(self.writes)


def egress_init_prog(frame: ParsedFrame, caches: HostCaches, egress_ifidx: int) -> InitOutcome:
    """Learn egress-side entries from an outbound miss+steady tunnel frame."""
    out = InitOutcome(frame)
    if not frame.is_tunnel or frame.inner_ip is None:
        return out
    marks = packet.read_tos_marks(frame, inner=True)
    if marks.miss and marks.steady:
        tup = frame.five_tuple(inner=True)
        if whitelist_direction(caches.filter, tup, EGRESS):
            out.writes.append(("filter", tup))
        info = EgressInfo(
            header_template=bytes(frame.buf[: packet.TEMPLATE_LEN]),
            host_ifidx=egress_ifidx,
        )
        peer_ip = frame.dst_ip()
        if caches.egress.put(peer_ip, info, if_absent=True) is PutResult.INSERTED:
            out.writes.append(("egress", peer_ip))
        if caches.egressip.put(frame.dst_ip(inner=True), peer_ip, if_absent=True) is PutResult.INSERTED:
            out.writes.append(("egressip", frame.dst_ip(inner=True)))
    if marks.miss or marks.steady:
        packet.clear_marks(frame, inner=True)
    return out


def ingress_init_prog(frame: ParsedFrame, caches: HostCaches) -> InitOutcome:
    """Learn ingress-side entries from a miss+steady frame at the veth."""
    out = InitOutcome(frame)
    if frame.ip is None:
        return out
    marks = packet.read_tos_marks(frame)
    if marks.miss and marks.steady:
        info = caches.ingress.get(frame.dst_ip())
        if info is not None:
            # The daemon seeds the entry with the veth index; the MACs come
            # from the frame the fallback just delivered.
            if (info.dmac, info.smac) != (frame.dst_mac(), frame.src_mac()):
                out.writes.append(("ingress", frame.dst_ip()))
            info.dmac = frame.dst_mac()
            info.smac = frame.src_mac()
            tup = frame.five_tuple().swapped()
            if whitelist_direction(caches.filter, tup, INGRESS):
                out.writes.append(("filter", tup))
    if marks.miss or marks.steady:
        packet.clear_marks(frame)
    return out


def register_container(
    caches: HostCaches, container_ip: str, veth_ifidx: int, *, allow_existing: bool = False
) -> None:
    """Seed the ingress entry at provision time; MACs stay zero until learned."""
    if not allow_existing and caches.ingress.peek(container_ip) is not None:
        raise DuplicateContainer(container_ip)
    caches.ingress.put(container_ip, IngressInfo(veth_ifidx=veth_ifidx, dmac=ZERO_MAC, smac=ZERO_MAC))


def register_host_interface(caches: HostCaches, ifidx: int, mac: bytes, ip: str) -> None:
    if ifidx not in caches.devmap and len(caches.devmap) >= DEVMAP_CAP:
        raise CacheCapacityError(f"devmap full ({DEVMAP_CAP} interfaces)")
    caches.devmap[ifidx] = DevInfo(mac=mac, ip=ip)
