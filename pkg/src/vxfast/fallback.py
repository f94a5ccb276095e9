"""The standard overlay pipeline used on cache miss and for leftover traffic.

Models the veth -> switch -> host-stack path of an OVS-style overlay:
connection tracking, priority-ordered rule evaluation, intra-host routing
and VXLAN encapsulation/decapsulation.  When steady marking is enabled the
pipeline additionally sets the steady tos bit on packets of flows whose
conntrack entry is ESTABLISHED, which is what arms cache initialization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from . import packet
from .packet import FiveTuple, ParsedFrame

DEFAULT_CT_TIMEOUT = 300

FORWARD = "forward"
REVERSE = "reverse"


class UnknownPeer(Exception):
    """Encapsulation requested toward a host with no tunnel config."""


class NotATunnelFrame(Exception):
    """Decapsulation requested on a frame that is not a VXLAN tunnel frame."""


class CtState(enum.Enum):
    NEW = "NEW"
    ESTABLISHED = "ESTABLISHED"


class Action(enum.Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"


@dataclass
class ConntrackEntry:
    tuple: FiveTuple
    state: CtState
    last_seen: int
    seen_forward: bool = False
    seen_reverse: bool = False


class ConntrackTable:
    """Per-host flow state; ESTABLISHED requires traffic in both directions.

    Entries are keyed by the host's canonical flow tuple and expire lazily:
    any lookup first discards an entry idle longer than the timeout.
    """

    def __init__(self, timeout: int = DEFAULT_CT_TIMEOUT):
        self.timeout = timeout
        self._entries: dict[FiveTuple, ConntrackEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def _fresh(self, tup: FiveTuple, now: int) -> ConntrackEntry:
        entry = ConntrackEntry(tuple=tup, state=CtState.NEW, last_seen=now)
        self._entries[tup] = entry
        return entry

    def observe(self, tup: FiveTuple, direction: str, now: int) -> CtState:
        entry = self._entries.get(tup)
        if entry is not None and now - entry.last_seen > self.timeout:
            del self._entries[tup]
            entry = None
        if entry is None:
            entry = self._fresh(tup, now)
        entry.last_seen = now
        if direction == FORWARD:
            entry.seen_forward = True
        elif direction == REVERSE:
            entry.seen_reverse = True
        else:
            raise ValueError(f"unknown direction {direction!r}")
        if entry.seen_forward and entry.seen_reverse:
            entry.state = CtState.ESTABLISHED
        return entry.state

    def lookup(self, tup: FiveTuple, now: int) -> Optional[ConntrackEntry]:
        entry = self._entries.get(tup)
        if entry is not None and now - entry.last_seen > self.timeout:
            del self._entries[tup]
            return None
        return entry


def conntrack_observe(table: ConntrackTable, tup: FiveTuple, direction: str, now: int) -> CtState:
    return table.observe(tup, direction, now)


@dataclass(frozen=True)
class FilterRule:
    """One priority-ordered match rule; None fields are wildcards."""

    rule_id: str
    priority: int
    action: Action
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    protocol: Optional[int] = None
    dscp: Optional[int] = None
    state_gate: Optional[CtState] = None

    def matches(self, tup: FiveTuple, dscp: int, ct_state: CtState) -> bool:
        if self.src_ip is not None and self.src_ip != tup.src_ip:
            return False
        if self.dst_ip is not None and self.dst_ip != tup.dst_ip:
            return False
        if self.src_port is not None and self.src_port != tup.src_port:
            return False
        if self.dst_port is not None and self.dst_port != tup.dst_port:
            return False
        if self.protocol is not None and self.protocol != tup.protocol:
            return False
        if self.dscp is not None and self.dscp != dscp:
            return False
        if self.state_gate is not None and self.state_gate != ct_state:
            return False
        return True

    def matches_flow(self, tup: FiveTuple) -> bool:
        """Match ignoring per-packet state, for affected-key derivation."""
        return self.matches(tup, self.dscp if self.dscp is not None else 0,
                            self.state_gate if self.state_gate is not None else CtState.NEW)


def evaluate_rules(rules: list[FilterRule], tup: FiveTuple, dscp: int, ct_state: CtState) -> Action:
    """First matching rule wins; no match means ALLOW."""
    for rule in sorted(rules, key=lambda r: r.priority):
        if rule.matches(tup, dscp, ct_state):
            return rule.action
    return Action.ALLOW


def frame_dscp(frame: ParsedFrame, inner: bool = False) -> int:
    # Mark bits are transient pipeline signals, never part of the policy view.
    return (frame.tos(inner) & ~packet.TOS_MARK_BITS) >> 2


@dataclass
class LocalRoute:
    veth_ifidx: int
    container_mac: bytes


@dataclass
class RemoteRoute:
    host_ip: str


@dataclass(frozen=True)
class PeerConfig:
    nexthop_mac: bytes


@dataclass
class FallbackState:
    """Everything one host's standard pipeline needs."""

    host_ip: str
    host_mac: bytes
    host_ifidx: int
    vni: int
    conntrack: ConntrackTable = field(default_factory=ConntrackTable)
    rules: list[FilterRule] = field(default_factory=list)
    routes: dict[str, LocalRoute | RemoteRoute] = field(default_factory=dict)
    peers: dict[str, PeerConfig] = field(default_factory=dict)
    steady_marking: bool = True
    _ip_ids: dict[str, int] = field(default_factory=dict)

    def next_ip_id(self, peer_ip: str) -> int:
        nxt = self._ip_ids.get(peer_ip, 0) % 0xFFFF + 1
        self._ip_ids[peer_ip] = nxt
        return nxt


def vxlan_encapsulate(inner: ParsedFrame, state: FallbackState, peer_ip: str, ip_id: int) -> ParsedFrame:
    """Wrap a container frame for the wire; adds exactly 50 bytes."""
    peer = state.peers.get(peer_ip)
    if peer is None:
        raise UnknownPeer(peer_ip)
    inner_bytes = inner.serialize()
    tup = inner.five_tuple()
    payload_len = packet.UDP_LEN + packet.VXLAN_LEN + len(inner_bytes)
    outer = (
        packet.ethernet_header(peer.nexthop_mac, state.host_mac)
        + packet.ipv4_header(
            state.host_ip, peer_ip, packet.PROTO_UDP, payload_len, ident=ip_id, ttl=64
        )
        + packet.udp_header(packet.outer_udp_source_port(tup), packet.VXLAN_PORT,
                            packet.VXLAN_LEN + len(inner_bytes))
        + packet.vxlan_header(state.vni)
    )
    return packet.parse_frame(outer + inner_bytes)


def vxlan_decapsulate(outer: ParsedFrame) -> ParsedFrame:
    """Return the inner frame, bit-identical to what was encapsulated."""
    if not outer.is_tunnel:
        raise NotATunnelFrame(repr(outer))
    assert outer.l4 is not None and outer.vxlan is not None
    end = outer.l4 + outer.udp_length()
    inner = outer.buf[outer.vxlan + packet.VXLAN_LEN : end]
    return packet.parse_frame(inner)


class DropReason(enum.Enum):
    DENY_EGRESS = "deny_egress"
    DENY_INGRESS = "deny_ingress"
    NO_ROUTE = "no_route"
    UNKNOWN_DEST = "unknown_dest"
    VNI_MISMATCH = "vni_mismatch"
    HOST_LOCAL = "host_local"
    NON_IPV4 = "non_ipv4"


@dataclass
class EgressOutcome:
    kind: str  # "wire" | "local" | "drop"
    frame: Optional[ParsedFrame] = None
    veth_ifidx: Optional[int] = None
    drop_reason: Optional[DropReason] = None


@dataclass
class IngressOutcome:
    kind: str  # "deliver" | "drop"
    frame: Optional[ParsedFrame] = None
    veth_ifidx: Optional[int] = None
    drop_reason: Optional[DropReason] = None


def fallback_egress(state: FallbackState, frame: ParsedFrame, now: int) -> EgressOutcome:
    """Standard egress: conntrack, rules, route, steady mark, encapsulate."""
    if frame.ip is None:
        return EgressOutcome("drop", drop_reason=DropReason.NON_IPV4)
    tup = frame.five_tuple()
    ct_state = state.conntrack.observe(tup, FORWARD, now)
    if evaluate_rules(state.rules, tup, frame_dscp(frame), ct_state) is Action.DENY:
        return EgressOutcome("drop", drop_reason=DropReason.DENY_EGRESS)
    route = state.routes.get(tup.dst_ip)
    if route is None:
        return EgressOutcome("drop", drop_reason=DropReason.NO_ROUTE)
    if isinstance(route, LocalRoute):
        delivered = packet.parse_frame(frame.serialize())
        _rewrite_inner_macs(delivered, route.container_mac, state.host_mac)
        return EgressOutcome("local", frame=delivered, veth_ifidx=route.veth_ifidx)
    peer = state.peers.get(route.host_ip)
    if peer is None:
        return EgressOutcome("drop", drop_reason=DropReason.NO_ROUTE)
    if state.steady_marking and ct_state is CtState.ESTABLISHED:
        packet.set_steady_mark(frame)
    # L3 hop toward the tunnel: inner MACs become host-pair values.
    _rewrite_inner_macs(frame, peer.nexthop_mac, state.host_mac)
    wire = vxlan_encapsulate(frame, state, route.host_ip, state.next_ip_id(route.host_ip))
    return EgressOutcome("wire", frame=wire)


def fallback_ingress(state: FallbackState, frame: ParsedFrame, now: int) -> IngressOutcome:
    """Standard ingress: decapsulate, conntrack, rules, local delivery."""
    if not frame.is_tunnel:
        return IngressOutcome("drop", drop_reason=DropReason.HOST_LOCAL)
    if frame.vni() != state.vni:
        return IngressOutcome("drop", drop_reason=DropReason.VNI_MISMATCH)
    inner = vxlan_decapsulate(frame)
    if inner.ip is None:
        return IngressOutcome("drop", drop_reason=DropReason.NON_IPV4)
    arriving = inner.five_tuple()
    canonical = arriving.swapped()
    ct_state = state.conntrack.observe(canonical, REVERSE, now)
    if evaluate_rules(state.rules, arriving, frame_dscp(inner), ct_state) is Action.DENY:
        return IngressOutcome("drop", drop_reason=DropReason.DENY_INGRESS)
    route = state.routes.get(arriving.dst_ip)
    if not isinstance(route, LocalRoute):
        return IngressOutcome("drop", drop_reason=DropReason.UNKNOWN_DEST)
    if state.steady_marking and ct_state is CtState.ESTABLISHED:
        packet.set_steady_mark(inner)
    _rewrite_inner_macs(inner, route.container_mac, state.host_mac)
    return IngressOutcome("deliver", frame=inner, veth_ifidx=route.veth_ifidx)


def _rewrite_inner_macs(frame: ParsedFrame, dst_mac: bytes, src_mac: bytes) -> None:
    frame.buf[0:6] = dst_mac
    frame.buf[6:12] = src_mac
