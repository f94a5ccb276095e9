"""Byte-exact parsing, construction and mutation of overlay frames.

Wire layouts follow IEEE 802.3 (Ethernet II), RFC 791 (IPv4, no options),
RFC 768 (UDP), RFC 793 (TCP) and RFC 7348 (VXLAN: I-flag set, UDP dst port
4789, outer UDP checksum 0).  Everything operates on plain byte buffers so
frames can be compared bit-for-bit across pipelines.
"""

from __future__ import annotations

import struct
from typing import NamedTuple, Optional

ETHERTYPE_IPV4 = 0x0800
PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

VXLAN_PORT = 4789
VXLAN_FLAG_VNI = 0x08

ETH_LEN = 14
IPV4_LEN = 20
UDP_LEN = 8
TCP_LEN = 20
ICMP_LEN = 8
VXLAN_LEN = 8

# Outer Ethernet + IPv4 + UDP + VXLAN prepended to a container frame.
TUNNEL_OVERHEAD = ETH_LEN + IPV4_LEN + UDP_LEN + VXLAN_LEN  # 50
# Overhead plus the inner Ethernet header: the slice a cached header
# template covers.
TEMPLATE_LEN = TUNNEL_OVERHEAD + ETH_LEN  # 64

# Signalling bits carried in the IPv4 tos field between pipeline stages.
TOS_MISS = 0x04
TOS_STEADY = 0x08
TOS_MARK_BITS = TOS_MISS | TOS_STEADY

ZERO_MAC = bytes(6)

EPHEMERAL_BASE = 49152
EPHEMERAL_SPAN = 16384

FNV_OFFSET_BASIS = 2166136261
FNV_PRIME = 16777619


class PacketError(Exception):
    """Base class for frame-level failures."""


class TruncatedFrame(PacketError):
    """Buffer is shorter than a header claimed by preceding fields."""


class NoSuchHeader(PacketError):
    """The requested layer is not present in the frame."""


def mac_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def mac_bytes(text: str) -> bytes:
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"bad MAC address {text!r}")
    return bytes(int(p, 16) for p in parts)


def ip_bytes(text: str) -> bytes:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {text!r}")
    vals = [int(p) for p in parts]
    if any(v < 0 or v > 255 for v in vals):
        raise ValueError(f"bad IPv4 address {text!r}")
    return bytes(vals)


def ip_str(raw: bytes) -> str:
    return ".".join(str(b) for b in raw)


class FiveTuple(NamedTuple):
    """Canonical flow identity; ICMP flows carry (0, 0) ports."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int

    def to_bytes(self) -> bytes:
        # 4 + 4 + 2 + 2 + 1 = 13 bytes, network order.
        return (
            ip_bytes(self.src_ip)
            + ip_bytes(self.dst_ip)
            + struct.pack("!HHB", self.src_port, self.dst_port, self.protocol)
        )

    def swapped(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.protocol)

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}>{self.dst_ip}:{self.dst_port}/{self.protocol}"


class TosMarks(NamedTuple):
    miss: bool
    steady: bool


def internet_checksum(data: bytes) -> int:
    """RFC 1071 one's-complement sum of one's-complement 16-bit words."""
    if len(data) % 2:
        data = data + b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


def ipv4_header_checksum(header: bytes) -> int:
    """Checksum of a 20-byte IPv4 header whose checksum field is zeroed."""
    if len(header) != IPV4_LEN:
        raise ValueError(f"IPv4 header must be 20 bytes, got {len(header)}")
    return internet_checksum(header)


def l4_checksum(src_ip: str, dst_ip: str, protocol: int, segment: bytes) -> int:
    """Transport checksum over the IPv4 pseudo-header plus the segment."""
    pseudo = ip_bytes(src_ip) + ip_bytes(dst_ip) + struct.pack("!BBH", 0, protocol, len(segment))
    value = internet_checksum(pseudo + segment)
    return value


def flow_hash(tup: FiveTuple) -> int:
    """32-bit FNV-1a over the 13-byte tuple serialization.

    Pinned so independent runs and implementations agree bit-exactly.
    """
    h = FNV_OFFSET_BASIS
    for b in tup.to_bytes():
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def outer_udp_source_port(tup: FiveTuple) -> int:
    """Ephemeral-range source port derived from the inner flow."""
    return EPHEMERAL_BASE + (flow_hash(tup) % EPHEMERAL_SPAN)


def ethernet_header(dst_mac: bytes, src_mac: bytes, ethertype: int = ETHERTYPE_IPV4) -> bytes:
    return dst_mac + src_mac + struct.pack("!H", ethertype)


def ipv4_header(
    src_ip: str,
    dst_ip: str,
    protocol: int,
    payload_len: int,
    *,
    tos: int = 0,
    ident: int = 0,
    ttl: int = 64,
    df: bool = True,
) -> bytes:
    total = IPV4_LEN + payload_len
    flags_frag = 0x4000 if df else 0
    hdr = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            0x45,
            tos,
            total,
            ident,
            flags_frag,
            ttl,
            protocol,
            0,
            ip_bytes(src_ip),
            ip_bytes(dst_ip),
        )
    )
    struct.pack_into("!H", hdr, 10, internet_checksum(bytes(hdr)))
    return bytes(hdr)


def udp_header(src_port: int, dst_port: int, payload_len: int, checksum: int = 0) -> bytes:
    return struct.pack("!HHHH", src_port, dst_port, UDP_LEN + payload_len, checksum)


def vxlan_header(vni: int) -> bytes:
    if vni < 0 or vni >= 1 << 24:
        raise ValueError(f"VNI {vni} out of 24-bit range")
    return struct.pack("!B3s3sB", VXLAN_FLAG_VNI, b"\x00\x00\x00", vni.to_bytes(3, "big"), 0)


def build_udp_packet(
    src_ip: str, dst_ip: str, src_port: int, dst_port: int, payload: bytes, **ip_kw
) -> bytes:
    seg = bytearray(udp_header(src_port, dst_port, len(payload)) + payload)
    struct.pack_into("!H", seg, 6, l4_checksum(src_ip, dst_ip, PROTO_UDP, bytes(seg)) or 0xFFFF)
    return ipv4_header(src_ip, dst_ip, PROTO_UDP, len(seg), **ip_kw) + bytes(seg)


def build_tcp_packet(
    src_ip: str,
    dst_ip: str,
    src_port: int,
    dst_port: int,
    payload: bytes,
    *,
    seq: int = 0,
    ack: int = 0,
    flags: int = 0x10,
    **ip_kw,
) -> bytes:
    seg = bytearray(
        struct.pack("!HHIIBBHHH", src_port, dst_port, seq, ack, 5 << 4, flags, 65535, 0, 0)
        + payload
    )
    struct.pack_into("!H", seg, 16, l4_checksum(src_ip, dst_ip, PROTO_TCP, bytes(seg)))
    return ipv4_header(src_ip, dst_ip, PROTO_TCP, len(seg), **ip_kw) + bytes(seg)


def build_icmp_echo(
    src_ip: str, dst_ip: str, payload: bytes, *, reply: bool = False, ident: int = 0, seq: int = 0, **ip_kw
) -> bytes:
    icmp_type = 0 if reply else 8
    seg = bytearray(struct.pack("!BBHHH", icmp_type, 0, 0, ident, seq) + payload)
    struct.pack_into("!H", seg, 2, internet_checksum(bytes(seg)))
    return ipv4_header(src_ip, dst_ip, PROTO_ICMP, len(seg), **ip_kw) + bytes(seg)


class ParsedFrame:
    """Layered view over one contiguous, mutable byte buffer.

    Offsets are recorded for every recognized layer.  ``is_tunnel`` holds
    exactly when the outer stack is Ethernet/IPv4/UDP with destination port
    4789 and a complete VXLAN header plus inner Ethernet header fit in the
    buffer; inner IPv4/L4 offsets are filled best-effort so short tunnel
    prefixes (e.g. a bare 64-byte header template frame) still parse.
    """

    __slots__ = (
        "buf",
        "eth",
        "ip",
        "l4",
        "vxlan",
        "inner_eth",
        "inner_ip",
        "inner_l4",
        "is_tunnel",
    )

    def __init__(self, buf: bytearray):
        self.buf = buf
        self.eth = 0
        self.ip: Optional[int] = None
        self.l4: Optional[int] = None
        self.vxlan: Optional[int] = None
        self.inner_eth: Optional[int] = None
        self.inner_ip: Optional[int] = None
        self.inner_l4: Optional[int] = None
        self.is_tunnel = False

    # -- layer selection -------------------------------------------------

    def ip_offset(self, inner: bool = False) -> int:
        off = self.inner_ip if inner else self.ip
        if off is None:
            raise NoSuchHeader("inner IPv4 header" if inner else "IPv4 header")
        return off

    def l4_offset(self, inner: bool = False) -> int:
        off = self.inner_l4 if inner else self.l4
        if off is None:
            raise NoSuchHeader("inner transport header" if inner else "transport header")
        return off

    def eth_offset(self, inner: bool = False) -> int:
        if inner:
            if self.inner_eth is None:
                raise NoSuchHeader("inner Ethernet header")
            return self.inner_eth
        return self.eth

    # -- field accessors -------------------------------------------------

    def dst_mac(self, inner: bool = False) -> bytes:
        off = self.eth_offset(inner)
        return bytes(self.buf[off : off + 6])

    def src_mac(self, inner: bool = False) -> bytes:
        off = self.eth_offset(inner)
        return bytes(self.buf[off + 6 : off + 12])

    def ethertype(self, inner: bool = False) -> int:
        off = self.eth_offset(inner)
        return struct.unpack_from("!H", self.buf, off + 12)[0]

    def ip_proto(self, inner: bool = False) -> int:
        return self.buf[self.ip_offset(inner) + 9]

    def tos(self, inner: bool = False) -> int:
        return self.buf[self.ip_offset(inner) + 1]

    def ttl(self, inner: bool = False) -> int:
        return self.buf[self.ip_offset(inner) + 8]

    def ident(self, inner: bool = False) -> int:
        return struct.unpack_from("!H", self.buf, self.ip_offset(inner) + 4)[0]

    def total_length(self, inner: bool = False) -> int:
        return struct.unpack_from("!H", self.buf, self.ip_offset(inner) + 2)[0]

    def src_ip(self, inner: bool = False) -> str:
        off = self.ip_offset(inner)
        return ip_str(bytes(self.buf[off + 12 : off + 16]))

    def dst_ip(self, inner: bool = False) -> str:
        off = self.ip_offset(inner)
        return ip_str(bytes(self.buf[off + 16 : off + 20]))

    def udp_dst_port(self, inner: bool = False) -> int:
        return struct.unpack_from("!H", self.buf, self.l4_offset(inner) + 2)[0]

    def udp_length(self, inner: bool = False) -> int:
        return struct.unpack_from("!H", self.buf, self.l4_offset(inner) + 4)[0]

    def vni(self) -> int:
        if self.vxlan is None:
            raise NoSuchHeader("VXLAN header")
        return int.from_bytes(self.buf[self.vxlan + 4 : self.vxlan + 7], "big")

    def five_tuple(self, inner: bool = False) -> FiveTuple:
        proto = self.ip_proto(inner)
        if proto in (PROTO_TCP, PROTO_UDP):
            off = self.l4_offset(inner)
            sport, dport = struct.unpack_from("!HH", self.buf, off)
        else:
            sport = dport = 0
        return FiveTuple(self.src_ip(inner), self.dst_ip(inner), sport, dport, proto)

    def l4_payload(self, inner: bool = False) -> bytes:
        proto = self.ip_proto(inner)
        ip_off = self.ip_offset(inner)
        l4_off = self.l4_offset(inner)
        end = ip_off + self.total_length(inner)
        if proto == PROTO_TCP:
            return bytes(self.buf[l4_off + TCP_LEN : end])
        if proto == PROTO_UDP:
            return bytes(self.buf[l4_off + UDP_LEN : end])
        if proto == PROTO_ICMP:
            return bytes(self.buf[l4_off + ICMP_LEN : end])
        return bytes(self.buf[l4_off:end])

    # -- mutation --------------------------------------------------------

    def refresh_ip_checksum(self, inner: bool = False) -> None:
        off = self.ip_offset(inner)
        struct.pack_into("!H", self.buf, off + 10, 0)
        struct.pack_into(
            "!H", self.buf, off + 10, internet_checksum(bytes(self.buf[off : off + IPV4_LEN]))
        )

    def set_ident(self, value: int, inner: bool = False) -> None:
        struct.pack_into("!H", self.buf, self.ip_offset(inner) + 4, value & 0xFFFF)
        self.refresh_ip_checksum(inner)

    def serialize(self) -> bytes:
        return bytes(self.buf)

    def __len__(self) -> int:
        return len(self.buf)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParsedFrame) and self.buf == other.buf

    def __repr__(self) -> str:
        kind = "tunnel" if self.is_tunnel else "plain"
        return f"<ParsedFrame {kind} {len(self.buf)}B>"


def _parse_ipv4_at(frame: ParsedFrame, off: int) -> tuple[int, int]:
    """Validate an IPv4 header at `off`; returns (protocol, l4 offset)."""
    buf = frame.buf
    if len(buf) < off + IPV4_LEN:
        raise TruncatedFrame(f"IPv4 header claimed at {off} but buffer is {len(buf)} bytes")
    vi = buf[off]
    if vi >> 4 != 4:
        raise TruncatedFrame(f"bad IPv4 version {vi >> 4}")
    if (vi & 0x0F) != 5:
        raise TruncatedFrame("IPv4 options are not supported (ihl != 5)")
    total = struct.unpack_from("!H", buf, off + 2)[0]
    if total < IPV4_LEN or off + total > len(buf):
        raise TruncatedFrame(f"IPv4 total length {total} exceeds buffer")
    return buf[off + 9], off + IPV4_LEN


def _claimed_l4_len(proto: int) -> int:
    if proto == PROTO_TCP:
        return TCP_LEN
    if proto == PROTO_UDP:
        return UDP_LEN
    if proto == PROTO_ICMP:
        return ICMP_LEN
    return 0


def parse_frame(data: bytes | bytearray) -> ParsedFrame:
    """Parse a frame into layer offsets without copying or altering bytes.

    Raises TruncatedFrame when a header claimed by preceding fields does
    not fit.  Unknown EtherTypes and transport protocols are not errors;
    the frame simply parses with fewer recognized layers.
    """
    frame = ParsedFrame(bytearray(data))
    buf = frame.buf
    if len(buf) < ETH_LEN:
        raise TruncatedFrame(f"frame of {len(buf)} bytes is below the Ethernet minimum")
    if frame.ethertype() != ETHERTYPE_IPV4:
        return frame
    proto, l4 = _parse_ipv4_at(frame, ETH_LEN)
    frame.ip = ETH_LEN
    frame.l4 = l4
    need = _claimed_l4_len(proto)
    if need and len(buf) < l4 + need:
        raise TruncatedFrame(f"transport header (proto {proto}) does not fit")
    if proto != PROTO_UDP or frame.udp_dst_port() != VXLAN_PORT:
        return frame
    # Tunnel candidate: require the full VXLAN + inner Ethernet prefix,
    # otherwise treat the datagram as opaque UDP payload.
    vx = l4 + UDP_LEN
    if len(buf) < vx + VXLAN_LEN + ETH_LEN:
        return frame
    frame.vxlan = vx
    frame.inner_eth = vx + VXLAN_LEN
    frame.is_tunnel = True
    if frame.ethertype(inner=True) != ETHERTYPE_IPV4:
        return frame
    inner_ip = frame.inner_eth + ETH_LEN
    if len(buf) < inner_ip + IPV4_LEN:
        return frame  # bare tunnel prefix, e.g. a 64-byte template
    iproto, il4 = _parse_ipv4_at(frame, inner_ip)
    frame.inner_ip = inner_ip
    ineed = _claimed_l4_len(iproto)
    if ineed and len(buf) < il4 + ineed:
        raise TruncatedFrame(f"inner transport header (proto {iproto}) does not fit")
    frame.inner_l4 = il4
    return frame


def serialize_frame(frame: ParsedFrame) -> bytes:
    return frame.serialize()


def read_tos_marks(frame: ParsedFrame, inner: bool = False) -> TosMarks:
    tos = frame.tos(inner)
    return TosMarks(miss=bool(tos & TOS_MISS), steady=bool(tos & TOS_STEADY))


def apply_tos_marks(frame: ParsedFrame, marks: TosMarks, inner: bool = False) -> None:
    """Set bits 0x04/0x08 of the selected tos byte, preserving the rest."""
    off = frame.ip_offset(inner)
    tos = frame.buf[off + 1] & ~TOS_MARK_BITS
    if marks.miss:
        tos |= TOS_MISS
    if marks.steady:
        tos |= TOS_STEADY
    frame.buf[off + 1] = tos
    frame.refresh_ip_checksum(inner)


def set_miss_mark(frame: ParsedFrame, inner: bool = False) -> None:
    marks = read_tos_marks(frame, inner)
    apply_tos_marks(frame, TosMarks(miss=True, steady=marks.steady), inner)


def set_steady_mark(frame: ParsedFrame, inner: bool = False) -> None:
    marks = read_tos_marks(frame, inner)
    apply_tos_marks(frame, TosMarks(miss=marks.miss, steady=True), inner)


def clear_marks(frame: ParsedFrame, inner: bool = False) -> None:
    apply_tos_marks(frame, TosMarks(False, False), inner)
