"""Per-host cache state: a deterministic LRU hash map and the concrete maps.

Four LRU maps (egressip, egress, ingress, filter) plus a small plain devmap
make up one host's cache state.  Recency is updated on get and upsert;
iteration and dumps are most-recent-first so tests can pin exact orders.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Generic, Hashable, Iterator, Optional, TypeVar

from . import packet
from .packet import FiveTuple, ZERO_MAC, mac_str

K = TypeVar("K", bound=Hashable)
V = TypeVar("V")

DEFAULT_EGRESSIP_CAP = 4096
DEFAULT_EGRESS_CAP = 1024
DEFAULT_INGRESS_CAP = 1024
DEFAULT_FILTER_CAP = 4096
DEVMAP_CAP = 8

EGRESS = "egress"
INGRESS = "ingress"


class CacheCapacityError(Exception):
    """A fixed-size map (devmap) is full."""


class PutResult(enum.Enum):
    INSERTED = "inserted"
    UPDATED = "updated"
    REJECTED = "rejected"


class LruMap(Generic[K, V]):
    """Hash map with strict LRU eviction and deterministic recency order.

    get refreshes recency; upsert refreshes recency; an insert-if-absent
    that is rejected also refreshes recency (mirroring a failed exclusive
    insert followed by a lookup-and-modify).  A net insertion into a full
    map evicts exactly the least recently used key.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[K, V] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: K) -> bool:
        return key in self._entries

    def get(self, key: K) -> Optional[V]:
        if key not in self._entries:
            return None
        self._entries.move_to_end(key)
        return self._entries[key]

    def peek(self, key: K) -> Optional[V]:
        """Lookup without touching recency (debug / derivation use)."""
        return self._entries.get(key)

    def put(self, key: K, value: V, *, if_absent: bool = False) -> PutResult:
        if key in self._entries:
            self._entries.move_to_end(key)
            if if_absent:
                return PutResult.REJECTED
            self._entries[key] = value
            return PutResult.UPDATED
        if len(self._entries) >= self.capacity:
            self._entries.popitem(last=False)
        self._entries[key] = value
        return PutResult.INSERTED

    def delete(self, key: K) -> bool:
        if key in self._entries:
            del self._entries[key]
            return True
        return False

    def items(self) -> Iterator[tuple[K, V]]:
        """Pairs in most-recent-first order; does not touch recency."""
        return iter(reversed(self._entries.items()))

    def keys(self) -> list[K]:
        return [k for k, _ in self.items()]


@dataclass
class EgressInfo:
    """Cached encapsulation result for one peer host.

    header_template holds the first 64 bytes of a previously encapsulated
    frame: outer Ethernet + IPv4 + UDP + VXLAN plus the rewritten inner
    Ethernet header.
    """

    header_template: bytes
    host_ifidx: int

    def __post_init__(self):
        t = self.header_template
        if len(t) != packet.TEMPLATE_LEN:
            raise ValueError(f"header template must be {packet.TEMPLATE_LEN} bytes, got {len(t)}")
        if int.from_bytes(t[12:14], "big") != packet.ETHERTYPE_IPV4:
            raise ValueError("template outer EtherType is not IPv4")
        if t[23] != packet.PROTO_UDP:
            raise ValueError("template outer protocol is not UDP")
        if int.from_bytes(t[36:38], "big") != packet.VXLAN_PORT:
            raise ValueError("template UDP destination port is not 4789")
        if t[40:42] != b"\x00\x00":
            raise ValueError("template outer UDP checksum must be 0")


@dataclass
class IngressInfo:
    """Host-side veth index plus the inner MACs used on local delivery."""

    veth_ifidx: int = 0
    dmac: bytes = ZERO_MAC
    smac: bytes = ZERO_MAC

    @property
    def complete(self) -> bool:
        return self.veth_ifidx != 0 and self.dmac != ZERO_MAC and self.smac != ZERO_MAC


@dataclass
class FilterAction:
    ingress_allowed: bool = False
    egress_allowed: bool = False

    @property
    def both(self) -> bool:
        return self.ingress_allowed and self.egress_allowed


@dataclass(frozen=True)
class DevInfo:
    mac: bytes
    ip: str


@dataclass
class HostCaches:
    """The per-host map set; devmap is plain (never LRU-evicted)."""

    egressip: LruMap[str, str] = field(default_factory=lambda: LruMap(DEFAULT_EGRESSIP_CAP))
    egress: LruMap[str, EgressInfo] = field(default_factory=lambda: LruMap(DEFAULT_EGRESS_CAP))
    ingress: LruMap[str, IngressInfo] = field(default_factory=lambda: LruMap(DEFAULT_INGRESS_CAP))
    filter: LruMap[FiveTuple, FilterAction] = field(default_factory=lambda: LruMap(DEFAULT_FILTER_CAP))
    devmap: dict[int, DevInfo] = field(default_factory=dict)

    @classmethod
    def with_capacity(cls, lru_capacity: Optional[int]) -> "HostCaches":
        if lru_capacity is None:
            return cls()
        return cls(
            egressip=LruMap(lru_capacity),
            egress=LruMap(lru_capacity),
            ingress=LruMap(lru_capacity),
            filter=LruMap(lru_capacity),
        )

    def lru_map(self, name: str) -> LruMap:
        maps = {"egressip": self.egressip, "egress": self.egress,
                "ingress": self.ingress, "filter": self.filter}
        if name not in maps:
            raise KeyError(f"unknown cache {name!r}")
        return maps[name]

    def dump(self) -> str:
        """Ordered (key, value) text lines, most-recent first, per map."""
        lines = []
        lines.append("[egressip]")
        for k, v in self.egressip.items():
            lines.append(f"{k} -> {v}")
        lines.append("[egress]")
        for k, v in self.egress.items():
            lines.append(f"{k} -> template={v.header_template.hex()} ifidx={v.host_ifidx}")
        lines.append("[ingress]")
        for k, v in self.ingress.items():
            lines.append(
                f"{k} -> veth={v.veth_ifidx} dmac={mac_str(v.dmac)} smac={mac_str(v.smac)}"
            )
        lines.append("[filter]")
        for k, v in self.filter.items():
            lines.append(f"{k} -> egress={int(v.egress_allowed)} ingress={int(v.ingress_allowed)}")
        lines.append("[devmap]")
        for idx in sorted(self.devmap):
            d = self.devmap[idx]
            lines.append(f"{idx} -> mac={mac_str(d.mac)} ip={d.ip}")
        return "\n".join(lines)


def whitelist_direction(filter_map: LruMap[FiveTuple, FilterAction], tup: FiveTuple, direction: str) -> bool:
    """Set one direction flag on the flow's filter entry, creating it if needed.

    Returns True when the map actually changed (entry created or flag
    newly set); repeating a direction is a no-op.
    """
    if direction not in (EGRESS, INGRESS):
        raise ValueError(f"unknown direction {direction!r}")
    fresh = FilterAction(
        egress_allowed=direction == EGRESS,
        ingress_allowed=direction == INGRESS,
    )
    if filter_map.put(tup, fresh, if_absent=True) is not PutResult.REJECTED:
        return True
    action = filter_map.get(tup)
    assert action is not None
    if direction == EGRESS:
        changed = not action.egress_allowed
        action.egress_allowed = True
    else:
        changed = not action.ingress_allowed
        action.ingress_allowed = True
    return changed


def is_fastpath_allowed(filter_map: LruMap[FiveTuple, FilterAction], tup: FiveTuple) -> bool:
    action = filter_map.get(tup)
    return action is not None and action.both
