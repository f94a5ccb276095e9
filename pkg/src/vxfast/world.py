"""Multi-host world model: per-host state and cluster-wide topology."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import initpath
from .cache import HostCaches
from .fallback import (
    DEFAULT_CT_TIMEOUT,
    ConntrackTable,
    FallbackState,
    FilterRule,
    LocalRoute,
    PeerConfig,
    RemoteRoute,
)
from .packet import mac_bytes
from .rewrite import RwState
from .scenario import Scenario, ScenarioError


@dataclass
class ContainerState:
    name: str
    ip: str
    mac: bytes
    host: str
    veth_host_ifidx: int
    veth_cont_ifidx: int
    alive: bool = True


@dataclass
class Host:
    name: str
    ip: str
    mac: bytes
    ifidx: int
    vni: int
    caches: HostCaches
    fb: FallbackState
    rw: RwState = field(default_factory=RwState)
    hold_on: bool = False
    _fastpath_ip_id: int = 0

    def next_fastpath_ip_id(self) -> int:
        self._fastpath_ip_id = self._fastpath_ip_id % 0xFFFF + 1
        return self._fastpath_ip_id


class Cluster:
    """All hosts and containers plus the full-mesh underlay view."""

    def __init__(self, hosts: dict[str, Host], containers: dict[str, ContainerState]):
        self.hosts = hosts
        self.containers = containers

    @property
    def container_by_ip(self) -> dict[str, ContainerState]:
        return {c.ip: c for c in self.containers.values()}

    def host_of(self, container_name: str) -> Host:
        return self.hosts[self.containers[container_name].host]

    def host_by_wire(self, dst_mac: bytes, dst_ip: str) -> Optional[Host]:
        """Underlay delivery: full mesh keyed by (dst MAC, dst IP)."""
        for host in self.hosts.values():
            if host.mac == dst_mac and host.ip == dst_ip:
                return host
        return None

    def container_at(self, host: Host, veth_ifidx: int) -> Optional[ContainerState]:
        for c in self.containers.values():
            if c.alive and c.host == host.name and c.veth_host_ifidx == veth_ifidx:
                return c
        return None

    def install_routes(self) -> None:
        """Recompute every host's route table from container placement."""
        for host in self.hosts.values():
            routes: dict[str, LocalRoute | RemoteRoute] = {}
            for c in self.containers.values():
                if not c.alive:
                    continue
                if c.host == host.name:
                    routes[c.ip] = LocalRoute(veth_ifidx=c.veth_host_ifidx, container_mac=c.mac)
                else:
                    routes[c.ip] = RemoteRoute(host_ip=self.hosts[c.host].ip)
            host.fb.routes = routes

    def install_peers(self) -> None:
        """Full-mesh tunnel config; the next hop is the peer host itself."""
        for host in self.hosts.values():
            host.fb.peers = {
                other.ip: PeerConfig(nexthop_mac=other.mac)
                for other in self.hosts.values()
                if other.name != host.name
            }

    def add_rule(self, rule: FilterRule) -> None:
        for host in self.hosts.values():
            host.fb.rules.append(rule)

    def remove_rule(self, rule_id: str) -> list[FilterRule]:
        removed = []
        for host in self.hosts.values():
            keep = [r for r in host.fb.rules if r.rule_id != rule_id]
            removed = [r for r in host.fb.rules if r.rule_id == rule_id] or removed
            host.fb.rules = keep
        return removed


def build_topology(
    scenario: Scenario,
    *,
    cache_capacity: Optional[int] = None,
    ct_timeout: Optional[int] = None,
    steady_marking: bool = True,
) -> Cluster:
    """Create hosts with registered interfaces, containers and routes."""
    scenario.validate()
    capacity = cache_capacity if cache_capacity is not None else scenario.cache_capacity
    timeout = ct_timeout if ct_timeout is not None else (scenario.ct_timeout or DEFAULT_CT_TIMEOUT)

    hosts: dict[str, Host] = {}
    for spec in scenario.hosts:
        caches = HostCaches.with_capacity(capacity)
        fb = FallbackState(
            host_ip=spec.ip,
            host_mac=mac_bytes(spec.mac),
            host_ifidx=spec.ifidx,
            vni=spec.vni,
            conntrack=ConntrackTable(timeout=timeout),
            rules=list(scenario.rules),
            steady_marking=steady_marking,
        )
        host = Host(
            name=spec.name,
            ip=spec.ip,
            mac=mac_bytes(spec.mac),
            ifidx=spec.ifidx,
            vni=spec.vni,
            caches=caches,
            fb=fb,
            rw=RwState.with_capacity(capacity),
        )
        initpath.register_host_interface(caches, spec.ifidx, host.mac, spec.ip)
        hosts[spec.name] = host

    containers: dict[str, ContainerState] = {}
    for cspec in scenario.containers:
        state = ContainerState(
            name=cspec.name,
            ip=cspec.ip,
            mac=mac_bytes(cspec.mac),
            host=cspec.host,
            veth_host_ifidx=cspec.veth_host_ifidx,
            veth_cont_ifidx=cspec.veth_cont_ifidx,
        )
        per_host = [c for c in containers.values() if c.host == cspec.host]
        if any(c.veth_host_ifidx == cspec.veth_host_ifidx for c in per_host):
            raise ScenarioError(
                f"duplicate veth index {cspec.veth_host_ifidx} on host {cspec.host}"
            )
        containers[cspec.name] = state
        initpath.register_container(hosts[cspec.host].caches, cspec.ip, cspec.veth_host_ifidx)

    cluster = Cluster(hosts, containers)
    cluster.install_routes()
    cluster.install_peers()
    return cluster
