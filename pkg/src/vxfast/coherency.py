"""Sequencing network changes with cache updates via the hold-on flag.

Applying a change runs four steps: raise hold-on on the affected hosts
(suspending cache initialization by withholding miss marks), remove the
cache entries the change invalidates, mutate the fallback state, and drop
hold-on again.  The steps are exposed individually so a scheduler can
interleave packet processing between them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from . import initpath
from .fallback import FilterRule
from .scenario import ScenarioError
from .world import Cluster, Host


@dataclass(frozen=True)
class AddFilter:
    rule: FilterRule
    hosts: Optional[frozenset[str]] = None


@dataclass(frozen=True)
class RemoveFilter:
    rule_id: str
    hosts: Optional[frozenset[str]] = None


@dataclass(frozen=True)
class MigrateContainer:
    container: str
    to_host: str
    hosts: Optional[frozenset[str]] = None


@dataclass(frozen=True)
class UnderlayChange:
    host: str
    new_ip: Optional[str] = None
    new_mac: Optional[bytes] = None
    hosts: Optional[frozenset[str]] = None


NetworkChange = AddFilter | RemoveFilter | MigrateContainer | UnderlayChange


def set_hold_on(host: Host, flag: bool) -> None:
    host.hold_on = flag


def _filter_keys_matching(host: Host, rule: FilterRule) -> list:
    # A cached entry covers both directions of a flow, so a rule touching
    # either orientation invalidates it.
    return [
        tup
        for tup, _ in host.caches.filter.items()
        if rule.matches_flow(tup) or rule.matches_flow(tup.swapped())
    ]


def affected_keys(cluster: Cluster, change: NetworkChange) -> dict[str, dict[str, list]]:
    """Per-host map name -> keys that step (2) must remove."""
    out: dict[str, dict[str, list]] = {name: {} for name in cluster.hosts}

    if isinstance(change, (AddFilter, RemoveFilter)):
        if isinstance(change, AddFilter):
            rules = [change.rule]
        else:
            rules = [
                r
                for host in cluster.hosts.values()
                for r in host.fb.rules
                if r.rule_id == change.rule_id
            ]
        for name, host in cluster.hosts.items():
            keys: list = []
            for rule in rules:
                keys.extend(k for k in _filter_keys_matching(host, rule) if k not in keys)
            if keys:
                out[name]["filter"] = keys
        return out

    if isinstance(change, MigrateContainer):
        container = cluster.containers.get(change.container)
        if container is None:
            raise ScenarioError(f"unknown container {change.container!r}")
        if change.to_host not in cluster.hosts:
            raise ScenarioError(f"unknown host {change.to_host!r}")
        ip = container.ip
        endpoint_ips = {cluster.hosts[container.host].ip, cluster.hosts[change.to_host].ip}
        for name, host in cluster.hosts.items():
            per = out[name]
            if ip in host.caches.egressip:
                per.setdefault("egressip", []).append(ip)
            for hip in endpoint_ips:
                if hip in host.caches.egress:
                    per.setdefault("egress", []).append(hip)
            if name in (container.host, change.to_host) and ip in host.caches.ingress:
                per.setdefault("ingress", []).append(ip)
            if ip in host.rw.egress:
                per.setdefault("rw_egress", []).append(ip)
            stale = [k for k, v in host.rw.ingressip.items() if ip in v]
            if stale:
                per["rw_ingressip"] = stale
        return out

    if isinstance(change, UnderlayChange):
        peer = cluster.hosts.get(change.host)
        if peer is None:
            raise ScenarioError(f"unknown host {change.host!r}")
        peer_container_ips = {c.ip for c in cluster.containers.values() if c.host == peer.name}
        for name, host in cluster.hosts.items():
            per = out[name]
            if peer.ip in host.caches.egress:
                per.setdefault("egress", []).append(peer.ip)
            for cip in peer_container_ips:
                if cip in host.rw.egress:
                    per.setdefault("rw_egress", []).append(cip)
            stale = [k for k in host.rw.ingressip.keys() if k[1] == peer.ip]
            if stale:
                per["rw_ingressip"] = stale
        return out

    raise TypeError(f"unknown change {change!r}")


def _hold_hosts(cluster: Cluster, change: NetworkChange) -> list[Host]:
    # Default to the whole cluster: any host could otherwise initialize an
    # affected entry from pre-change state while the change is in flight.
    if change.hosts is not None:
        return [cluster.hosts[name] for name in sorted(change.hosts)]
    return [cluster.hosts[name] for name in sorted(cluster.hosts)]


def _remove_affected(cluster: Cluster, change: NetworkChange) -> None:
    for host_name, per_map in affected_keys(cluster, change).items():
        host = cluster.hosts[host_name]
        for map_name, keys in per_map.items():
            if map_name.startswith("rw_"):
                target = host.rw.egress if map_name == "rw_egress" else host.rw.ingressip
            else:
                target = host.caches.lru_map(map_name)
            for key in keys:
                target.delete(key)


def _mutate_network(cluster: Cluster, change: NetworkChange) -> None:
    if isinstance(change, AddFilter):
        cluster.add_rule(change.rule)
    elif isinstance(change, RemoveFilter):
        cluster.remove_rule(change.rule_id)
    elif isinstance(change, MigrateContainer):
        container = cluster.containers[change.container]
        for other in cluster.containers.values():
            if (
                other is not container
                and other.alive
                and other.host == change.to_host
                and other.veth_host_ifidx == container.veth_host_ifidx
            ):
                raise ScenarioError(
                    f"veth index {container.veth_host_ifidx} already used on {change.to_host}"
                )
        container.host = change.to_host
        new_host = cluster.hosts[change.to_host]
        initpath.register_container(
            new_host.caches, container.ip, container.veth_host_ifidx, allow_existing=True
        )
        cluster.install_routes()
    elif isinstance(change, UnderlayChange):
        host = cluster.hosts[change.host]
        if change.new_ip is not None:
            host.ip = change.new_ip
            host.fb.host_ip = change.new_ip
        if change.new_mac is not None:
            host.mac = change.new_mac
            host.fb.host_mac = change.new_mac
        host.caches.devmap.clear()
        initpath.register_host_interface(host.caches, host.ifidx, host.mac, host.ip)
        cluster.install_routes()
        cluster.install_peers()


def change_steps(cluster: Cluster, change: NetworkChange) -> list[tuple[str, Callable[[], None]]]:
    """The four schedulable steps, in order."""
    hold = _hold_hosts(cluster, change)

    def step1() -> None:
        for host in hold:
            set_hold_on(host, True)

    def step2() -> None:
        _remove_affected(cluster, change)

    def step3() -> None:
        _mutate_network(cluster, change)

    def step4() -> None:
        for host in hold:
            set_hold_on(host, False)

    return [("hold_on", step1), ("flush", step2), ("apply", step3), ("release", step4)]


def apply_change(cluster: Cluster, change: NetworkChange) -> None:
    """Run the four steps back to back (atomic w.r.t. packet events)."""
    for _, step in change_steps(cluster, change):
        step()


def delete_container(cluster: Cluster, name_or_ip: str) -> None:
    """Tear down routing and registration; caches age out on their own."""
    container = cluster.containers.get(name_or_ip)
    if container is None:
        container = next(
            (c for c in cluster.containers.values() if c.ip == name_or_ip), None
        )
    if container is None:
        raise ScenarioError(f"unknown container {name_or_ip!r}")
    container.alive = False
    cluster.install_routes()
