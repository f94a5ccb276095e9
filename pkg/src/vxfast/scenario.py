"""Scenario model and the line-oriented scenario file format.

A scenario file has four sections introduced by bracketed headers; fields
are whitespace-separated, ``#`` starts a comment, ticks are integers.

    [hosts]       name ip mac ifidx vni
    [containers]  name host ip mac veth_host_ifidx veth_cont_ifidx
    [rules]       id priority allow|deny src dst sport dport proto [k=v...]
    [flows]       name src dst proto sport dport packets payload kind [k=v...]
    [events]      tick kind args... [k=v...]

``*`` is a wildcard in rule fields.  Flow ``kind`` is ``rr`` (alternating
request/response driven by deliveries) or ``oneway``.  Flow options:
``start=`` first tick (omit for event-driven flows), ``interval=`` spacing
for oneway flows, ``rto=`` retransmit timeout, ``retries=`` retransmit
budget.  Event kinds: send, add_filter, remove_filter, migrate,
delete_container, flush_cache_key, set_hold_on, cache_noise,
underlay_change.  Changes accept ``spread=`` (ticks between the four
coherency steps) and ``hosts=`` (comma list restricting the hold-on set).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .fallback import Action, CtState, FilterRule
from .packet import PROTO_ICMP, PROTO_TCP, PROTO_UDP

MODE_FASTPATH = "fastpath"
MODE_FALLBACK_ONLY = "fallback-only"
MODE_REWRITE = "rewrite-tunnel"
MODES = (MODE_FASTPATH, MODE_FALLBACK_ONLY, MODE_REWRITE)

PROTO_NAMES = {"tcp": PROTO_TCP, "udp": PROTO_UDP, "icmp": PROTO_ICMP}

ONEWAY = "oneway"
RR = "rr"


class ScenarioError(Exception):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class HostSpec:
    name: str
    ip: str
    mac: str
    ifidx: int
    vni: int


@dataclass(frozen=True)
class ContainerSpec:
    name: str
    host: str
    ip: str
    mac: str
    veth_host_ifidx: int
    veth_cont_ifidx: int


@dataclass(frozen=True)
class FlowSpec:
    name: str
    src: str
    dst: str
    protocol: int
    src_port: int
    dst_port: int
    packets: int
    payload_size: int
    kind: str = RR
    start: Optional[int] = None
    interval: int = 1
    rto: int = 0
    retries: int = 8


@dataclass(frozen=True)
class EventSpec:
    tick: int
    kind: str
    args: tuple[str, ...] = ()
    options: tuple[tuple[str, str], ...] = ()

    def opt(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.options:
            if k == key:
                return v
        return default


@dataclass
class Scenario:
    hosts: list[HostSpec] = field(default_factory=list)
    containers: list[ContainerSpec] = field(default_factory=list)
    rules: list[FilterRule] = field(default_factory=list)
    flows: list[FlowSpec] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)
    cache_capacity: Optional[int] = None
    ct_timeout: Optional[int] = None

    def flow(self, name: str) -> FlowSpec:
        for f in self.flows:
            if f.name == name:
                return f
        raise ScenarioError(f"unknown flow {name!r}")

    def validate(self) -> None:
        host_names = set()
        host_ips = set()
        for h in self.hosts:
            if h.name in host_names:
                raise ScenarioError(f"duplicate host name {h.name!r}")
            if h.ip in host_ips:
                raise ScenarioError(f"duplicate host IP {h.ip}")
            host_names.add(h.name)
            host_ips.add(h.ip)
        container_names = set()
        container_ips = set()
        for c in self.containers:
            if c.name in container_names:
                raise ScenarioError(f"duplicate container name {c.name!r}")
            if c.ip in container_ips:
                raise ScenarioError(f"duplicate container IP {c.ip}")
            if c.ip in host_ips:
                raise ScenarioError(f"container IP {c.ip} collides with a host IP")
            if c.host not in host_names:
                raise ScenarioError(f"container {c.name!r} references unknown host {c.host!r}")
            container_names.add(c.name)
            container_ips.add(c.ip)
        flow_names = set()
        for f in self.flows:
            if f.name in flow_names:
                raise ScenarioError(f"duplicate flow name {f.name!r}")
            flow_names.add(f.name)
            if f.src not in container_names or f.dst not in container_names:
                raise ScenarioError(f"flow {f.name!r} references unknown containers")
            if f.kind not in (ONEWAY, RR):
                raise ScenarioError(f"flow {f.name!r} has unknown kind {f.kind!r}")
            if f.packets < 1:
                raise ScenarioError(f"flow {f.name!r} needs at least one packet")
            if f.payload_size < 8:
                raise ScenarioError(f"flow {f.name!r}: payload must be >= 8 bytes (tag space)")
        for e in self.events:
            if e.kind == "send":
                flow = self.flow(e.args[0])
                if flow.start is not None:
                    raise ScenarioError(
                        f"send event for flow {flow.name!r} which already auto-starts"
                    )


def parse_proto(token: str, line: Optional[int] = None) -> int:
    if token in PROTO_NAMES:
        return PROTO_NAMES[token]
    try:
        return int(token)
    except ValueError:
        raise ScenarioError(f"unknown protocol {token!r}", line) from None


def _wild(token: str) -> Optional[str]:
    return None if token == "*" else token


def _wild_int(token: str) -> Optional[int]:
    return None if token == "*" else int(token)


def parse_rule(tokens: list[str], line: Optional[int] = None) -> FilterRule:
    if len(tokens) < 8:
        raise ScenarioError("rule needs: id priority allow|deny src dst sport dport proto", line)
    rule_id, prio, action = tokens[0], int(tokens[1]), tokens[2].lower()
    if action not in ("allow", "deny"):
        raise ScenarioError(f"unknown rule action {action!r}", line)
    opts = dict(_parse_options(tokens[8:], line))
    state_gate = None
    if "state" in opts:
        try:
            state_gate = CtState[opts["state"].upper()]
        except KeyError:
            raise ScenarioError(f"unknown conntrack state {opts['state']!r}", line) from None
    proto = None if tokens[7] == "*" else parse_proto(tokens[7], line)
    return FilterRule(
        rule_id=rule_id,
        priority=prio,
        action=Action.ALLOW if action == "allow" else Action.DENY,
        src_ip=_wild(tokens[3]),
        dst_ip=_wild(tokens[4]),
        src_port=_wild_int(tokens[5]),
        dst_port=_wild_int(tokens[6]),
        protocol=proto,
        dscp=int(opts["dscp"]) if "dscp" in opts else None,
        state_gate=state_gate,
    )


def _parse_options(tokens: list[str], line: Optional[int] = None) -> list[tuple[str, str]]:
    out = []
    for tok in tokens:
        if "=" not in tok:
            raise ScenarioError(f"expected key=value, got {tok!r}", line)
        k, v = tok.split("=", 1)
        out.append((k, v))
    return out


_EVENT_ARITY = {
    "send": 1,
    "add_filter": 8,
    "remove_filter": 1,
    "migrate": 2,
    "delete_container": 1,
    "flush_cache_key": 3,
    "set_hold_on": 2,
    "cache_noise": 3,
    "underlay_change": 1,
}


def parse_scenario(text: str) -> Scenario:
    scenario = Scenario()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].lower()
            if section not in ("hosts", "containers", "rules", "flows", "events", "options"):
                raise ScenarioError(f"unknown section {section!r}", lineno)
            continue
        tokens = stripped.split()
        try:
            if section == "hosts":
                scenario.hosts.append(
                    HostSpec(tokens[0], tokens[1], tokens[2], int(tokens[3]), int(tokens[4]))
                )
            elif section == "containers":
                scenario.containers.append(
                    ContainerSpec(
                        tokens[0], tokens[1], tokens[2], tokens[3], int(tokens[4]), int(tokens[5])
                    )
                )
            elif section == "rules":
                scenario.rules.append(parse_rule(tokens, lineno))
            elif section == "flows":
                opts = dict(_parse_options(tokens[9:], lineno))
                scenario.flows.append(
                    FlowSpec(
                        name=tokens[0],
                        src=tokens[1],
                        dst=tokens[2],
                        protocol=parse_proto(tokens[3], lineno),
                        src_port=int(tokens[4]),
                        dst_port=int(tokens[5]),
                        packets=int(tokens[6]),
                        payload_size=int(tokens[7]),
                        kind=tokens[8],
                        start=int(opts["start"]) if "start" in opts else None,
                        interval=int(opts.get("interval", "1")),
                        rto=int(opts.get("rto", "0")),
                        retries=int(opts.get("retries", "8")),
                    )
                )
            elif section == "events":
                tick, kind = int(tokens[0]), tokens[1]
                if kind not in _EVENT_ARITY:
                    raise ScenarioError(f"unknown event kind {kind!r}", lineno)
                arity = _EVENT_ARITY[kind]
                args = tuple(tokens[2 : 2 + arity])
                if len(args) < arity:
                    raise ScenarioError(f"event {kind} needs {arity} arguments", lineno)
                options = tuple(_parse_options(tokens[2 + arity :], lineno))
                scenario.events.append(EventSpec(tick, kind, args, options))
            elif section == "options":
                for k, v in _parse_options(tokens, lineno):
                    if k == "cache_capacity":
                        scenario.cache_capacity = int(v)
                    elif k == "ct_timeout":
                        scenario.ct_timeout = int(v)
                    else:
                        raise ScenarioError(f"unknown option {k!r}", lineno)
            else:
                raise ScenarioError("data before any section header", lineno)
        except ScenarioError:
            raise
        except (IndexError, ValueError) as exc:
            raise ScenarioError(f"malformed line: {exc}", lineno) from None
    scenario.validate()
    return scenario


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_scenario(fh.read())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path!r}: {exc}") from None
