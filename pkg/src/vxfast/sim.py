"""Deterministic multi-host simulation driver.

One scheduler owns a (tick, sequence) heap of events: scenario changes,
flow sends, wire arrivals and retransmit timers.  Propagation takes one
tick between hosts and zero within a host; same-tick events run in
scheduling order, so pre-scheduled scenario changes execute before packet
arrivals of that tick.  Reports are a pure function of (scenario, seed).
"""

from __future__ import annotations

import heapq
import json
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import coherency, fallback, fastpath, initpath, packet, rewrite
from .cache import EgressInfo, FilterAction
from .fastpath import PASS, REDIRECT, REDIRECT_PEER, ProgContext, Verdict
from .scenario import (
    MODE_FALLBACK_ONLY,
    MODE_FASTPATH,
    MODE_REWRITE,
    MODES,
    ONEWAY,
    RR,
    EventSpec,
    FlowSpec,
    Scenario,
    ScenarioError,
    parse_rule,
)
from .world import Cluster, Host, build_topology

STAGES = ("container_stack", "veth_pair", "ovs", "host_stack", "link")

FWD = "fwd"
REV = "rev"

_TAG = struct.Struct("!HIB")
MAX_TICKS = 5_000_000


@dataclass
class StageWeights:
    """Per-stage shares of CPU time for one overlay hop, in percent."""

    egress: dict[str, int]
    ingress: dict[str, int]

    def validate(self) -> None:
        for name, table in (("egress", self.egress), ("ingress", self.ingress)):
            if set(table) != set(STAGES):
                raise ValueError(f"{name} weights must cover exactly {STAGES}")
            if sum(table.values()) != 100:
                raise ValueError(f"{name} weights must sum to 100")


DEFAULT_STAGE_WEIGHTS = StageWeights(
    egress={"container_stack": 30, "veth_pair": 6, "ovs": 17, "host_stack": 24, "link": 23},
    ingress={"container_stack": 26, "veth_pair": 4, "ovs": 19, "host_stack": 21, "link": 30},
)


@dataclass
class FlowCounters:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    fastpath_egress: int = 0
    fastpath_ingress: int = 0
    fallback_egress: int = 0
    fallback_ingress: int = 0
    miss_marks_set: int = 0
    wire_bytes: int = 0

    @property
    def fastpath_hits(self) -> int:
        return self.fastpath_egress + self.fastpath_ingress

    @property
    def fallback_traversals(self) -> int:
        return self.fallback_egress + self.fallback_ingress


@dataclass
class Delivery:
    flow: str
    idx: int
    direction: str
    tick: int
    egress_fast: bool
    ingress_fast: Optional[bool]  # None for intra-host hops (no wire leg)
    frame: Optional[bytes] = None


@dataclass
class MetricsReport:
    """Counters and records of one run.

    Stage counts cover completed inter-host hops only: intra-host
    deliveries and dropped packets do not contribute to the cost model.
    """

    mode: str
    rpeer: bool
    seed: int
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    fastpath_hits: int = 0
    fallback_traversals: int = 0
    pipeline_entries: int = 0
    miss_marks_set: int = 0
    wire_bytes: int = 0
    egress_inits: int = 0
    ingress_inits: int = 0
    drops: dict[str, int] = field(default_factory=dict)
    stage_counts: dict[str, dict[str, int]] = field(
        default_factory=lambda: {
            "egress": {s: 0 for s in STAGES},
            "ingress": {s: 0 for s in STAGES},
        }
    )
    flows: dict[str, FlowCounters] = field(default_factory=dict)
    deliveries: list[Delivery] = field(default_factory=list)
    wire_frames: dict[tuple[str, str], list[bytes]] = field(default_factory=dict)
    delivered_frames: dict[tuple[str, str], list[bytes]] = field(default_factory=dict)
    events: list[tuple[int, str, str, str]] = field(default_factory=list)

    def drop(self, reason: str) -> None:
        self.drops[reason] = self.drops.get(reason, 0) + 1
        self.dropped += 1

    def conserved(self) -> bool:
        return self.sent == self.delivered + self.dropped

    def to_machine(self) -> str:
        doc = {
            "mode": self.mode,
            "rpeer": self.rpeer,
            "seed": self.seed,
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "fastpath_hits": self.fastpath_hits,
            "fallback_traversals": self.fallback_traversals,
            "miss_marks_set": self.miss_marks_set,
            "wire_bytes": self.wire_bytes,
            "egress_inits": self.egress_inits,
            "ingress_inits": self.ingress_inits,
            "drops": {k: self.drops[k] for k in sorted(self.drops)},
            "stages": {
                "egress": {s: self.stage_counts["egress"][s] for s in STAGES},
                "ingress": {s: self.stage_counts["ingress"][s] for s in STAGES},
            },
            "flows": {
                name: {
                    "sent": fc.sent,
                    "delivered": fc.delivered,
                    "dropped": fc.dropped,
                    "fastpath_hits": fc.fastpath_hits,
                    "fallback_traversals": fc.fallback_traversals,
                    "miss_marks_set": fc.miss_marks_set,
                    "wire_bytes": fc.wire_bytes,
                }
                for name, fc in self.flows.items()
            },
        }
        return json.dumps(doc)

    def to_text(self) -> str:
        lines = [
            f"mode={self.mode} rpeer={self.rpeer} seed={self.seed}",
            f"sent={self.sent} delivered={self.delivered} dropped={self.dropped}"
            f" conserved={self.conserved()}",
            f"fastpath_hits={self.fastpath_hits} fallback_traversals={self.fallback_traversals}"
            f" miss_marks={self.miss_marks_set}",
            f"wire_bytes={self.wire_bytes} egress_inits={self.egress_inits}"
            f" ingress_inits={self.ingress_inits}",
        ]
        if self.drops:
            lines.append("drops: " + " ".join(f"{k}={v}" for k, v in sorted(self.drops.items())))
        for direction in ("egress", "ingress"):
            counts = self.stage_counts[direction]
            lines.append(
                f"stages[{direction}]: " + " ".join(f"{s}={counts[s]}" for s in STAGES)
            )
        header = f"{'flow':<12}{'sent':>6}{'delivered':>10}{'dropped':>8}{'fast':>6}{'fallback':>9}"
        lines.append(header)
        for name, fc in self.flows.items():
            lines.append(
                f"{name:<12}{fc.sent:>6}{fc.delivered:>10}{fc.dropped:>8}"
                f"{fc.fastpath_hits:>6}{fc.fallback_traversals:>9}"
            )
        return "\n".join(lines)


@dataclass
class CostReport:
    egress_fallback_cost: int
    egress_fastpath_cost: int
    egress_reduction_pct: int
    ingress_fallback_cost: int
    ingress_fastpath_cost: int
    ingress_reduction_pct: int
    egress_modeled_total: int
    ingress_modeled_total: int
    flow_costs: dict[str, int]

    def to_text(self) -> str:
        return "\n".join(
            [
                f"egress: fallback={self.egress_fallback_cost} fastpath={self.egress_fastpath_cost}"
                f" reduction={self.egress_reduction_pct}%",
                f"ingress: fallback={self.ingress_fallback_cost} fastpath={self.ingress_fastpath_cost}"
                f" reduction={self.ingress_reduction_pct}%",
                f"modeled totals: egress={self.egress_modeled_total} ingress={self.ingress_modeled_total}",
            ]
        )


def fastpath_stage_sets(rpeer: bool) -> dict[str, tuple[str, ...]]:
    """Stages a fast-path hop still executes, by direction."""
    egress = ("container_stack", "link") if rpeer else ("container_stack", "veth_pair", "link")
    return {"egress": egress, "ingress": ("link", "container_stack")}


def cost_report(
    metrics: MetricsReport,
    weights: StageWeights = DEFAULT_STAGE_WEIGHTS,
    *,
    rpeer: Optional[bool] = None,
) -> CostReport:
    """Per-packet model costs and reductions from the stage weights."""
    weights.validate()
    if rpeer is None:
        rpeer = metrics.rpeer
    sets = fastpath_stage_sets(rpeer)
    egress_fast = sum(weights.egress[s] for s in sets["egress"])
    ingress_fast = sum(weights.ingress[s] for s in sets["ingress"])
    flow_costs = {
        name: fc.fallback_egress * 100
        + fc.fastpath_egress * egress_fast
        + fc.fallback_ingress * 100
        + fc.fastpath_ingress * ingress_fast
        for name, fc in metrics.flows.items()
    }
    return CostReport(
        egress_fallback_cost=100,
        egress_fastpath_cost=egress_fast,
        egress_reduction_pct=100 - egress_fast,
        ingress_fallback_cost=100,
        ingress_fastpath_cost=ingress_fast,
        ingress_reduction_pct=100 - ingress_fast,
        egress_modeled_total=sum(
            metrics.stage_counts["egress"][s] * weights.egress[s] for s in STAGES
        ),
        ingress_modeled_total=sum(
            metrics.stage_counts["ingress"][s] * weights.ingress[s] for s in STAGES
        ),
        flow_costs=flow_costs,
    )


def masked_wire(data: bytes) -> bytes:
    """Zero the per-packet fields two equivalent wire frames may differ in.

    Tunnel frames: outer IP identification and header checksum, the inner
    tos mark bits and the inner IP header checksum.  Non-tunnel frames get
    the delivery mask.
    """
    frame = packet.parse_frame(data)
    buf = bytearray(data)
    if frame.is_tunnel and frame.inner_ip is not None:
        buf[18:20] = b"\x00\x00"
        buf[24:26] = b"\x00\x00"
        inner = frame.inner_ip
        buf[inner + 1] &= ~packet.TOS_MARK_BITS & 0xFF
        buf[inner + 10 : inner + 12] = b"\x00\x00"
        return bytes(buf)
    return masked_delivery(data)


def masked_delivery(data: bytes, *, mask_ident: bool = False) -> bytes:
    """Delivery mask: tos mark bits and IP checksum, plus the
    identification field for rewriting-tunnel comparisons."""
    frame = packet.parse_frame(data)
    buf = bytearray(data)
    if frame.ip is not None:
        ip = frame.ip
        buf[ip + 1] &= ~packet.TOS_MARK_BITS & 0xFF
        buf[ip + 10 : ip + 12] = b"\x00\x00"
        if mask_ident:
            buf[ip + 4 : ip + 6] = b"\x00\x00"
    return bytes(buf)


def synthetic_template(index: int) -> EgressInfo:
    """A structurally valid egress entry used by cache-churn events."""
    hi, lo = (index >> 8) & 0xFF, index & 0xFF
    header = (
        packet.ethernet_header(b"\x02\xff" + bytes([hi, lo, 0, 1]), b"\x02\xff" + bytes([hi, lo, 0, 2]))
        + packet.ipv4_header(f"10.254.{hi}.{lo}", f"10.253.{hi}.{lo}", packet.PROTO_UDP, 30)
        + packet.udp_header(49152, packet.VXLAN_PORT, 22)
        + packet.vxlan_header(1)
        + packet.ethernet_header(bytes(6), bytes(6))
    )
    return EgressInfo(header_template=header, host_ifidx=0)


@dataclass
class _FlowRuntime:
    spec: FlowSpec
    number: int
    advanced: int = 0  # highest delivered packet index
    manual_next: int = 1
    aborted: bool = False
    attempts: dict[int, int] = field(default_factory=dict)
    ident: dict[str, int] = field(default_factory=lambda: {FWD: 0, REV: 0})

    def next_ident(self, direction: str) -> int:
        self.ident[direction] = self.ident[direction] % 0xFFFF + 1
        return self.ident[direction]


class Simulation:
    def __init__(
        self,
        scenario: Scenario,
        *,
        mode: str = MODE_FASTPATH,
        rpeer: bool = False,
        seed: int = 0,
        cache_capacity: Optional[int] = None,
        ct_timeout: Optional[int] = None,
        record_frames: bool = False,
    ):
        if mode not in MODES:
            raise ScenarioError(f"unknown mode {mode!r}")
        self.scenario = scenario
        self.mode = mode
        self.rpeer = rpeer
        self.seed = seed
        self.record_frames = record_frames
        self.cluster = build_topology(
            scenario,
            cache_capacity=cache_capacity,
            ct_timeout=ct_timeout,
            steady_marking=mode != MODE_FALLBACK_ONLY,
        )
        self.metrics = MetricsReport(mode=mode, rpeer=rpeer, seed=seed)
        self.now = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._flows = {
            f.name: _FlowRuntime(spec=f, number=i) for i, f in enumerate(scenario.flows)
        }
        for f in scenario.flows:
            self.metrics.flows[f.name] = FlowCounters()
        for spec in scenario.events:
            self._schedule_event(spec)
        for rt in self._flows.values():
            self._schedule_flow_start(rt)

    # -- scheduling ------------------------------------------------------

    def schedule(self, tick: int, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (tick, self._seq, fn))

    def _schedule_flow_start(self, rt: _FlowRuntime) -> None:
        spec = rt.spec
        if spec.start is None:
            return
        if spec.kind == RR:
            self.schedule(spec.start, lambda: self._send(rt, 1))
        else:
            for i in range(spec.packets):
                idx = i + 1
                self.schedule(
                    spec.start + i * spec.interval, lambda idx=idx: self._send(rt, idx)
                )

    def _schedule_event(self, spec: EventSpec) -> None:
        if spec.kind in ("add_filter", "remove_filter", "migrate", "underlay_change"):
            change = self._build_change(spec)
            spread = int(spec.opt("spread", "0") or 0)
            steps = coherency.change_steps(self.cluster, change)
            for k, (name, step) in enumerate(steps):
                self.schedule(
                    spec.tick + k * spread,
                    lambda name=name, step=step: self._run_change_step(name, step),
                )
        else:
            self.schedule(spec.tick, lambda: self._run_event(spec))

    def _build_change(self, spec: EventSpec) -> coherency.NetworkChange:
        hosts_opt = spec.opt("hosts")
        hosts = frozenset(hosts_opt.split(",")) if hosts_opt else None
        if spec.kind == "add_filter":
            extra = [f"{k}={v}" for k, v in spec.options if k in ("state", "dscp")]
            return coherency.AddFilter(rule=parse_rule(list(spec.args) + extra), hosts=hosts)
        if spec.kind == "remove_filter":
            return coherency.RemoveFilter(rule_id=spec.args[0], hosts=hosts)
        if spec.kind == "migrate":
            return coherency.MigrateContainer(
                container=spec.args[0], to_host=spec.args[1], hosts=hosts
            )
        if spec.kind == "underlay_change":
            new_mac = spec.opt("mac")
            return coherency.UnderlayChange(
                host=spec.args[0],
                new_ip=spec.opt("ip"),
                new_mac=packet.mac_bytes(new_mac) if new_mac else None,
                hosts=hosts,
            )
        raise ScenarioError(f"not a change event: {spec.kind}")

    def _run_change_step(self, name: str, step: Callable[[], None]) -> None:
        step()
        self.metrics.events.append((self.now, "*", "change_step", name))

    def _run_event(self, spec: EventSpec) -> None:
        kind = spec.kind
        if kind == "send":
            rt = self._flows[spec.args[0]]
            idx = rt.manual_next
            rt.manual_next += 2 if rt.spec.kind == RR else 1
            self._send(rt, idx)
        elif kind == "delete_container":
            coherency.delete_container(self.cluster, spec.args[0])
            self.metrics.events.append((self.now, "*", "delete_container", spec.args[0]))
        elif kind == "flush_cache_key":
            host = self.cluster.hosts[spec.args[0]]
            cache_name, key_text = spec.args[1], spec.args[2]
            key: object = key_text
            if cache_name == "filter":
                key = _parse_tuple_key(key_text)
            host.caches.lru_map(cache_name).delete(key)
            self.metrics.events.append((self.now, host.name, "flush", f"{cache_name}:{key_text}"))
        elif kind == "set_hold_on":
            host = self.cluster.hosts[spec.args[0]]
            coherency.set_hold_on(host, spec.args[1] in ("1", "on", "true"))
            self.metrics.events.append((self.now, host.name, "hold_on", spec.args[1]))
        elif kind == "cache_noise":
            self._cache_noise(spec)
        else:
            raise ScenarioError(f"unknown event kind {kind!r}")

    def _cache_noise(self, spec: EventSpec) -> None:
        host = self.cluster.hosts[spec.args[0]]
        op, base = spec.args[1], int(spec.args[2])
        count = int(spec.opt("count", "1") or 1)
        maps = (spec.opt("maps", "filter,egressip,egress") or "").split(",")
        for i in range(base, base + count):
            hi, lo = (i >> 8) & 0xFF, i & 0xFF
            entries: dict[str, tuple[object, Callable[[], object]]] = {
                "filter": (
                    packet.FiveTuple(f"198.18.{hi}.{lo}", f"198.19.{hi}.{lo}", 9, 9, 17),
                    lambda: FilterAction(True, True),
                ),
                "egressip": (f"198.18.{hi}.{lo}", lambda: f"10.254.{hi}.{lo}"),
                "egress": (f"10.254.{hi}.{lo}", lambda i=i: synthetic_template(i)),
            }
            for map_name in maps:
                if map_name not in entries:
                    raise ScenarioError(f"cache_noise cannot target {map_name!r}")
                key, make = entries[map_name]
                target = host.caches.lru_map(map_name)
                if op == "insert":
                    target.put(key, make())
                else:
                    target.delete(key)
        self.metrics.events.append((self.now, host.name, "cache_noise", f"{op}:{base}+{count}"))

    # -- packet machinery --------------------------------------------------

    def _payload(self, rt: _FlowRuntime, idx: int, direction: str) -> bytes:
        tag = _TAG.pack(rt.number & 0xFFFF, idx, 1 if direction == FWD else 0)
        filler_len = rt.spec.payload_size - len(tag)
        rng = random.Random(
            (self.seed * 1_000_003) ^ (rt.number * 7_919) ^ (idx * 104_729) ^ (direction == FWD)
        )
        return tag + bytes(rng.randrange(256) for _ in range(filler_len))

    def _build_frame(self, rt: _FlowRuntime, idx: int, direction: str) -> Optional[bytes]:
        spec = rt.spec
        src_name, dst_name = (spec.src, spec.dst) if direction == FWD else (spec.dst, spec.src)
        sender = self.cluster.containers[src_name]
        receiver = self.cluster.containers[dst_name]
        if not sender.alive:
            return None
        host = self.cluster.hosts[sender.host]
        payload = self._payload(rt, idx, direction)
        sport, dport = (
            (spec.src_port, spec.dst_port) if direction == FWD else (spec.dst_port, spec.src_port)
        )
        ident = rt.next_ident(direction)
        ip_kw = dict(ident=ident)
        if spec.protocol == packet.PROTO_TCP:
            ip_pkt = packet.build_tcp_packet(
                sender.ip, receiver.ip, sport, dport, payload, seq=idx, **ip_kw
            )
        elif spec.protocol == packet.PROTO_UDP:
            ip_pkt = packet.build_udp_packet(sender.ip, receiver.ip, sport, dport, payload, **ip_kw)
        else:
            ip_pkt = packet.build_icmp_echo(
                sender.ip,
                receiver.ip,
                payload,
                reply=direction == REV,
                ident=rt.number,
                seq=idx & 0xFFFF,
                **ip_kw,
            )
        # Containers address their gateway: the host's MAC.
        return packet.ethernet_header(host.mac, sender.mac) + ip_pkt

    def _send(self, rt: _FlowRuntime, idx: int) -> None:
        if rt.aborted or idx > rt.spec.packets:
            return
        self._transmit(rt, idx)

    def _transmit(self, rt: _FlowRuntime, idx: int) -> None:
        direction = FWD if (rt.spec.kind == ONEWAY or idx % 2 == 1) else REV
        raw = self._build_frame(rt, idx, direction)
        if raw is None:
            rt.aborted = True
            return
        self.metrics.sent += 1
        self.metrics.flows[rt.spec.name].sent += 1
        if rt.spec.kind == RR and rt.spec.rto > 0:
            self.schedule(self.now + rt.spec.rto, lambda: self._retransmit_check(rt, idx))
        sender = rt.spec.src if direction == FWD else rt.spec.dst
        self._egress(self.cluster.host_of(sender), raw, rt, idx, direction)

    def _retransmit_check(self, rt: _FlowRuntime, idx: int) -> None:
        if rt.aborted or rt.advanced >= idx:
            return
        attempt = rt.attempts.get(idx, 0) + 1
        rt.attempts[idx] = attempt
        if attempt > rt.spec.retries:
            rt.aborted = True
            return
        self._transmit(rt, idx)

    def _prog_context(self, host: Host, ingress_ifidx: Optional[int] = None) -> ProgContext:
        return ProgContext(
            caches=host.caches,
            hold_on=host.hold_on,
            rpeer_mode=self.rpeer,
            ingress_ifidx=ingress_ifidx,
            next_ip_id=host.next_fastpath_ip_id,
        )

    def _commit_stages(self, direction: str, stages: tuple[str, ...]) -> None:
        table = self.metrics.stage_counts[direction]
        for s in stages:
            table[s] += 1

    def _egress(self, host: Host, raw: bytes, rt: _FlowRuntime, idx: int, direction: str) -> None:
        m = self.metrics
        fc = m.flows[rt.spec.name]
        try:
            frame = packet.parse_frame(raw)
        except packet.PacketError:
            m.drop("malformed")
            fc.dropped += 1
            return
        m.pipeline_entries += 1

        if self.mode == MODE_FASTPATH:
            verdict = fastpath.egress_prog(frame, self._prog_context(host))
        elif self.mode == MODE_REWRITE:
            verdict = rewrite.rw_egress_prog(frame, self._prog_context(host), host.rw)
        else:
            verdict = Verdict(PASS, frame)
        if verdict.miss_marked:
            m.miss_marks_set += 1
            fc.miss_marks_set += 1

        if verdict.kind == REDIRECT:
            m.fastpath_hits += 1
            fc.fastpath_egress += 1
            self._commit_stages("egress", fastpath_stage_sets(self.rpeer)["egress"])
            wire = verdict.frame
            if self.mode == MODE_FASTPATH:
                out = initpath.egress_init_prog(wire, host.caches, host.fb.host_ifidx)
                self._log_init(host, "egress_init", out)
            self._emit(host, wire, rt, idx, direction, egress_fast=True)
            return

        m.fallback_traversals += 1
        fc.fallback_egress += 1
        outcome = fallback.fallback_egress(host.fb, verdict.frame, self.now)
        if outcome.kind == "drop":
            m.drop(outcome.drop_reason.value)
            fc.dropped += 1
            return
        if outcome.kind == "local":
            self._deliver(
                host, outcome.veth_ifidx, outcome.frame, rt, idx, direction,
                egress_fast=False, ingress_fast=None,
            )
            return
        self._commit_stages("egress", STAGES)
        wire = outcome.frame
        if self.mode == MODE_FASTPATH:
            out = initpath.egress_init_prog(wire, host.caches, host.fb.host_ifidx)
            self._log_init(host, "egress_init", out)
        elif self.mode == MODE_REWRITE:
            out = rewrite.rw_egress_init(wire, host.caches, host.rw, host.fb.host_ifidx)
            self._log_init(host, "egress_init", out)
        self._emit(host, wire, rt, idx, direction, egress_fast=False)

    def _log_init(self, host: Host, kind: str, out: initpath.InitOutcome) -> None:
        if out.writes:
            if kind == "egress_init":
                self.metrics.egress_inits += 1
            else:
                self.metrics.ingress_inits += 1
        for map_name, key in out.writes:
            self.metrics.events.append((self.now, host.name, kind, f"{map_name}:{key}"))

    def _emit(
        self,
        host: Host,
        frame: packet.ParsedFrame,
        rt: _FlowRuntime,
        idx: int,
        direction: str,
        *,
        egress_fast: bool,
    ) -> None:
        m = self.metrics
        fc = m.flows[rt.spec.name]
        data = frame.serialize()
        m.wire_bytes += len(data)
        fc.wire_bytes += len(data)
        if self.record_frames:
            m.wire_frames.setdefault((rt.spec.name, direction), []).append(data)
        target = self.cluster.host_by_wire(frame.dst_mac(), frame.dst_ip())
        if target is None:
            m.drop("underlay_lost")
            fc.dropped += 1
            return
        self.schedule(
            self.now + 1,
            lambda: self._ingress(target, data, target.ifidx, rt, idx, direction, egress_fast),
        )

    def _ingress(
        self,
        host: Host,
        data: bytes,
        ifidx: int,
        rt: _FlowRuntime,
        idx: int,
        direction: str,
        egress_fast: bool,
    ) -> None:
        m = self.metrics
        fc = m.flows[rt.spec.name]
        try:
            frame = packet.parse_frame(data)
        except packet.PacketError:
            m.drop("malformed")
            fc.dropped += 1
            return
        m.pipeline_entries += 1

        if self.mode == MODE_FASTPATH:
            verdict = fastpath.ingress_prog(frame, self._prog_context(host, ingress_ifidx=ifidx))
        elif self.mode == MODE_REWRITE:
            verdict = rewrite.rw_ingress_prog(
                frame, self._prog_context(host, ingress_ifidx=ifidx), host.rw
            )
        else:
            verdict = Verdict(PASS, frame)
        if verdict.miss_marked:
            m.miss_marks_set += 1
            fc.miss_marks_set += 1

        if verdict.kind == REDIRECT_PEER:
            m.fastpath_hits += 1
            fc.fastpath_ingress += 1
            self._commit_stages("ingress", fastpath_stage_sets(self.rpeer)["ingress"])
            self._deliver(
                host, verdict.target_ifidx, verdict.frame, rt, idx, direction,
                egress_fast=egress_fast, ingress_fast=True,
            )
            return

        m.fallback_traversals += 1
        fc.fallback_ingress += 1
        outcome = fallback.fallback_ingress(host.fb, verdict.frame, self.now)
        if outcome.kind == "drop":
            m.drop(outcome.drop_reason.value)
            fc.dropped += 1
            return
        self._commit_stages("ingress", STAGES)
        self._deliver(
            host, outcome.veth_ifidx, outcome.frame, rt, idx, direction,
            egress_fast=egress_fast, ingress_fast=False,
        )

    def _deliver(
        self,
        host: Host,
        veth_ifidx: int,
        frame: packet.ParsedFrame,
        rt: _FlowRuntime,
        idx: int,
        direction: str,
        *,
        egress_fast: bool,
        ingress_fast: Optional[bool],
    ) -> None:
        m = self.metrics
        fc = m.flows[rt.spec.name]
        container = self.cluster.container_at(host, veth_ifidx)
        if container is None:
            m.drop("dead_veth")
            fc.dropped += 1
            return
        # The container-side veth hook: init programs learn from delivered
        # frames and strip any residual marks before the app sees them.
        if self.mode == MODE_FASTPATH:
            out = initpath.ingress_init_prog(frame, host.caches)
            self._log_init(host, "ingress_init", out)
        elif self.mode == MODE_REWRITE:
            out = rewrite.rw_ingress_init(frame, host.caches, host.rw)
            self._log_init(host, "ingress_init", out)
        m.delivered += 1
        fc.delivered += 1
        data = frame.serialize()
        m.deliveries.append(
            Delivery(
                flow=rt.spec.name,
                idx=idx,
                direction=direction,
                tick=self.now,
                egress_fast=egress_fast,
                ingress_fast=ingress_fast,
                frame=data if self.record_frames else None,
            )
        )
        if self.record_frames:
            m.delivered_frames.setdefault((rt.spec.name, direction), []).append(data)
        if idx > rt.advanced:
            rt.advanced = idx
            if rt.spec.kind == RR and idx < rt.spec.packets:
                # Responses always chain; follow-up requests chain only for
                # self-driven flows (event-driven ones wait for send events).
                if rt.spec.start is not None or idx % 2 == 1:
                    self._send(rt, idx + 1)

    # -- driving -----------------------------------------------------------

    def run(self) -> MetricsReport:
        guard = 0
        while self._heap:
            tick, _, fn = heapq.heappop(self._heap)
            if tick < self.now:
                raise RuntimeError("scheduler moved backwards")
            self.now = tick
            fn()
            guard += 1
            if guard > MAX_TICKS:
                raise RuntimeError("simulation exceeded the event budget")
        return self.metrics


def _parse_tuple_key(text: str) -> packet.FiveTuple:
    # src:sport>dst:dport/proto
    left, rest = text.split(">", 1)
    right, proto = rest.split("/", 1)
    src_ip, sport = left.rsplit(":", 1)
    dst_ip, dport = right.rsplit(":", 1)
    return packet.FiveTuple(src_ip, dst_ip, int(sport), int(dport), int(proto))


def run_scenario(
    scenario: Scenario,
    seed: int = 0,
    *,
    mode: str = MODE_FASTPATH,
    rpeer: bool = False,
    cache_capacity: Optional[int] = None,
    ct_timeout: Optional[int] = None,
    record_frames: bool = False,
) -> MetricsReport:
    sim = Simulation(
        scenario,
        mode=mode,
        rpeer=rpeer,
        seed=seed,
        cache_capacity=cache_capacity,
        ct_timeout=ct_timeout,
        record_frames=record_frames,
    )
    return sim.run()
