"""Responder groups, response classes and per-round aggregates."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .model import (
    ICMP_ECHO_REPLY,
    ICMP_REDIRECT,
    ICMP_TIME_EXCEEDED,
    ICMP_UNREACHABLE,
    MatchedResponse,
    PacketRecord,
    ProbeProtocol,
    ProbeRecord,
    Transport,
    ip_key,
)

BLOWBACK_THRESHOLD = 4


class ResponseClass(str, enum.Enum):
    SILENT = "SILENT"
    SINGLE = "SINGLE"
    MULTIPACKET = "MULTIPACKET"
    BLOWBACK = "BLOWBACK"

    def __str__(self) -> str:
        return self.value


class PacketKind(str, enum.Enum):
    IN_PROTOCOL = "in_protocol"
    TTL_EXPIRED = "ttl_expired"
    REDIRECT = "redirect"
    UNREACHABLE = "unreachable"
    OTHER = "other"

    def __str__(self) -> str:
        return self.value


KIND_ORDER = tuple(PacketKind)
KIND_LABELS = {
    PacketKind.IN_PROTOCOL: "In-protocol",
    PacketKind.TTL_EXPIRED: "ICMP TTL Expired",
    PacketKind.REDIRECT: "ICMP Redirect",
    PacketKind.UNREACHABLE: "ICMP Unreachable",
    PacketKind.OTHER: "Other",
}


class DataError(ValueError):
    """Input data is internally inconsistent."""


def classify_count(packet_count: int, threshold: int = BLOWBACK_THRESHOLD) -> ResponseClass:
    if packet_count <= 0:
        return ResponseClass.SILENT
    if packet_count == 1:
        return ResponseClass.SINGLE
    if packet_count < threshold:
        return ResponseClass.MULTIPACKET
    return ResponseClass.BLOWBACK


def packet_kind(pkt: PacketRecord, probe: ProbeRecord) -> PacketKind:
    """Bucket a matched packet relative to the probe that triggered it."""
    proto = probe.protocol
    tr = pkt.transport
    if proto is ProbeProtocol.DNS:
        if (
            tr is Transport.UDP
            and pkt.src_port == 53
            and pkt.payload_text is not None
            and probe.token.encode() in pkt.payload_text.lower()
        ):
            return PacketKind.IN_PROTOCOL
    elif proto is ProbeProtocol.ICMP:
        if tr is Transport.ICMP and pkt.icmp_type == ICMP_ECHO_REPLY:
            return PacketKind.IN_PROTOCOL
    elif proto is ProbeProtocol.NTP:
        if tr is Transport.UDP and pkt.src_port == 123:
            return PacketKind.IN_PROTOCOL
    elif tr is Transport.TCP and pkt.src_port == proto.tcp_port:
        return PacketKind.IN_PROTOCOL
    if tr is Transport.ICMP:
        if pkt.icmp_type == ICMP_TIME_EXCEEDED and pkt.icmp_code == 0:
            return PacketKind.TTL_EXPIRED
        if pkt.icmp_type == ICMP_REDIRECT:
            return PacketKind.REDIRECT
        if pkt.icmp_type == ICMP_UNREACHABLE:
            return PacketKind.UNREACHABLE
    return PacketKind.OTHER


@dataclass(frozen=True)
class RoundRecord:
    round_id: int
    packet_count: int
    byte_count: int
    member_ips: frozenset[str]
    klass: ResponseClass
    kinds: Mapping[PacketKind, int] = field(default_factory=dict)


@dataclass
class GeneratorProfile:
    """One probed target and what it sent back, round by round."""

    generator_ip: str
    protocol: ProbeProtocol
    rounds: dict[int, RoundRecord] = field(default_factory=dict)

    def packets(self, round_id: int) -> int:
        rec = self.rounds.get(round_id)
        return rec.packet_count if rec else 0

    def record(self, round_id: int) -> Optional[RoundRecord]:
        return self.rounds.get(round_id)


def build_profiles(
    responses: Iterable[MatchedResponse],
    round_id: int,
    probes: Optional[Iterable[ProbeRecord]] = None,
    threshold: int = BLOWBACK_THRESHOLD,
    kinds: Optional[Mapping[str, Mapping[PacketKind, int]]] = None,
) -> list[GeneratorProfile]:
    """One profile per target with at least one matched packet.

    With ``probes``, every probed target gets a profile, silent ones
    included. A target probed twice in one round raises DataError.
    ``kinds`` supplies precomputed kind counts per target, for responses
    read back from a file where the packet headers are gone.
    """
    out: dict[tuple[str, ProbeProtocol], GeneratorProfile] = {}
    if probes is not None:
        for probe in probes:
            key = (probe.target_ip, probe.protocol)
            if key in out:
                raise DataError(f"target {probe.target_ip} probed twice in round {round_id}")
            out[key] = GeneratorProfile(
                probe.target_ip, probe.protocol,
                {round_id: RoundRecord(round_id, 0, 0, frozenset(), ResponseClass.SILENT, {})},
            )
    seen: set = set()
    for resp in responses:
        probe = resp.probe
        key = (probe.target_ip, probe.protocol)
        if key in seen:
            raise DataError(f"target {probe.target_ip} probed twice in round {round_id}")
        seen.add(key)
        if kinds is not None:
            kind_counts = dict(kinds.get(probe.target_ip, {}))
        else:
            kind_counts = dict(Counter(packet_kind(p, probe) for p, _ in resp.packets))
        n = resp.packet_count
        rec = RoundRecord(
            round_id=round_id,
            packet_count=n,
            byte_count=resp.byte_count,
            member_ips=frozenset(p.src_ip for p, _ in resp.packets),
            klass=classify_count(n, threshold),
            kinds=kind_counts,
        )
        out[key] = GeneratorProfile(probe.target_ip, probe.protocol, {round_id: rec})
    return sorted(out.values(), key=lambda g: (g.protocol.value, ip_key(g.generator_ip)))


def merge_profiles(parts: Iterable[GeneratorProfile]) -> list[GeneratorProfile]:
    """Fold single-round profiles into one profile per (target, protocol)."""
    merged: dict[tuple[str, ProbeProtocol], GeneratorProfile] = {}
    for prof in parts:
        key = (prof.generator_ip, prof.protocol)
        tgt = merged.setdefault(key, GeneratorProfile(prof.generator_ip, prof.protocol))
        for rid, rec in prof.rounds.items():
            if rid in tgt.rounds:
                raise DataError(f"round {rid} given twice for {prof.generator_ip}")
            tgt.rounds[rid] = rec
    return sorted(merged.values(), key=lambda g: (g.protocol.value, ip_key(g.generator_ip)))


# ---------------------------------------------------------------- summaries


def amplification(response: float, probe: float) -> Optional[float]:
    """response/probe, or None when nothing was sent."""
    if probe <= 0:
        return None
    return response / probe


@dataclass(frozen=True)
class ScanSummary:
    total_rggs: int
    multipacket_rggs: int
    blowback_rggs: int
    blowback_share_of_multipacket_traffic: Optional[float]
    probe_packets: int
    probe_bytes: int
    response_packets: int
    response_bytes: int

    @property
    def packet_amplification(self) -> Optional[float]:
        return amplification(self.response_packets, self.probe_packets)

    @property
    def volume_amplification(self) -> Optional[float]:
        return amplification(self.response_bytes, self.probe_bytes)


def summarize_scan(
    profiles: Iterable[GeneratorProfile],
    probe_packets: int,
    probe_bytes: int,
    round_id: int = 0,
    threshold: int = BLOWBACK_THRESHOLD,
) -> ScanSummary:
    """Round-level counts: responding generators, multipacket and blowback
    generators, traffic totals and amplification."""
    total = multi = blow = 0
    resp_pkts = resp_bytes = multi_pkts = blow_pkts = 0
    for prof in profiles:
        rec = prof.rounds.get(round_id)
        if rec is None or rec.packet_count == 0:
            continue
        n = rec.packet_count
        total += 1
        resp_pkts += n
        resp_bytes += rec.byte_count
        if n >= 2:
            multi += 1
            multi_pkts += n
        if n >= threshold:
            blow += 1
            blow_pkts += n
    return ScanSummary(
        total_rggs=total,
        multipacket_rggs=multi,
        blowback_rggs=blow,
        blowback_share_of_multipacket_traffic=blow_pkts / multi_pkts if multi_pkts else None,
        probe_packets=probe_packets,
        probe_bytes=probe_bytes,
        response_packets=resp_pkts,
        response_bytes=resp_bytes,
    )


def response_type_counts(responses: Iterable[MatchedResponse]) -> Counter:
    counts: Counter = Counter()
    for resp in responses:
        for pkt, _ in resp.packets:
            counts[packet_kind(pkt, resp.probe)] += 1
    return counts


def response_type_breakdown(counts: Mapping[PacketKind, int]) -> dict[PacketKind, float]:
    """Percentage of packets in each kind bucket; all zeros for empty input."""
    total = sum(counts.get(k, 0) for k in KIND_ORDER)
    if not total:
        return {k: 0.0 for k in KIND_ORDER}
    return {k: 100.0 * counts.get(k, 0) / total for k in KIND_ORDER}


def multipacket_type_counts(profiles: Iterable[GeneratorProfile], round_id: int = 0) -> Counter:
    """Kind counts over generators that sent two or more packets."""
    counts: Counter = Counter()
    for prof in profiles:
        rec = prof.rounds.get(round_id)
        if rec is not None and rec.packet_count >= 2:
            counts.update(rec.kinds)
    return counts


def format_share(value: float) -> str:
    return f"{value:.2f}%"


def format_factor(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{round(value):,}x"


def class_counts(profiles: Sequence[GeneratorProfile], round_id: int) -> Counter:
    return Counter(p.rounds[round_id].klass for p in profiles if round_id in p.rounds)
