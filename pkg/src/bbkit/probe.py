"""Probe ledger generation for full scans and rescans.

Nothing here touches a network. ``emit_probes`` only renders wire-format
probes into a pcap sink, and refuses targets outside the allowed lab
prefixes.
"""

from __future__ import annotations

import enum
import ipaddress
import random
import string
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence, Union

from .model import EPHEMERAL_PORT, ProbeProtocol, ProbeRecord, int_to_ip
from .pcap import encode_dns_message, icmp_message, ipv4_packet, tcp_segment, udp_datagram, write_raw_pcap

DAY_US = 86_400 * 1_000_000

DEFAULT_PROBE_SIZES = {
    ProbeProtocol.DNS: 70,
    ProbeProtocol.ICMP: 74,
    ProbeProtocol.NTP: 90,
    ProbeProtocol.TCP25: 60,
    ProbeProtocol.TCP80: 60,
    ProbeProtocol.TCP443: 60,
}
DEFAULT_ZONE = "scan.example"
DEFAULT_SCANNER_IP = "192.0.2.1"
NTP_CLIENT_BYTE = 0x23  # LI 0, version 4, mode 3 (client)
_QNAME_ALPHABET = string.ascii_lowercase + string.digits


class ConfigError(ValueError):
    pass


class ScanKind(str, enum.Enum):
    FULL = "FULL"
    RESCAN = "RESCAN"


@dataclass(frozen=True)
class FullSweep:
    """Every IPv4 address once, in a seeded pseudo-random order.

    The order is an affine bijection on 32-bit integers; ``limit`` caps how
    many addresses are produced.
    """

    limit: Optional[int] = None

    def addresses(self, seed: int) -> Iterator[str]:
        rng = random.Random(seed ^ 0x5EED)
        mult = rng.getrandbits(32) | 1
        offset = rng.getrandbits(32)
        count = 1 << 32 if self.limit is None else min(self.limit, 1 << 32)
        for k in range(count):
            yield int_to_ip((mult * k + offset) & 0xFFFFFFFF)


def default_rate(kind: ScanKind, protocol: ProbeProtocol) -> int:
    if kind is ScanKind.RESCAN:
        return 100
    return 100_000 if protocol is ProbeProtocol.ICMP else 40_000


@dataclass(frozen=True)
class ScanPlan:
    protocol: ProbeProtocol
    targets: Union[Sequence[str], FullSweep]
    rate_pps: Optional[float] = None  # fractional rates allowed; send times floor to whole µs
    kind: ScanKind = ScanKind.FULL
    seed: int = 0
    start_time: int = 0
    zone: str = DEFAULT_ZONE
    probe_size: Optional[int] = None
    # Draw ICMP ids and TCP sequence numbers without repeats (synthetic runs).
    collision_free: bool = False

    def __post_init__(self) -> None:
        if self.rate_pps is not None and self.rate_pps <= 0:
            raise ConfigError(f"rate_pps must be positive, got {self.rate_pps}")
        if self.kind is ScanKind.RESCAN and isinstance(self.targets, FullSweep):
            raise ConfigError("a rescan needs an explicit target list")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def rate(self) -> float:
        return self.rate_pps if self.rate_pps is not None else default_rate(self.kind, self.protocol)


class _TokenSource:
    def __init__(self, plan: ScanPlan) -> None:
        self.rng = random.Random(plan.seed)
        self.protocol = plan.protocol
        self.zone = plan.zone.strip(".").lower()
        self.unique = plan.collision_free
        self.used: set = set()

    def draw(self):
        rng = self.rng
        proto = self.protocol
        if proto is ProbeProtocol.NTP:
            return None
        if proto is ProbeProtocol.DNS:
            while True:
                label = "".join(rng.choices(_QNAME_ALPHABET, k=16))
                qname = f"{label}.{self.zone}"
                if qname not in self.used:
                    self.used.add(qname)
                    return qname
        if proto is ProbeProtocol.ICMP:
            if not self.unique:
                return rng.getrandbits(16)
            if len(self.used) >= 1 << 16:
                raise ConfigError("more than 65536 ICMP probes cannot have distinct echo ids")
            while True:
                token = rng.getrandbits(16)
                if token not in self.used:
                    self.used.add(token)
                    return token
        if not self.unique:
            return rng.getrandbits(32)
        # even sequence numbers only, so no seq is another's seq+1
        while True:
            token = rng.getrandbits(31) << 1
            if token not in self.used:
                self.used.add(token)
                return token


def generate_ledger(plan: ScanPlan) -> Iterator[ProbeRecord]:
    """Yield one probe per target, paced at the plan's rate, deterministic per seed."""
    rate = plan.rate
    tokens = _TokenSource(plan)
    size = plan.probe_size or DEFAULT_PROBE_SIZES[plan.protocol]
    if isinstance(plan.targets, FullSweep):
        targets: Iterable[str] = plan.targets.addresses(plan.seed)
    else:
        targets = plan.targets
    for k, target in enumerate(targets):
        yield ProbeRecord(
            send_time=plan.start_time + int((k * 1_000_000) // rate),
            target_ip=target,
            protocol=plan.protocol,
            token=tokens.draw(),
            probe_size=size,
        )


@dataclass(frozen=True)
class RescanSchedule:
    first_offset_days: int = 6
    inter_rescan_days: int = 3
    rounds: int = 6

    def __post_init__(self) -> None:
        if not 6 <= self.first_offset_days <= 9:
            raise ConfigError("first rescan must start 6 to 9 days after the full scan")
        if self.inter_rescan_days <= 0:
            raise ConfigError("inter_rescan_days must be positive")
        if self.rounds < 1:
            raise ConfigError("at least one rescan round is required")


def schedule_rescans(full_scan_end: int, schedule: RescanSchedule = RescanSchedule()) -> list[int]:
    first = full_scan_end + schedule.first_offset_days * DAY_US
    return [first + i * schedule.inter_rescan_days * DAY_US for i in range(schedule.rounds)]


# ----------------------------------------------------------------- emission


class EmissionRefused(PermissionError):
    pass


def build_probe_packet(probe: ProbeRecord, src_ip: str = DEFAULT_SCANNER_IP, query_type: int = 1) -> bytes:
    """Wire bytes of a probe: DNS query, echo request, TCP SYN or NTP client request."""
    proto = probe.protocol
    if proto is ProbeProtocol.DNS:
        msg = encode_dns_message(probe.token.encode(), response=False, qtype=query_type)
        return ipv4_packet(src_ip, probe.target_ip, 17, udp_datagram(EPHEMERAL_PORT, 53, msg))
    if proto is ProbeProtocol.ICMP:
        body = icmp_message(8, 0, struct.pack("!HH", probe.token, 0), bytes(max(0, probe.probe_size - 42)))
        return ipv4_packet(src_ip, probe.target_ip, 1, body)
    if proto is ProbeProtocol.NTP:
        msg = bytes([NTP_CLIENT_BYTE]) + bytes(47)
        return ipv4_packet(src_ip, probe.target_ip, 17, udp_datagram(EPHEMERAL_PORT, 123, msg))
    seg = tcp_segment(EPHEMERAL_PORT, proto.tcp_port, probe.token, 0, 0x02)
    return ipv4_packet(src_ip, probe.target_ip, 6, seg)


def emit_probes(
    probes: Iterable[ProbeRecord],
    allow_prefixes: Sequence[str],
    sink: BinaryIO,
    src_ip: str = DEFAULT_SCANNER_IP,
) -> int:
    """Render probes into a pcap sink. Every target must sit in an allowed prefix."""
    if not allow_prefixes:
        raise EmissionRefused("probe emission needs at least one allowed lab prefix")
    nets = [ipaddress.IPv4Network(p, strict=False) for p in allow_prefixes]
    probes = list(probes)
    for p in probes:
        addr = ipaddress.IPv4Address(p.target_ip)
        if not any(addr in net for net in nets):
            raise EmissionRefused(f"target {p.target_ip} is outside the allowed prefixes")
    return write_raw_pcap(((p.send_time, build_probe_packet(p, src_ip)) for p in probes), sink)
