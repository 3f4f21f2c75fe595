"""Synthetic campaigns with known ground truth.

A campaign is a full scan plus rescans per protocol. Each generator spec
fixes a timing profile (packets per second after the probe), a responder
group, a mix of packet kinds and per-round presence. Every emitted packet
carries the token or quotation that ties it to its own probe and to no
other; background noise is built so that no rule can match it.
"""

from __future__ import annotations

import ipaddress
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .analysis import TraceroutePath
from .classify import BLOWBACK_THRESHOLD, PacketKind, ResponseClass, RoundRecord, GeneratorProfile, classify_count
from .model import (
    EPHEMERAL_PORT,
    SYN,
    SYNACK,
    PacketRecord,
    ProbeProtocol,
    ProbeRecord,
    Transport,
    int_to_ip,
    ip_key,
    normalize_ip,
)
from .probe import (
    DEFAULT_SCANNER_IP,
    DEFAULT_ZONE,
    RescanSchedule,
    ScanKind,
    ScanPlan,
    generate_ledger,
    schedule_rescans,
)

SECOND = 1_000_000
DEFAULT_BASE_TIME = 1_608_000_000 * SECOND
NOISE_PREFIX = "198.18.0.0/15"


# ------------------------------------------------------------ timing shapes


@dataclass(frozen=True)
class Ramp:
    """``rate_step * (i + 1)`` packets in second ``i``."""

    rate_step: int
    duration: int

    def per_second(self) -> list[int]:
        return [self.rate_step * (i + 1) for i in range(self.duration)]


@dataclass(frozen=True)
class Pulse:
    """``rate`` pps for ``on_s`` seconds, then ``off_s`` silent seconds, repeated."""

    on_s: int
    off_s: int
    rate: int
    duration: int

    def per_second(self) -> list[int]:
        cycle = self.on_s + self.off_s
        return [self.rate if i % cycle < self.on_s else 0 for i in range(self.duration)]


@dataclass(frozen=True)
class Burst:
    """Bursts of given sizes; ``gaps`` are seconds between burst starts.

    Each burst is squeezed into the first ``spread`` fraction of its second.
    """

    burst_sizes: tuple[int, ...]
    gaps: tuple[int, ...] = ()
    spread: float = 1.0

    def __post_init__(self) -> None:
        if len(self.gaps) != max(0, len(self.burst_sizes) - 1):
            raise ValueError("Burst needs one gap between each pair of bursts")
        if any(g < 1 for g in self.gaps) or not 0 < self.spread <= 1:
            raise ValueError("Burst gaps must be >= 1 s and spread in (0, 1]")

    def per_second(self) -> list[int]:
        if not self.burst_sizes:
            return []
        starts = [0]
        for g in self.gaps:
            starts.append(starts[-1] + g)
        counts = [0] * (starts[-1] + 1)
        for s, n in zip(starts, self.burst_sizes):
            counts[s] += n
        return counts


@dataclass(frozen=True)
class Constant:
    rate: int
    duration: int

    def per_second(self) -> list[int]:
        return [self.rate] * self.duration


@dataclass(frozen=True)
class Single:
    def per_second(self) -> list[int]:
        return [1]


@dataclass(frozen=True)
class Silent:
    def per_second(self) -> list[int]:
        return []


Timing = Union[Ramp, Pulse, Burst, Constant, Single, Silent]
_TIMING_KINDS = {"ramp": Ramp, "pulse": Pulse, "burst": Burst, "constant": Constant, "single": Single, "silent": Silent}


def timing_from_dict(d: dict) -> Timing:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = _TIMING_KINDS.get(str(kind).lower())
    if cls is None:
        raise ValueError(f"unknown timing kind {kind!r}")
    if cls is Burst:
        d["burst_sizes"] = tuple(d.get("burst_sizes", ()))
        d["gaps"] = tuple(d.get("gaps", ()))
    return cls(**d)


# ------------------------------------------------------- generator specs


@dataclass(frozen=True)
class PacketMix:
    in_protocol: float = 1.0
    ttl_expired: float = 0.0
    redirect: float = 0.0
    unreachable: float = 0.0
    other: float = 0.0

    def __post_init__(self) -> None:
        shares = self.shares()
        if any(v < 0 for v in shares.values()) or not math.isclose(sum(shares.values()), 1.0, abs_tol=1e-9):
            raise ValueError("packet mix shares must be non-negative and sum to 1")

    def shares(self) -> dict[PacketKind, float]:
        return {k: getattr(self, k.value) for k in PacketKind}

    def apportion(self, n: int) -> dict[PacketKind, int]:
        """Split ``n`` packets by largest remainder, ties to the earlier kind."""
        shares = self.shares()
        exact = {k: n * s for k, s in shares.items()}
        counts = {k: int(math.floor(v)) for k, v in exact.items()}
        left = n - sum(counts.values())
        order = sorted(PacketKind, key=lambda k: (-(exact[k] - counts[k]), list(PacketKind).index(k)))
        for k in order[:left]:
            counts[k] += 1
        return counts


@dataclass(frozen=True)
class GeneratorSpec:
    ip: str
    protocol: ProbeProtocol
    timing: Timing
    rg_members: tuple[str, ...] = ()
    packet_mix: PacketMix = PacketMix()
    # Per-round scale on the profile (index 0 is the full scan); 0 is silent.
    churn: tuple[float, ...] = ()
    loop: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "ip", normalize_ip(self.ip))
        members = tuple(normalize_ip(m) for m in (self.rg_members or (self.ip,)))
        object.__setattr__(self, "rg_members", members)
        if any(c < 0 for c in self.churn):
            raise ValueError("churn scales must be non-negative")
        if (
            self.protocol is ProbeProtocol.NTP
            and self.packet_mix.in_protocol > 0
            and self.ip not in members
        ):
            # NTP answers only match by source address.
            raise ValueError(f"{self.ip}: NTP in-protocol packets need the generator in rg_members")

    def counts_for_round(self, round_id: int) -> list[int]:
        base = self.timing.per_second()
        scale = self.churn[round_id] if round_id < len(self.churn) else 1.0
        if scale == 1.0:
            return base
        return [int(math.floor(c * scale + 0.5)) for c in base]


def anecdote_preset() -> GeneratorSpec:
    """One TCP SYN to port 80 answered by >32K packets from three addresses in about 2.3 s."""
    return GeneratorSpec(
        ip="103.40.65.97",
        protocol=ProbeProtocol.TCP80,
        timing=Burst((14_000, 14_000, 4_400), (1, 1), spread=0.3),
        rg_members=("103.40.65.97", "103.57.177.61", "43.225.214.58"),
        packet_mix=PacketMix(in_protocol=0.75, ttl_expired=0.15, redirect=0.1),
    )


PRESETS = {"anecdote-103-40-65-97": anecdote_preset}


# --------------------------------------------------------------- campaign


@dataclass(frozen=True)
class SynthConfig:
    zone: str = DEFAULT_ZONE
    scanner_ip: str = DEFAULT_SCANNER_IP
    base_time: int = DEFAULT_BASE_TIME
    rtt_us: int = 20_000
    expiry_window: int = 600 * SECOND
    full_rate: Optional[float] = None
    rescan_rate: float = 100
    rescan_all: bool = False
    schedule_first_offset_days: int = 6
    schedule_inter_days: int = 3
    threshold: int = BLOWBACK_THRESHOLD


@dataclass
class Campaign:
    specs: list[GeneratorSpec]
    rounds: int
    ledgers: dict[tuple[ProbeProtocol, int], list[ProbeRecord]] = field(default_factory=dict)
    traces: dict[tuple[ProbeProtocol, int], list[PacketRecord]] = field(default_factory=dict)
    truth: dict[tuple[ProbeProtocol, int], dict[str, RoundRecord]] = field(default_factory=dict)
    noise: dict[tuple[ProbeProtocol, int], int] = field(default_factory=dict)
    round_starts: dict[tuple[ProbeProtocol, int], int] = field(default_factory=dict)

    @property
    def protocols(self) -> list[ProbeProtocol]:
        return sorted({p for p, _ in self.ledgers}, key=lambda p: list(ProbeProtocol).index(p))

    def truth_profiles(self, protocol: ProbeProtocol) -> list[GeneratorProfile]:
        out: dict[str, GeneratorProfile] = {}
        for (proto, rid), recs in sorted(self.truth.items(), key=lambda kv: kv[0][1]):
            if proto is not protocol:
                continue
            for ip, rec in recs.items():
                out.setdefault(ip, GeneratorProfile(ip, proto)).rounds[rid] = rec
        return sorted(out.values(), key=lambda g: ip_key(g.generator_ip))


def _offsets(count: int, span_us: int, rtt: int) -> list[int]:
    width = max(span_us - rtt, 1)
    return [rtt + (k * width) // count for k in range(count)]


class _PacketFactory:
    def __init__(self, probe: ProbeRecord, spec: GeneratorSpec, scanner_ip: str) -> None:
        self.probe = probe
        self.spec = spec
        self.dst = scanner_ip
        self.qname = probe.token.encode() if probe.protocol is ProbeProtocol.DNS else None

    def _icmp_error(self, t: int, src: str, itype: int, code: int) -> PacketRecord:
        q = self.qname
        size = 70 if q is None else 74 + len(q)
        return PacketRecord(
            t, src, self.dst, Transport.ICMP, size,
            icmp_type=itype, icmp_code=code,
            quoted_dst_ip=self.probe.target_ip, payload_text=q,
        )

    def make(self, kind: PacketKind, t: int, src: str, k: int) -> PacketRecord:
        probe = self.probe
        proto = probe.protocol
        if kind is PacketKind.IN_PROTOCOL:
            if proto is ProbeProtocol.DNS:
                q = self.qname.upper() if k % 3 == 2 else self.qname
                return PacketRecord(t, src, self.dst, Transport.UDP, 62 + len(q), 53, EPHEMERAL_PORT, payload_text=q)
            if proto is ProbeProtocol.ICMP:
                return PacketRecord(t, src, self.dst, Transport.ICMP, 74, icmp_type=0, icmp_code=0,
                                    icmp_echo_id=probe.token)
            if proto is ProbeProtocol.NTP:
                return PacketRecord(t, self.spec.ip, self.dst, Transport.UDP, 76, 123, EPHEMERAL_PORT)
            return PacketRecord(t, src, self.dst, Transport.TCP, 44, proto.tcp_port, EPHEMERAL_PORT,
                                tcp_flags=SYNACK, tcp_ack=(probe.token + 1) & 0xFFFFFFFF)
        if kind is PacketKind.TTL_EXPIRED:
            return self._icmp_error(t, src, 11, 0)
        if kind is PacketKind.REDIRECT:
            return self._icmp_error(t, src, 5, 1)
        if kind is PacketKind.UNREACHABLE:
            return self._icmp_error(t, src, 3, 1)
        return self._icmp_error(t, src, 12, 0)


def _respond(spec: GeneratorSpec, probe: ProbeRecord, round_id: int, seed: int, cfg: SynthConfig):
    counts = spec.counts_for_round(round_id)
    n = sum(counts)
    if n == 0:
        return [], {}
    _check_gaps(spec, counts, cfg)
    rng = random.Random(f"{seed}:{spec.protocol.value}:{spec.ip}:{round_id}")
    by_kind = spec.packet_mix.apportion(n)
    kinds = [k for k in PacketKind for _ in range(by_kind[k])]
    rng.shuffle(kinds)
    span = SECOND
    if isinstance(spec.timing, Burst):
        span = int(SECOND * spec.timing.spread)
    times = []
    for second, c in enumerate(counts):
        if c:
            base = probe.send_time + second * SECOND
            times.extend(base + off for off in _offsets(c, span, cfg.rtt_us))
    factory = _PacketFactory(probe, spec, cfg.scanner_ip)
    members = spec.rg_members
    packets = [factory.make(kind, t, members[k % len(members)], k) for k, (kind, t) in enumerate(zip(kinds, times))]
    return packets, dict((k, v) for k, v in by_kind.items() if v)


def _check_gaps(spec: GeneratorSpec, counts: list[int], cfg: SynthConfig) -> None:
    busy = [i for i, c in enumerate(counts) if c]
    worst = max((b - a for a, b in zip(busy, busy[1:])), default=0)
    if (worst + 1) * SECOND > cfg.expiry_window or cfg.rtt_us >= cfg.expiry_window:
        raise ValueError(f"{spec.ip}: silence of {worst} s would outlast the matcher's expiry window")


def _noise(start: int, end: int, pps: int, rng: random.Random, scanner_ip: str, avoid: set[str]) -> list[PacketRecord]:
    if pps <= 0 or end <= start:
        return []
    count = pps * math.ceil((end - start) / SECOND)
    net = ipaddress.IPv4Network(NOISE_PREFIX)
    base, span = int(net.network_address), net.num_addresses
    out = []
    for i in range(count):
        t = rng.randrange(start, end)
        src = int_to_ip(base + rng.randrange(span))
        while src in avoid:
            src = int_to_ip(base + rng.randrange(span))
        dport = rng.randrange(1024, 65535)
        if dport == EPHEMERAL_PORT:
            dport += 1
        sport = rng.randrange(1, 65535)
        which = i % 3
        if which == 0:
            pkt = PacketRecord(t, src, scanner_ip, Transport.UDP, 60 + rng.randrange(400), sport, dport)
        elif which == 1:
            pkt = PacketRecord(t, src, scanner_ip, Transport.TCP, 40, sport, dport, tcp_flags=SYN, tcp_ack=0)
        else:
            pkt = PacketRecord(t, src, scanner_ip, Transport.ICMP, 84, icmp_type=8, icmp_code=0,
                               icmp_echo_id=rng.randrange(65536))
        out.append(pkt)
    return out


def generate_campaign(
    specs: Sequence[GeneratorSpec],
    rounds: int = 6,
    noise_pps: int = 0,
    seed: int = 0,
    config: SynthConfig = SynthConfig(),
) -> Campaign:
    """Build ledgers, traces and ground truth for a full scan plus ``rounds`` rescans.

    Rescans probe only the generators that blew back in the full scan,
    unless ``config.rescan_all`` is set.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    seen: set = set()
    for s in specs:
        key = (s.ip, s.protocol)
        if key in seen:
            raise ValueError(f"duplicate generator {s.ip} for {s.protocol.value}")
        seen.add(key)
    camp = Campaign(list(specs), rounds)
    by_proto: dict[ProbeProtocol, list[GeneratorSpec]] = {}
    for s in specs:
        by_proto.setdefault(s.protocol, []).append(s)
    all_targets = {s.ip for s in specs} | {m for s in specs for m in s.rg_members}
    for proto in ProbeProtocol:
        group = by_proto.get(proto)
        if not group:
            continue
        pseed = _derive(seed, proto.value)
        start = config.base_time
        starts = [start]
        targets = group
        for rid in range(rounds + 1):
            if rid == 1:
                full_end = max(
                    [p.recv_time for p in camp.traces[(proto, 0)]] + [p.send_time for p in camp.ledgers[(proto, 0)]]
                )
                sched = RescanSchedule(config.schedule_first_offset_days, config.schedule_inter_days, rounds)
                starts.extend(schedule_rescans(full_end, sched))
                bbgs = {ip for ip, rec in camp.truth[(proto, 0)].items() if rec.klass is ResponseClass.BLOWBACK}
                targets = group if config.rescan_all else [s for s in group if s.ip in bbgs]
            plan = ScanPlan(
                protocol=proto,
                targets=[s.ip for s in targets],
                rate_pps=config.full_rate if rid == 0 else config.rescan_rate,
                kind=ScanKind.FULL if rid == 0 else ScanKind.RESCAN,
                seed=_derive(pseed, f"ledger{rid}"),
                start_time=starts[rid],
                zone=config.zone,
                collision_free=True,
            )
            ledger = list(generate_ledger(plan))
            packets: list[PacketRecord] = []
            truth: dict[str, RoundRecord] = {}
            for spec, probe in zip(targets, ledger):
                pkts, kinds = _respond(spec, probe, rid, pseed, config)
                packets.extend(pkts)
                n = len(pkts)
                truth[spec.ip] = RoundRecord(
                    round_id=rid,
                    packet_count=n,
                    byte_count=sum(p.size for p in pkts),
                    member_ips=frozenset(p.src_ip for p in pkts),
                    klass=classify_count(n, config.threshold),
                    kinds=kinds,
                )
            end = max([p.recv_time for p in packets] + [p.send_time + SECOND for p in ledger] + [starts[rid] + SECOND])
            noise = _noise(starts[rid], end, noise_pps, random.Random(_derive(pseed, f"noise{rid}")),
                           config.scanner_ip, all_targets)
            packets.extend(noise)
            packets.sort(key=lambda p: p.recv_time)
            key = (proto, rid)
            camp.ledgers[key] = ledger
            camp.traces[key] = packets
            camp.truth[key] = truth
            camp.noise[key] = len(noise)
            camp.round_starts[key] = starts[rid]
    return camp


def _derive(seed: int, label: str) -> int:
    return random.Random(f"{seed}/{label}").getrandbits(63)


# ------------------------------------------------------------ populations


_MIXES = (
    PacketMix(in_protocol=1.0),
    PacketMix(in_protocol=0.5, ttl_expired=0.3, redirect=0.2),
    PacketMix(in_protocol=0.0, ttl_expired=0.4, redirect=0.4, unreachable=0.2),
    PacketMix(in_protocol=0.2, ttl_expired=0.2, redirect=0.2, unreachable=0.2, other=0.2),
    PacketMix(in_protocol=0.0, unreachable=1.0),
)


def _random_timing(rng: random.Random) -> Timing:
    r = rng.random()
    if r < 0.15:
        return Silent()
    if r < 0.35:
        return Single()
    if r < 0.55:
        return Constant(rate=rng.choice((2, 3)), duration=1)
    if r < 0.56:
        return Constant(rate=rng.randint(20, 60), duration=rng.randint(5, 10))
    pick = rng.randrange(4)
    if pick == 0:
        return Constant(rate=rng.randint(1, 5), duration=rng.randint(2, 8))
    if pick == 1:
        return Ramp(rate_step=rng.randint(1, 3), duration=rng.randint(2, 5))
    if pick == 2:
        return Pulse(on_s=rng.randint(1, 2), off_s=rng.randint(1, 3), rate=rng.randint(2, 4), duration=rng.randint(4, 10))
    sizes = tuple(rng.randint(2, 6) for _ in range(rng.randint(2, 3)))
    return Burst(sizes, tuple(rng.randint(1, 5) for _ in sizes[1:]))


def random_population(
    count: int,
    protocol: ProbeProtocol,
    seed: int = 0,
    prefix: str = "10.0.0.0/8",
    rounds: int = 6,
    member_prefix: str = "172.16.0.0/12",
) -> list[GeneratorSpec]:
    """A mixed population: silent, single, multipacket and blowback generators,
    a heavy tail of prolific ones, random responder groups and churn."""
    rng = random.Random(_derive(seed, f"population/{protocol.value}/{prefix}"))
    net = ipaddress.IPv4Network(prefix)
    if count > net.num_addresses:
        raise ValueError("prefix too small for the population")
    base = int(net.network_address)
    ips = [int_to_ip(base + off) for off in rng.sample(range(net.num_addresses), count)]
    mnet = ipaddress.IPv4Network(member_prefix)
    mbase, mspan = int(mnet.network_address), mnet.num_addresses
    specs = []
    for ip in ips:
        timing = _random_timing(rng)
        others = [int_to_ip(mbase + rng.randrange(mspan)) for _ in range(rng.randint(0, 2))]
        mix = rng.choice(_MIXES)
        include_self = protocol is ProbeProtocol.NTP or rng.random() >= 0.2 or not others
        members = tuple(dict.fromkeys(([ip] if include_self else []) + others))
        churn = (1.0,) + tuple(rng.choice((1.0, 1.0, 1.0, 1.0, 0.5, 0.0)) for _ in range(rounds))
        specs.append(GeneratorSpec(ip, protocol, timing, members, mix, churn, loop=rng.random() < 0.4))
    return specs


def synth_traceroutes(specs: Iterable[GeneratorSpec], seed: int = 0) -> list[TraceroutePath]:
    """A path per spec; looping specs revisit one router three or more times."""
    paths = []
    for spec in specs:
        rng = random.Random(f"{seed}:trace:{spec.protocol.value}:{spec.ip}")
        routers = [f"100.{64 + rng.randrange(64)}.{rng.randrange(256)}.{rng.randrange(1, 255)}" for _ in range(30)]
        routers = list(dict.fromkeys(routers))
        length = rng.randint(6, 12)
        hops = []
        for ttl in range(1, length + 1):
            hops.append(None if rng.random() < 0.1 else routers[ttl % len(routers)])
        if spec.loop:
            a, b = routers[-1], routers[-2]
            for i in range(rng.randint(5, 10)):
                hops.append(a if i % 2 == 0 else b)
        else:
            if rng.random() < 0.3:
                hops.append(routers[length % len(routers)])
            hops.append(spec.ip)
        paths.append(TraceroutePath(spec.ip, tuple((i + 1, h) for i, h in enumerate(hops)), spec.protocol.value))
    return paths


# ------------------------------------------------------------ stress input


def stress_workload(
    probe_count: int = 100_000,
    packet_count: int = 10_000_000,
    seed: int = 0,
    unmatched_every: int = 4,
    scanner_ip: str = DEFAULT_SCANNER_IP,
) -> tuple[list[ProbeRecord], Iterable[PacketRecord]]:
    """A large mixed-protocol workload for throughput measurement.

    Probes go out 10 µs apart; packets follow one per µs after the last
    probe, cycling over the probes, with every ``unmatched_every``-th packet
    shaped as unmatched noise. The packet side is a lazy iterator, so memory
    stays flat however many packets are requested.
    """
    protos = list(ProbeProtocol)
    probes = []
    templates = []
    rng = random.Random(seed)
    used_ids: set = set()
    for i in range(probe_count):
        proto = protos[i % len(protos)]
        target = int_to_ip((10 << 24) | (i + 1))
        if proto is ProbeProtocol.DNS:
            token = f"{i:08x}{rng.getrandbits(32):08x}.{DEFAULT_ZONE}"
        elif proto is ProbeProtocol.ICMP:
            token = len(used_ids) & 0xFFFF
            used_ids.add(token)
        elif proto is ProbeProtocol.NTP:
            token = None
        else:
            token = (i * 2) & 0xFFFFFFFF
        probe = ProbeRecord(i * 10, target, proto, token, 60)
        probes.append(probe)
        fake = _PacketFactory(probe, GeneratorSpec(target, proto, Single()), scanner_ip)
        kind = PacketKind.IN_PROTOCOL if i % 3 else PacketKind.TTL_EXPIRED
        templates.append(tuple(fake.make(kind, 0, target, 0))[1:])
    noise = ("198.18.0.1", scanner_ip, Transport.UDP, 60, 4000, 4001, None, None, None, None, None, None, None)
    start = probe_count * 10
    n = len(templates)
    new = tuple.__new__

    def packets() -> Iterable[PacketRecord]:
        for j in range(packet_count):
            if j % unmatched_every == unmatched_every - 1:
                yield new(PacketRecord, (start + j,) + noise)
            else:
                yield new(PacketRecord, (start + j,) + templates[j % n])

    return probes, packets()


# ---------------------------------------------------------------- scenarios


@dataclass
class Scenario:
    specs: list[GeneratorSpec]
    config: SynthConfig = SynthConfig()
    rounds: int = 6
    noise_pps: int = 0
    seed: int = 0


def _spec_from_table(row: dict) -> GeneratorSpec:
    known = {"ip", "protocol", "timing", "rg_members", "mix", "churn", "loop"}
    extra = set(row) - known
    if extra:
        raise ValueError(f"unknown generator keys: {sorted(extra)}")
    mix = row.get("mix")
    if mix is not None:
        mix = {"in_protocol": 0.0, **mix}
    return GeneratorSpec(
        ip=row["ip"],
        protocol=ProbeProtocol(str(row["protocol"]).upper()),
        timing=timing_from_dict(row.get("timing", {"kind": "single"})),
        rg_members=tuple(row.get("rg_members", ())),
        packet_mix=PacketMix(**mix) if mix is not None else PacketMix(),
        churn=tuple(float(c) for c in row.get("churn", ())),
        loop=bool(row.get("loop", False)),
    )


def scenario_from_dict(doc: dict) -> Scenario:
    """Build a scenario from a parsed TOML document (schema in the README)."""
    camp = dict(doc.get("campaign", {}))
    rounds = int(camp.pop("rounds", 6))
    noise = int(camp.pop("noise_pps", 0))
    seed = int(camp.pop("seed", 0))
    cfg_fields = set(SynthConfig.__dataclass_fields__)
    unknown = set(camp) - cfg_fields
    if unknown:
        raise ValueError(f"unknown campaign keys: {sorted(unknown)}")
    config = SynthConfig(**camp)
    specs: list[GeneratorSpec] = []
    for row in doc.get("preset", []):
        name = row.get("name")
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
        specs.append(PRESETS[name]())
    for row in doc.get("population", []):
        specs.extend(
            random_population(
                int(row["count"]),
                ProbeProtocol(str(row["protocol"]).upper()),
                seed=int(row.get("seed", seed)),
                prefix=row.get("prefix", "10.0.0.0/8"),
                rounds=rounds,
                member_prefix=row.get("member_prefix", "172.16.0.0/12"),
            )
        )
    specs.extend(_spec_from_table(row) for row in doc.get("generator", []))
    return Scenario(specs, config, rounds, noise, seed)


def load_scenario(path) -> Scenario:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return scenario_from_dict(tomllib.load(fh))
