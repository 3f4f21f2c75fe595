"""Cross-round analytics over generator profiles and traceroute paths."""

from __future__ import annotations

import ipaddress
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional, Sequence

from .classify import BLOWBACK_THRESHOLD, DataError, GeneratorProfile
from .model import FormatError, MatchedResponse, ip_key, normalize_ip

log = logging.getLogger(__name__)

UNKNOWN = "unknown"


# ---------------------------------------------------------------- stability


@dataclass(frozen=True)
class RoundPrevalence:
    round_id: int
    blowback: float
    active: float


@dataclass(frozen=True)
class StabilityReport:
    bbg_count: int
    rounds: tuple[RoundPrevalence, ...]
    blowback_churn: bool
    active_churn: bool

    @property
    def blowback_range(self) -> tuple[float, float]:
        vals = [r.blowback for r in self.rounds]
        return min(vals), max(vals)

    @property
    def active_range(self) -> tuple[float, float]:
        vals = [r.active for r in self.rounds]
        return min(vals), max(vals)

    @property
    def first_round(self) -> RoundPrevalence:
        return self.rounds[0]


def _rises(values: Sequence[float]) -> bool:
    best = None
    for v in values:
        if best is not None and v > best:
            return True
        best = v if best is None else min(best, v)
    return False


def stability(
    full_scan_bbgs: Iterable[str],
    round_counts: Mapping[int, Mapping[str, int]],
    threshold: int = BLOWBACK_THRESHOLD,
) -> StabilityReport:
    """Fraction of full-scan blowback generators still blowing back, and
    still answering at all, in each rescan.

    ``round_counts`` maps round id to packets per generator address; absent
    generators count as silent. A churn flag is raised when some round's
    fraction exceeds that of an earlier round.
    """
    bbgs = set(full_scan_bbgs)
    if not bbgs:
        raise DataError("stability needs a non-empty set of blowback generators")
    n = len(bbgs)
    rows = []
    for rid in sorted(round_counts):
        counts = round_counts[rid]
        blow = sum(1 for ip in bbgs if counts.get(ip, 0) >= threshold)
        active = sum(1 for ip in bbgs if counts.get(ip, 0) >= 1)
        rows.append(RoundPrevalence(rid, blow / n, active / n))
    if not rows:
        raise DataError("stability needs at least one rescan round")
    return StabilityReport(
        bbg_count=n,
        rounds=tuple(rows),
        blowback_churn=_rises([r.blowback for r in rows]),
        active_churn=_rises([r.active for r in rows]),
    )


def round_counts_from_profiles(profiles: Iterable[GeneratorProfile]) -> dict[int, dict[str, int]]:
    out: dict[int, dict[str, int]] = defaultdict(dict)
    for prof in profiles:
        for rid, rec in prof.rounds.items():
            out[rid][prof.generator_ip] = rec.packet_count
    return dict(out)


# ------------------------------------------------------------ concentration


@dataclass(frozen=True)
class ConcentrationCurves:
    ranked_ips: tuple[str, ...]
    curves: Mapping[int, tuple[int, ...]]

    def total(self, round_id: int) -> int:
        curve = self.curves[round_id]
        return curve[-1] if curve else 0

    def rank_reaching(self, round_id: int, fraction: float) -> Optional[int]:
        """Smallest rank whose cumulative count reaches ``fraction`` of the round total."""
        curve = self.curves[round_id]
        goal = fraction * self.total(round_id)
        for rank, value in enumerate(curve, 1):
            if value >= goal:
                return rank
        return None


def persistent_generators(profiles: Iterable[GeneratorProfile], rounds: Sequence[int]) -> list[GeneratorProfile]:
    return [p for p in profiles if all(p.packets(r) >= 1 for r in rounds)]


def activity_concentration(
    profiles: Iterable[GeneratorProfile],
    rank_round: int = 0,
    rounds: Optional[Sequence[int]] = None,
    persistent_only: bool = True,
) -> ConcentrationCurves:
    """Cumulative packets of the top-X generators, ranked by ``rank_round``.

    With ``persistent_only`` the population is cut to generators that
    answered in every round other than ``rank_round``.
    """
    profiles = list(profiles)
    if rounds is None:
        rounds = sorted({rid for p in profiles for rid in p.rounds} | {rank_round})
    if persistent_only:
        others = [r for r in rounds if r != rank_round]
        profiles = persistent_generators(profiles, others)
    ranked = sorted(profiles, key=lambda p: (-p.packets(rank_round), ip_key(p.generator_ip)))
    curves = {}
    for rid in rounds:
        running = 0
        cum = []
        for p in ranked:
            running += p.packets(rid)
            cum.append(running)
        curves[rid] = tuple(cum)
    return ConcentrationCurves(tuple(p.generator_ip for p in ranked), curves)


# ------------------------------------------------------------ prefix tables


class PrefixDataset:
    """Longest-prefix-match table from IPv4 prefixes to ASN or country values.

    Lookups probe one hash table per distinct prefix length, longest first.
    """

    def __init__(self, entries: Iterable[tuple[str, str]] = ()) -> None:
        self._tables: dict[int, dict[int, str]] = {}
        self._lengths: list[int] = []
        for cidr, value in entries:
            self.add(cidr, value)

    def add(self, cidr: str, value: str) -> None:
        if ":" in cidr:
            raise FormatError(f"IPv6 prefix {cidr!r} is not supported")
        net = ipaddress.IPv4Network(cidr.strip(), strict=False)
        plen = net.prefixlen
        table = self._tables.get(plen)
        if table is None:
            table = self._tables[plen] = {}
            self._lengths = sorted(self._tables, reverse=True)
        table[int(net.network_address)] = value.strip()

    def __len__(self) -> int:
        return sum(len(t) for t in self._tables.values())

    def lookup(self, ip: str) -> str:
        addr = ip_key(ip)
        for plen in self._lengths:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
            value = self._tables[plen].get(addr & mask)
            if value is not None:
                return value
        return UNKNOWN

    def entries(self) -> list[tuple[int, int, str]]:
        """(network, prefixlen, value) sorted by network then length."""
        out = [(net, plen, v) for plen, t in self._tables.items() for net, v in t.items()]
        out.sort(key=lambda e: (e[0], e[1]))
        return out

    def address_counts(self) -> Counter:
        """Addresses owned by each value under longest-prefix semantics.

        A nested prefix takes its addresses away from the enclosing one.
        """
        owned: Counter = Counter()
        stack: list[tuple[int, int, str]] = []  # (end, plen, value)
        for net, plen, value in self.entries():
            size = 1 << (32 - plen)
            while stack and net >= stack[-1][0]:
                stack.pop()
            if stack:
                owned[stack[-1][2]] -= size
            owned[value] += size
            stack.append((net + size, plen, value))
        return owned

    @classmethod
    def load(cls, stream: Iterable[str]) -> "PrefixDataset":
        ds = cls()
        for lineno, line in enumerate(stream, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cidr, sep, value = line.partition(",")
            if not sep or not value.strip():
                raise FormatError(f"prefix dataset line {lineno}: expected CIDR,value")
            try:
                ds.add(cidr, value)
            except ValueError as exc:
                raise FormatError(f"prefix dataset line {lineno}: {exc}") from exc
        return ds


@dataclass(frozen=True)
class OriginRow:
    round_id: int
    total_packets: int
    dominant_asn: Optional[str]
    asn_share: float
    dominant_country: Optional[str]
    country_share: float
    asn_packets: Mapping[str, int] = field(default_factory=dict)
    country_packets: Mapping[str, int] = field(default_factory=dict)
    unknown_generators: int = 0


def _asn_order(value: str):
    return (0, int(value), "") if value.isdigit() else (1, 0, value)


def _dominant(counts: Mapping[str, int], order) -> tuple[Optional[str], int]:
    known = [(v, n) for v, n in counts.items() if v != UNKNOWN and n > 0]
    if not known:
        return None, 0
    best = max(n for _, n in known)
    winner = min((v for v, n in known if n == best), key=order)
    return winner, best


def attribute_origins(
    profiles: Iterable[GeneratorProfile],
    asn_dataset: PrefixDataset,
    geo_dataset: PrefixDataset,
    rounds: Optional[Sequence[int]] = None,
) -> list[OriginRow]:
    """Attribute each round's response packets to the generator's ASN and country.

    The generator address decides the origin, whichever member sent the
    packet. Ties in dominance go to the lowest ASN and the alphabetically
    first country code.
    """
    profiles = list(profiles)
    if rounds is None:
        rounds = sorted({rid for p in profiles for rid in p.rounds})
    origin = {p.generator_ip: (asn_dataset.lookup(p.generator_ip), geo_dataset.lookup(p.generator_ip)) for p in profiles}
    rows = []
    for rid in rounds:
        asn_packets: Counter = Counter()
        country_packets: Counter = Counter()
        unknown = set()
        for p in profiles:
            n = p.packets(rid)
            if not n:
                continue
            asn, country = origin[p.generator_ip]
            asn_packets[asn] += n
            country_packets[country] += n
            if asn == UNKNOWN or country == UNKNOWN:
                unknown.add(p.generator_ip)
        total = sum(asn_packets.values())
        dom_asn, asn_n = _dominant(asn_packets, _asn_order)
        dom_cc, cc_n = _dominant(country_packets, lambda v: v)
        rows.append(
            OriginRow(
                round_id=rid,
                total_packets=total,
                dominant_asn=dom_asn,
                asn_share=asn_n / total if total else 0.0,
                dominant_country=dom_cc,
                country_share=cc_n / total if total else 0.0,
                asn_packets=dict(asn_packets),
                country_packets=dict(country_packets),
                unknown_generators=len(unknown),
            )
        )
        if unknown:
            log.info("round %s: %d generator(s) without a covering prefix", rid, len(unknown))
    return rows


def address_shares(geo_dataset: PrefixDataset) -> dict[str, float]:
    """Share of the dataset's address space held by each value."""
    owned = geo_dataset.address_counts()
    total = sum(owned.values())
    return {k: v / total for k, v in owned.items()} if total else {}


# -------------------------------------------------------------------- loops


@dataclass(frozen=True)
class TraceroutePath:
    target_ip: str
    hops: tuple[tuple[int, Optional[str]], ...]
    protocol: Optional[str] = None

    def __post_init__(self) -> None:
        ttls = [ttl for ttl, _ in self.hops]
        if any(b <= a for a, b in zip(ttls, ttls[1:])):
            raise FormatError(f"traceroute to {self.target_ip}: TTLs must strictly increase")


def has_loop(path: TraceroutePath, repeat_threshold: int = 3) -> bool:
    counts = Counter(ip for _, ip in path.hops if ip is not None)
    return any(n >= repeat_threshold for n in counts.values())


@dataclass(frozen=True)
class LoopStats:
    total: int
    looping: int

    @property
    def prevalence(self) -> Optional[float]:
        return self.looping / self.total if self.total else None


def detect_loops(paths: Iterable[TraceroutePath], repeat_threshold: int = 3) -> dict[str, LoopStats]:
    """Loop prevalence per protocol label (paths without one go under "all")."""
    total: Counter = Counter()
    looping: Counter = Counter()
    for path in paths:
        key = path.protocol or "all"
        total[key] += 1
        if has_loop(path, repeat_threshold):
            looping[key] += 1
    return {k: LoopStats(total[k], looping[k]) for k in sorted(total)}


def parse_traceroutes(stream: Iterable[str]) -> list[TraceroutePath]:
    """Read paths: a ``target <ip> [PROTOCOL]`` line, then ``<ttl> <ip>|*`` hops."""
    paths = []
    target = proto = None
    hops: list[tuple[int, Optional[str]]] = []

    def flush():
        if target is not None:
            paths.append(TraceroutePath(target, tuple(hops), proto))

    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "target":
            flush()
            if len(parts) < 2:
                raise FormatError(f"line {lineno}: target line needs an address")
            target = normalize_ip(parts[1])
            proto = parts[2] if len(parts) > 2 else None
            hops = []
            continue
        if target is None or len(parts) != 2:
            raise FormatError(f"line {lineno}: expected '<ttl> <ip>|*'")
        try:
            ttl = int(parts[0])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad TTL") from exc
        hops.append((ttl, None if parts[1] == "*" else normalize_ip(parts[1])))
    flush()
    return paths


def write_traceroutes(paths: Iterable[TraceroutePath], out: IO[str]) -> None:
    for path in paths:
        out.write(f"target {path.target_ip}" + (f" {path.protocol}\n" if path.protocol else "\n"))
        for ttl, ip in path.hops:
            out.write(f"{ttl} {ip or '*'}\n")


# ------------------------------------------------------------------- timing


def timing_histogram(response: MatchedResponse, bin_us: int = 1_000_000) -> list[int]:
    """Packets per bin after the probe, zero bins kept up to the last busy one."""
    if not response.packets:
        raise DataError("timing histogram of an empty response")
    send = response.probe.send_time
    bins: Counter = Counter((p.recv_time - send) // bin_us for p, _ in response.packets)
    last = max(bins)
    return [bins.get(i, 0) for i in range(0, last + 1)]
