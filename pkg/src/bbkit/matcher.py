"""Response-to-probe matching.

Probes and packets are merged in time order. Recently sent probes sit in a
ledger; each entry expires once no packet has matched it for the expiry
window, and every match pushes its expiry out again. Packets are tried
against the token rules first (DNS query name, TCP acknowledgment, ICMP
echo id), then against the ICMP quotation, then against source address plus
ephemeral port.
"""

from __future__ import annotations

import enum
import heapq
import logging
import re
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .model import (
    ICMP_ECHO_REPLY,
    ICMP_ERROR_TYPES,
    SYNACK,
    MatchedResponse,
    MatchRule,
    PacketRecord,
    ProbeProtocol,
    ProbeRecord,
    Transport,
    ip_key,
)

log = logging.getLogger(__name__)

SECOND = 1_000_000
SORT_TOLERANCE_US = SECOND
_U32 = 0xFFFFFFFF
_NAME_RUN = re.compile(rb"[a-z0-9_.\-]+")
_NAME_CHARS = frozenset(b"abcdefghijklmnopqrstuvwxyz0123456789_.-")
_TCP, _UDP, _OTHER = Transport.TCP, Transport.UDP, Transport.OTHER
_PS1, _PS2, _PS3, _PA1, _PA2 = MatchRule


class UnsortedInputError(ValueError):
    """A timestamp went backwards by more than the tolerance."""


class AckMode(str, enum.Enum):
    SEQ_PLUS_ONE = "seq_plus_one"
    SEQ_EXACT = "seq_exact"
    EITHER = "either"

    @classmethod
    def parse(cls, text: str) -> "AckMode":
        return cls(text.strip().lower().replace("-", "_"))


@dataclass(frozen=True)
class MatchConfig:
    expiry_window: int = 600 * SECOND
    tcp_ack_mode: AckMode = AckMode.EITHER
    ephemeral_port: int = 55000
    capacity: int = 10_000_000

    def __post_init__(self) -> None:
        if self.expiry_window <= 0:
            raise ValueError("expiry_window must be positive")
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")


class LedgerEntry:
    """A live probe in the ledger, with the packets matched to it so far."""

    __slots__ = ("probe", "seqno", "send_time", "expiry_time", "packets", "alive", "packet_count", "byte_count")

    def __init__(self, probe: ProbeRecord, seqno: int, window: int) -> None:
        self.probe = probe
        self.seqno = seqno
        self.send_time = probe.send_time
        self.expiry_time = probe.send_time + window
        self.packets: list[tuple[PacketRecord, MatchRule]] = []
        self.alive = True
        self.packet_count = 0
        self.byte_count = 0

    def __repr__(self) -> str:
        p = self.probe
        return f"LedgerEntry({p.protocol.value} {p.target_ip} @{p.send_time}, expires {self.expiry_time})"


def resolve_ambiguity(candidates: list[LedgerEntry], packet: PacketRecord) -> LedgerEntry:
    """Pick the owner of ``packet`` among entries that passed the same rule.

    Latest send time not after the packet wins; equal send times go to the
    numerically lowest target address, then to the earlier ledger position.
    """
    t = packet.recv_time
    eligible = [e for e in candidates if e.send_time <= t] or list(candidates)
    if len(eligible) == 1:
        return eligible[0]
    latest = max(e.send_time for e in eligible)
    tied = [e for e in eligible if e.send_time == latest]
    return min(tied, key=lambda e: (ip_key(e.probe.target_ip), e.seqno))


@dataclass
class MatchReport:
    responses: list[MatchedResponse] = field(default_factory=list)
    matched_count: int = 0
    matched_bytes: int = 0
    unmatched_count: int = 0
    unmatched_bytes: int = 0
    other_transport: int = 0
    rule_counts: Counter = field(default_factory=Counter)
    ack_forms: Counter = field(default_factory=Counter)
    evicted: int = 0
    probes: int = 0

    @property
    def total_packets(self) -> int:
        return self.matched_count + self.unmatched_count

    @property
    def matched_fraction(self) -> float:
        total = self.total_packets
        return self.matched_count / total if total else 0.0


class Matcher:
    """Incremental matching state. Feed probes with :meth:`add` and packets
    with :meth:`match`, both in time order; :func:`iter_matches` does the merge."""

    __slots__ = (
        "config", "keep_packets", "report", "_window", "_eph", "_ack_exact", "_ack_plus",
        "_seqno", "_live", "_heap", "_by_target", "_by_qname", "_qname_lengths", "_min_qname",
        "_odd_qnames", "_by_icmp_id", "_by_seq", "_finished", "_matched", "_matched_bytes",
        "_rule_counts", "_ack_forms",
    )

    def __init__(self, config: MatchConfig = MatchConfig(), keep_packets: bool = True) -> None:
        self.config = config
        self.keep_packets = keep_packets
        self.report = MatchReport()
        self._window = config.expiry_window
        self._eph = config.ephemeral_port
        self._ack_exact = config.tcp_ack_mode in (AckMode.SEQ_EXACT, AckMode.EITHER)
        self._ack_plus = config.tcp_ack_mode in (AckMode.SEQ_PLUS_ONE, AckMode.EITHER)
        self._seqno = 0
        self._live: dict[int, LedgerEntry] = {}
        self._heap: list[tuple[int, int, LedgerEntry]] = []
        self._by_target: dict[str, list[LedgerEntry]] = {}
        self._by_qname: dict[bytes, list[LedgerEntry]] = {}
        self._qname_lengths: Counter = Counter()
        self._min_qname = 0
        self._odd_qnames: dict[bytes, list[LedgerEntry]] = {}
        self._by_icmp_id: dict[int, list[LedgerEntry]] = {}
        self._by_seq: dict[int, list[LedgerEntry]] = {}
        self._finished: list[LedgerEntry] = []
        self._matched = 0
        self._matched_bytes = 0
        self._rule_counts = {r: 0 for r in MatchRule}
        self._ack_forms = {"exact": 0, "plus_one": 0}

    # ------------------------------------------------------------ ledger

    def _token_index(self, probe: ProbeRecord):
        proto = probe.protocol
        if proto is ProbeProtocol.DNS:
            key = probe.token.encode("utf-8", "surrogateescape")
            if _NAME_CHARS.issuperset(key):
                return self._by_qname, key
            return self._odd_qnames, key
        if proto is ProbeProtocol.ICMP:
            return self._by_icmp_id, probe.token
        if proto is ProbeProtocol.NTP:
            return None, None
        return self._by_seq, probe.token

    def add(self, probe: ProbeRecord) -> LedgerEntry:
        entry = LedgerEntry(probe, self._seqno, self._window)
        self._seqno += 1
        self.report.probes += 1
        self._live[entry.seqno] = entry
        heapq.heappush(self._heap, (entry.expiry_time, entry.seqno, entry))
        self._by_target.setdefault(probe.target_ip, []).append(entry)
        index, key = self._token_index(probe)
        if index is not None:
            index.setdefault(key, []).append(entry)
            if index is self._by_qname:
                self._qname_lengths[len(key)] += 1
                self._min_qname = min(self._qname_lengths)
        if len(self._live) > self.config.capacity:
            oldest = next(iter(self._live.values()))
            self._remove(oldest)
            self.report.evicted += 1
        return entry

    def _remove(self, entry: LedgerEntry) -> None:
        if not entry.alive:
            return
        entry.alive = False
        del self._live[entry.seqno]
        probe = entry.probe
        _discard(self._by_target, probe.target_ip, entry)
        index, key = self._token_index(probe)
        if index is not None:
            _discard(index, key, entry)
            if index is self._by_qname:
                self._qname_lengths[len(key)] -= 1
                if not self._qname_lengths[len(key)]:
                    del self._qname_lengths[len(key)]
                    self._min_qname = min(self._qname_lengths, default=0)
        if entry.packet_count:
            self._finished.append(entry)

    def expire(self, now: int) -> None:
        """Drop entries whose expiry lies before ``now``."""
        heap = self._heap
        while heap and heap[0][0] < now:
            expiry, seqno, entry = heapq.heappop(heap)
            if not entry.alive:
                continue
            if entry.expiry_time > expiry:
                heapq.heappush(heap, (entry.expiry_time, seqno, entry))
            else:
                self._remove(entry)

    def __len__(self) -> int:
        return len(self._live)

    # ---------------------------------------------------------- matching

    def _ps1(self, text: bytes, t: int) -> list[LedgerEntry]:
        found: list[LedgerEntry] = []
        low = text.lower()
        lengths = self._qname_lengths
        if lengths and len(low) >= self._min_qname:
            shortest = self._min_qname
            index = self._by_qname
            seen: set[bytes] = set()
            for m in _NAME_RUN.finditer(low):
                s, e = m.span()
                if e - s < shortest:
                    continue
                for n in lengths:
                    for i in range(s, e - n + 1):
                        key = low[i : i + n]
                        if key in index and key not in seen:
                            seen.add(key)
                            found.extend(x for x in index[key] if x.send_time <= t <= x.expiry_time)
        for key, entries in self._odd_qnames.items():
            if key in low:
                found.extend(x for x in entries if x.send_time <= t <= x.expiry_time)
        return found

    def match(self, pkt: PacketRecord) -> tuple[Optional[LedgerEntry], Optional[MatchRule]]:
        """Attribute one packet; returns (entry, rule) or (None, None)."""
        t = pkt.recv_time
        tr = pkt.transport
        cand = None
        rule = None
        if tr is _OTHER:
            self.report.other_transport += 1
            self.report.unmatched_count += 1
            self.report.unmatched_bytes += pkt.size
            return None, None
        text = pkt.payload_text
        if text and (self._qname_lengths or self._odd_qnames):
            cand = self._ps1(text, t)
            rule = _PS1
        if not cand:
            if tr is _TCP:
                flags = pkt.tcp_flags
                if flags is not None and flags & SYNACK == SYNACK and self._by_seq and pkt.tcp_ack is not None:
                    ack = pkt.tcp_ack
                    by_seq = self._by_seq
                    found = []
                    if self._ack_exact and ack in by_seq:
                        found.extend(by_seq[ack])
                    if self._ack_plus and (ack - 1) & _U32 in by_seq:
                        found.extend(by_seq[(ack - 1) & _U32])
                    cand = [x for x in found if x.send_time <= t <= x.expiry_time]
                    rule = _PS2
                if not cand and pkt.dst_port == self._eph:
                    entries = self._by_target.get(pkt.src_ip)
                    if entries:
                        cand = [x for x in entries if x.send_time <= t <= x.expiry_time]
                        rule = _PA2
            elif tr is _UDP:
                if pkt.dst_port == self._eph:
                    entries = self._by_target.get(pkt.src_ip)
                    if entries:
                        cand = [x for x in entries if x.send_time <= t <= x.expiry_time]
                        rule = _PA2
            else:
                itype = pkt.icmp_type
                if itype == ICMP_ECHO_REPLY and pkt.icmp_echo_id is not None:
                    entries = self._by_icmp_id.get(pkt.icmp_echo_id)
                    if entries:
                        cand = [x for x in entries if x.send_time <= t <= x.expiry_time]
                        rule = _PS3
                if not cand and pkt.quoted_dst_ip is not None and itype in ICMP_ERROR_TYPES:
                    entries = self._by_target.get(pkt.quoted_dst_ip)
                    if entries:
                        cand = [x for x in entries if x.send_time <= t <= x.expiry_time]
                        rule = _PA1
        if not cand:
            self.report.unmatched_count += 1
            self.report.unmatched_bytes += pkt.size
            return None, None
        entry = cand[0] if len(cand) == 1 else resolve_ambiguity(cand, pkt)
        if rule is _PS2:
            self._ack_forms["exact" if entry.probe.token == pkt.tcp_ack else "plus_one"] += 1
        expiry = t + self._window
        if expiry > entry.expiry_time:
            entry.expiry_time = expiry
        size = pkt.size
        entry.packet_count += 1
        entry.byte_count += size
        if self.keep_packets:
            entry.packets.append((pkt, rule))
        self._matched += 1
        self._matched_bytes += size
        self._rule_counts[rule] += 1
        return entry, rule

    def finish(self) -> MatchReport:
        """Close the ledger and assemble responses in ledger order."""
        for entry in list(self._live.values()):
            self._remove(entry)
        rep = self.report
        rep.matched_count = self._matched
        rep.matched_bytes = self._matched_bytes
        rep.rule_counts = Counter({r: n for r, n in self._rule_counts.items() if n})
        rep.ack_forms = Counter({k: n for k, n in self._ack_forms.items() if n})
        finished = sorted(self._finished, key=lambda e: e.seqno)
        self._finished = []
        if self.keep_packets:
            self.report.responses = [
                MatchedResponse(e.probe, tuple(sorted(e.packets, key=lambda pr: pr[0].recv_time)))
                for e in finished
            ]
        return self.report


def _discard(index: dict, key, entry: LedgerEntry) -> None:
    entries = index.get(key)
    if entries is None:
        return
    try:
        entries.remove(entry)
    except ValueError:
        return
    if not entries:
        del index[key]


def iter_matches(
    probes: Iterable[ProbeRecord],
    packets: Iterable[PacketRecord],
    matcher: Matcher,
) -> Iterator[tuple[PacketRecord, Optional[LedgerEntry], Optional[MatchRule]]]:
    """Merge both streams in time order, yielding each packet's attribution.

    Raises UnsortedInputError when either stream regresses by more than a
    second.
    """
    probe_it = iter(probes)
    nxt = next(probe_it, None)
    last_probe = nxt.send_time if nxt is not None else 0
    high = None
    add = matcher.add
    match = matcher.match
    heap = matcher._heap
    for pkt in packets:
        t = pkt.recv_time
        if high is None or t > high:
            high = t
        elif t < high - SORT_TOLERANCE_US:
            raise UnsortedInputError(
                f"packet trace not sorted (time {t} after {high}); sort the trace by time first"
            )
        while nxt is not None and nxt.send_time <= high:
            if nxt.send_time < last_probe - SORT_TOLERANCE_US:
                raise UnsortedInputError(
                    f"probe ledger not sorted (time {nxt.send_time} after {last_probe}); sort it first"
                )
            if nxt.send_time > last_probe:
                last_probe = nxt.send_time
            add(nxt)
            nxt = next(probe_it, None)
        if heap and heap[0][0] < high - SORT_TOLERANCE_US:
            matcher.expire(high - SORT_TOLERANCE_US)
        entry, rule = match(pkt)
        yield pkt, entry, rule


def match_stream(
    probes: Iterable[ProbeRecord],
    packets: Iterable[PacketRecord],
    config: MatchConfig = MatchConfig(),
    keep_packets: bool = True,
) -> MatchReport:
    """Run the whole merge and return the report."""
    matcher = Matcher(config, keep_packets=keep_packets)
    deque(iter_matches(probes, packets, matcher), maxlen=0)
    return matcher.finish()
