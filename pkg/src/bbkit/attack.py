"""Victim-side bandwidth of a replayed blowback attack.

Every rescan probe is assumed sent at attack start, so each packet lands at
``recv_time - (send_time - rescan_start)``; relative to the attack start that
is simply its delay after its own probe. Protocols are summed, which assumes
simultaneous probing of several protocols is additive.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .model import MatchedResponse

log = logging.getLogger(__name__)

SECOND = 1_000_000


@dataclass
class AttackTimeline:
    pps: list[int] = field(default_factory=list)
    bps: list[int] = field(default_factory=list)
    protocols: frozenset[str] = frozenset()
    probe_packets: int = 0
    probe_bytes: int = 0
    skew_clamped: int = 0

    @property
    def duration(self) -> int:
        return len(self.pps)

    @property
    def total_packets(self) -> int:
        return sum(self.pps)

    @property
    def total_bytes(self) -> int:
        return sum(self.bps)

    def first_second_amplification(self) -> tuple[Optional[float], Optional[float]]:
        if not self.pps or not self.probe_packets:
            return None, None
        return self.pps[0] / self.probe_packets, (self.bps[0] / self.probe_bytes if self.probe_bytes else None)

    def rows(self) -> list[tuple[int, int, int]]:
        return [(s, p, b) for s, (p, b) in enumerate(zip(self.pps, self.bps))]


def simulate_attack(
    responses: Mapping[str, Sequence[MatchedResponse]],
    probe_totals: Optional[Mapping[str, tuple[int, int]]] = None,
    repeat: int = 1,
    period_s: int = 0,
) -> AttackTimeline:
    """Bin every matched packet by whole seconds after attack start.

    ``responses`` maps a protocol label to its matched responses;
    ``probe_totals`` maps the same labels to (probe packets, probe bytes)
    of the ledgers the attacker would replay. ``repeat``/``period_s``
    superimpose repeated probing of the same targets (experimental).
    """
    if repeat < 1 or period_s < 0:
        raise ValueError("repeat must be >= 1 and period_s >= 0")
    if repeat > 1:
        log.warning("repeated probing is experimental")
    pkt_bins: Counter = Counter()
    byte_bins: Counter = Counter()
    clamped = 0
    for resps in responses.values():
        for resp in resps:
            send = resp.probe.send_time
            for pkt, _ in resp.packets:
                delay = pkt.recv_time - send
                if delay < 0:
                    clamped += 1
                    delay = 0
                b = delay // SECOND
                for k in range(repeat):
                    pkt_bins[b + k * period_s] += 1
                    byte_bins[b + k * period_s] += pkt.size
    if clamped:
        log.warning("%d packet(s) arrived before their probe; clamped to second 0", clamped)
    n = max(pkt_bins) + 1 if pkt_bins else 0
    probe_packets = probe_bytes = 0
    for count, size in (probe_totals or {}).values():
        probe_packets += count * repeat
        probe_bytes += size * repeat
    return AttackTimeline(
        pps=[pkt_bins.get(i, 0) for i in range(n)],
        bps=[byte_bins.get(i, 0) for i in range(n)],
        protocols=frozenset(responses),
        probe_packets=probe_packets,
        probe_bytes=probe_bytes,
        skew_clamped=clamped,
    )


def combine(timelines: Iterable[AttackTimeline]) -> AttackTimeline:
    """Bin-wise sum of timelines."""
    timelines = list(timelines)
    n = max((t.duration for t in timelines), default=0)
    out = AttackTimeline(pps=[0] * n, bps=[0] * n)
    protos: set[str] = set()
    for t in timelines:
        for i, (p, b) in enumerate(zip(t.pps, t.bps)):
            out.pps[i] += p
            out.bps[i] += b
        protos |= t.protocols
        out.probe_packets += t.probe_packets
        out.probe_bytes += t.probe_bytes
        out.skew_clamped += t.skew_clamped
    out.protocols = frozenset(protos)
    return out
