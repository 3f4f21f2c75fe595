
import pytest

from bbkit.matcher import (
    AckMode,
    LedgerEntry,
    MatchConfig,
    UnsortedInputError,
    match_stream,
    resolve_ambiguity,
)
from bbkit.model import MatchRule, PacketRecord, ProbeProtocol, ProbeRecord, Transport
from bbkit.synth import generate_campaign, random_population

from oracles import adversarial_trace, brute_force_match, streaming_assignment

S = 1_000_000
ME = "192.0.2.1"


def probe(t, target, proto, token=None, size=60):
    return ProbeRecord(t, target, proto, token, size)


def icmp(t, src, itype, size=70, **kw):
    return PacketRecord(t, src, ME, Transport.ICMP, size, icmp_type=itype, icmp_code=kw.pop("code", 0), **kw)


def only_rule(report):
    (resp,) = report.responses
    (pkt, rule), = resp.packets
    return resp.probe, rule


def test_ps1_is_case_insensitive():
    q = "ab12cd34ef56gh78.zone.example"
    p = probe(0, "10.0.0.1", ProbeProtocol.DNS, q, 70)
    pkt = PacketRecord(S, "10.0.0.1", ME, Transport.UDP, 90, 53, 40000, payload_text=b"\x10" + q.upper().encode() + b"\x00")
    assert only_rule(match_stream([p], [pkt])) == (p, MatchRule.PS1)


@pytest.mark.parametrize("mode,ack,hit", [
    (AckMode.EITHER, 1001, True), (AckMode.SEQ_PLUS_ONE, 1001, True), (AckMode.SEQ_EXACT, 1001, False),
    (AckMode.EITHER, 1000, True), (AckMode.SEQ_EXACT, 1000, True), (AckMode.SEQ_PLUS_ONE, 1000, False),
])
def test_ps2_ack_modes(mode, ack, hit):
    p = probe(0, "10.0.0.1", ProbeProtocol.TCP80, 1000)
    pkt = PacketRecord(S, "10.0.0.1", ME, Transport.TCP, 44, 80, 40000, tcp_flags=0x12, tcp_ack=ack)
    rep = match_stream([p], [pkt], MatchConfig(tcp_ack_mode=mode))
    assert rep.matched_count == int(hit)
    if hit:
        assert rep.rule_counts[MatchRule.PS2] == 1
        assert rep.ack_forms["plus_one" if ack == 1001 else "exact"] == 1


def test_ps2_needs_synack_and_wraps():
    p = probe(0, "10.0.0.1", ProbeProtocol.TCP443, 0xFFFFFFFF)
    rst = PacketRecord(S, "10.0.0.2", ME, Transport.TCP, 44, 443, 40000, tcp_flags=0x14, tcp_ack=0)
    syn_ack = PacketRecord(2 * S, "10.0.0.2", ME, Transport.TCP, 44, 443, 40000, tcp_flags=0x12, tcp_ack=0)
    rep = match_stream([p], [rst, syn_ack])
    assert rep.matched_count == 1 and rep.rule_counts[MatchRule.PS2] == 1


def test_pa1_quoted_destination():
    p = probe(0, "9.9.9.9", ProbeProtocol.TCP443, 5)
    pkt = icmp(S, "8.8.8.8", 3, code=1, quoted_dst_ip="9.9.9.9")
    assert only_rule(match_stream([p], [pkt])) == (p, MatchRule.PA1)


def test_pa2_source_and_ephemeral_port():
    p = probe(0, "1.2.3.4", ProbeProtocol.NTP, None, 90)
    good = PacketRecord(S, "1.2.3.4", ME, Transport.UDP, 76, 123, 55000)
    wrong_port = PacketRecord(S + 1, "1.2.3.4", ME, Transport.UDP, 76, 123, 55001)
    rep = match_stream([p], [good, wrong_port])
    assert rep.matched_count == 1 and rep.rule_counts[MatchRule.PA2] == 1


def test_ps3_echo_reply_only():
    p = probe(0, "10.0.0.1", ProbeProtocol.ICMP, 77, 74)
    reply = icmp(S, "10.0.0.1", 0, 74, icmp_echo_id=77)
    request = icmp(S + 1, "10.0.0.1", 8, 74, icmp_echo_id=77)
    rep = match_stream([p], [reply, request])
    assert rep.matched_count == 1 and rep.rule_counts[MatchRule.PS3] == 1


def test_expiry_boundary_and_extension():
    p = probe(0, "1.2.3.4", ProbeProtocol.NTP, None, 90)
    udp = lambda t: PacketRecord(t, "1.2.3.4", ME, Transport.UDP, 76, 123, 55000)  # noqa: E731
    assert match_stream([p], [udp(601 * S)]).matched_count == 0
    assert match_stream([p], [udp(600 * S)]).matched_count == 1
    # each match pushes expiry to its own time plus the window
    assert match_stream([p], [udp(500 * S), udp(1100 * S), udp(1701 * S)]).matched_count == 2


def test_packet_before_probe_is_not_live():
    p = probe(10 * S, "1.2.3.4", ProbeProtocol.NTP, None, 90)
    early = PacketRecord(5 * S, "1.2.3.4", ME, Transport.UDP, 76, 123, 55000)
    assert match_stream([p], [early]).matched_count == 0


def test_colliding_echo_ids_go_to_later_probe():
    a = probe(0, "10.0.0.1", ProbeProtocol.ICMP, 42, 74)
    b = probe(S, "10.0.0.2", ProbeProtocol.ICMP, 42, 74)
    rep = match_stream([a, b], [icmp(2 * S, "10.0.0.1", 0, 74, icmp_echo_id=42)])
    assert only_rule(rep) == (b, MatchRule.PS3)


def test_tie_goes_to_lowest_target():
    entries = [LedgerEntry(probe(5, ip, ProbeProtocol.ICMP, 1), i, 600 * S) for i, ip in enumerate(["2.2.2.2", "1.1.1.1"])]
    pkt = icmp(10, "3.3.3.3", 0, icmp_echo_id=1)
    assert resolve_ambiguity(entries, pkt).probe.target_ip == "1.1.1.1"
    assert resolve_ambiguity(entries[:1], pkt) is entries[0]


def test_other_transport_always_unmatched():
    p = probe(0, "1.2.3.4", ProbeProtocol.NTP, None, 90)
    gre = PacketRecord(S, "1.2.3.4", ME, Transport.OTHER, 100, payload_text=None)
    rep = match_stream([p], [gre])
    assert rep.unmatched_count == 1 and rep.other_transport == 1


def test_unsorted_inputs_rejected_beyond_tolerance():
    p = probe(0, "1.2.3.4", ProbeProtocol.NTP, None, 90)
    udp = lambda t: PacketRecord(t, "1.2.3.4", ME, Transport.UDP, 76, 123, 55000)  # noqa: E731
    assert match_stream([p], [udp(3 * S), udp(2 * S + 1)]).matched_count == 2
    with pytest.raises(UnsortedInputError):
        match_stream([p], [udp(3 * S), udp(S)])
    with pytest.raises(UnsortedInputError):
        match_stream([probe(5 * S, "1.1.1.1", ProbeProtocol.NTP), probe(S, "1.1.1.2", ProbeProtocol.NTP)], [udp(10 * S)])


def test_capacity_evicts_oldest_and_counts():
    probes = [probe(k, f"10.0.0.{k + 1}", ProbeProtocol.NTP, None, 90) for k in range(5)]
    pkts = [PacketRecord(10, f"10.0.0.{k + 1}", ME, Transport.UDP, 76, 123, 55000) for k in range(5)]
    rep = match_stream(probes, pkts, MatchConfig(capacity=3))
    assert rep.evicted == 2 and rep.matched_count == 3


def test_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(expiry_window=0)
    with pytest.raises(ValueError):
        MatchConfig(capacity=0)
    assert AckMode.parse("Seq-Plus-One") is AckMode.SEQ_PLUS_ONE


@pytest.mark.parametrize("seed", range(40))
def test_conservation_and_single_attribution(seed):
    probes, packets, window, mode = adversarial_trace(seed, 80, 600)
    rep = match_stream(probes, packets, MatchConfig(window, AckMode(mode)))
    assert rep.matched_count + rep.unmatched_count == len(packets)
    assert rep.matched_bytes + rep.unmatched_bytes == sum(p.size for p in packets)
    seen = [id(p) for r in rep.responses for p, _ in r.packets]
    assert len(seen) == len(set(seen)) == rep.matched_count
    others = {id(p) for p in packets if p.transport is Transport.OTHER}
    assert not others.intersection(seen)
    assert sum(rep.rule_counts.values()) == rep.matched_count


@pytest.mark.parametrize("seed", range(60))
def test_streaming_equals_brute_force(seed):
    probes, packets, window, mode = adversarial_trace(seed, 150, 1500)
    rep = match_stream(probes, packets, MatchConfig(window, AckMode(mode)))
    assert streaming_assignment(rep, probes, packets) == brute_force_match(probes, packets, window, mode)


def test_wider_window_can_lose_matches_when_echo_ids_collide():
    # Under 10 s the reply at 17 s goes to A (B has expired) and keeps A
    # alive for the error at 26 s. Under 12 s the reply goes to the later B
    # instead, A lapses at 21 s and the last packet is lost.
    a = probe(0, "10.0.0.1", ProbeProtocol.ICMP, 1, 74)
    b = probe(5 * S, "10.0.0.2", ProbeProtocol.ICMP, 1, 74)
    pkts = [
        icmp(9 * S, "9.9.9.9", 11, quoted_dst_ip="10.0.0.1"),
        icmp(17 * S, "10.0.0.1", 0, 74, icmp_echo_id=1),
        icmp(26 * S, "9.9.9.9", 11, quoted_dst_ip="10.0.0.1"),
    ]
    narrow = match_stream([a, b], pkts, MatchConfig(10 * S)).matched_count
    wide = match_stream([a, b], pkts, MatchConfig(12 * S)).matched_count
    assert (narrow, wide) == (3, 2)
    assert brute_force_match([a, b], pkts, 12 * S)[0] == [0, 1, -1]


@pytest.mark.parametrize("seed", range(5))
def test_wider_window_never_loses_matches_without_collisions(seed):
    from bbkit.model import ProbeProtocol as P
    specs = []
    for k, proto in enumerate((P.DNS, P.ICMP, P.NTP, P.TCP80)):
        specs += random_population(40, proto, seed=seed * 10 + k)
    camp = generate_campaign(specs, rounds=1, noise_pps=50, seed=seed)
    prev = None
    for w in (1, 2, 5, 30, 600):
        total = sum(
            match_stream(camp.ledgers[key], camp.traces[key], MatchConfig(w * S), keep_packets=False).matched_count
            for key in camp.ledgers
        )
        assert prev is None or total >= prev
        prev = total


def test_keep_packets_false_still_counts():
    probes, packets, window, mode = adversarial_trace(3, 100, 800)
    a = match_stream(probes, packets, MatchConfig(window, AckMode(mode)))
    b = match_stream(probes, packets, MatchConfig(window, AckMode(mode)), keep_packets=False)
    assert (a.matched_count, a.matched_bytes, a.rule_counts) == (b.matched_count, b.matched_bytes, b.rule_counts)
    assert b.responses == []
