"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are printed
even without ``-s``). Each test asserts the same condition it reports, so
a FAIL line always comes with a red test.
"""

from __future__ import annotations

import json
import random
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import pytest

from bbkit.analysis import TraceroutePath, detect_loops, has_loop, stability
from bbkit.attack import combine, simulate_attack
from bbkit.classify import build_profiles, format_factor, summarize_scan, GeneratorProfile, RoundRecord, classify_count
from bbkit.cli import main as bbkit_main
from bbkit.matcher import AckMode, MatchConfig, iter_matches, Matcher, match_stream
from bbkit.model import ProbeProtocol, ProbeRecord, Transport
from bbkit.synth import Constant, GeneratorSpec, SynthConfig, generate_campaign, random_population

from oracles import adversarial_trace, brute_force_loop, brute_force_match, streaming_assignment
from published import MB, RESCAN_AVERAGES

ROOT = Path(__file__).resolve().parent.parent
SECOND = 1_000_000


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


# ------------------------------------------------------------------ 1


def test_1_published_amplification_factors(report):
    start = time.perf_counter()
    misses = []
    factors = []
    for proto, (probes, probe_mb, resp_m, resp_mb, pkt_x, vol_x) in RESCAN_AVERAGES.items():
        rec = RoundRecord(1, round(resp_m * 1e6), round(resp_mb * MB), frozenset({"10.0.0.1"}), classify_count(2))
        prof = GeneratorProfile("10.0.0.1", ProbeProtocol(proto), {1: rec})
        s = summarize_scan([prof], probes, round(probe_mb * MB), round_id=1)
        got = (round(s.packet_amplification), round(s.volume_amplification))
        factors.append(f"{proto} {format_factor(s.packet_amplification)}/{format_factor(s.volume_amplification)}")
        if abs(got[0] - pkt_x) > 1 or abs(got[1] - vol_x) > 1:
            misses.append(f"{proto} got {got} want {(pkt_x, vol_x)}")
    elapsed = time.perf_counter() - start
    ok = not misses and elapsed < 1.0
    report(1, "amplification fixtures", ok, f"{'; '.join(misses or factors)}; {elapsed * 1000:.1f} ms")


# ------------------------------------------------------------------ 2


def _collided_synth_campaign(seed: int):
    """A synthetic multi-protocol campaign whose ICMP ids and TCP sequence
    numbers are folded into tiny spaces, and whose populations share
    addresses across protocols, so many packets have several candidates."""
    rng = random.Random(seed)
    protos = rng.sample(list(ProbeProtocol), rng.randint(2, 5))
    specs = []
    for k, proto in enumerate(protos):
        specs += random_population(rng.randint(30, 300), proto, seed=seed * 11 + k, prefix="10.0.0.0/22", rounds=1)
    camp = generate_campaign(specs, rounds=1, noise_pps=rng.choice((0, 20, 200)), seed=seed)
    id_space, seq_space = rng.choice((4, 16, 256)), rng.choice((8, 64, 1024))
    probes, packets = [], []
    for key, ledger in camp.ledgers.items():
        for p in ledger:
            if p.protocol is ProbeProtocol.ICMP:
                p = ProbeRecord(p.send_time, p.target_ip, p.protocol, p.token % id_space, p.probe_size)
            elif p.protocol.is_tcp:
                p = ProbeRecord(p.send_time, p.target_ip, p.protocol, p.token % seq_space, p.probe_size)
            probes.append(p)
        for pkt in camp.traces[key]:
            if pkt.transport is Transport.ICMP and pkt.icmp_echo_id is not None:
                pkt = pkt._replace(icmp_echo_id=pkt.icmp_echo_id % id_space)
            elif pkt.transport is Transport.TCP and pkt.tcp_ack:
                pkt = pkt._replace(tcp_ack=(pkt.tcp_ack - 1) % seq_space + 1)
            packets.append(pkt)
    probes.sort(key=lambda p: p.send_time)
    packets.sort(key=lambda p: p.recv_time)
    return probes, packets, rng.choice((5, 30, 600)) * SECOND, rng.choice(("either", "seq_exact", "seq_plus_one"))


def _campaign(k: int):
    if k % 2:
        return _collided_synth_campaign(k)
    if k == 0:
        n_probes, n_packets = 10_000, 100_000
    else:
        rng = random.Random(k)
        n_probes = int(10 ** rng.uniform(2, 4))
        n_packets = min(100_000, n_probes * rng.randint(3, 10))
    return adversarial_trace(k, n_probes, n_packets)


def test_2_streaming_matches_brute_force(report):
    start = time.perf_counter()
    mismatched = []
    largest = (0, 0)
    total_packets = 0
    for k in range(200):
        probes, packets, window, mode = _campaign(k)
        assert len(probes) <= 10_000 and len(packets) <= 100_000
        largest = max(largest, (len(probes), len(packets)))
        total_packets += len(packets)
        rep = match_stream(probes, packets, MatchConfig(window, AckMode(mode)))
        if streaming_assignment(rep, probes, packets) != brute_force_match(probes, packets, window, mode):
            mismatched.append(k)
    elapsed = time.perf_counter() - start
    ok = not mismatched and elapsed < 300
    report(2, "oracle equivalence", ok,
           f"200 campaigns, {total_packets} packets, largest {largest[0]} probes/{largest[1]} packets, "
           f"mismatched {mismatched or 'none'}, {elapsed:.1f} s")


# ------------------------------------------------------------------ 3


def _population(total: int, seed: int):
    protos = list(ProbeProtocol)
    specs = []
    for k, proto in enumerate(protos):
        count = total // len(protos) + (1 if k < total % len(protos) else 0)
        specs += random_population(count, proto, seed=seed + k, prefix=f"10.{16 * k}.0.0/12", rounds=1)
    return specs


def _recovery_errors(camp) -> tuple[int, int, int, int]:
    """(wrong profiles, matched noise, unmatched signal, noise packets)."""
    wrong = matched_noise = missed = noise_total = 0
    for key, ledger in camp.ledgers.items():
        trace = camp.traces[key]
        matcher = Matcher(MatchConfig())
        for pkt, entry, _ in iter_matches(ledger, trace, matcher):
            is_noise = pkt.src_ip.startswith(("198.18.", "198.19."))
            noise_total += is_noise
            if is_noise and entry is not None:
                matched_noise += 1
            elif not is_noise and entry is None:
                missed += 1
        rep = matcher.finish()
        got = {p.generator_ip: p.rounds[key[1]] for p in build_profiles(rep.responses, key[1], ledger)}
        for ip, truth in camp.truth[key].items():
            rec = got.get(ip)
            if rec is None or (rec.klass, rec.packet_count, rec.byte_count, rec.member_ips) != \
                    (truth.klass, truth.packet_count, truth.byte_count, truth.member_ips):
                wrong += 1
    return wrong, matched_noise, missed, noise_total


def test_3_end_to_end_exactness(report):
    specs = _population(10_000, seed=300)
    clean = generate_campaign(specs, rounds=1, noise_pps=0, seed=3)
    wrong, matched_noise, missed, noise = _recovery_errors(clean)
    classes = Counter(rec.klass.value for (_, rid), recs in clean.truth.items() if rid == 0 for rec in recs.values())
    noisy = generate_campaign(specs, rounds=1, noise_pps=1_000, seed=3)
    n_wrong, n_matched_noise, n_missed, n_noise = _recovery_errors(noisy)
    ok = (wrong == missed == noise == 0 and n_wrong == n_matched_noise == n_missed == 0 and n_noise > 0
          and len(clean.truth[(ProbeProtocol.DNS, 0)]) > 0)
    report(3, "end-to-end exactness", ok,
           f"{len(specs)} generators, full-scan classes {dict(sorted(classes.items()))}; noiseless wrong={wrong} missed={missed}; "
           f"1000 pps: noise={n_noise} matched_noise={n_matched_noise} missed_signal={n_missed} wrong={n_wrong}")


# ------------------------------------------------------------------ 4


def _fleet_timeline(proto: ProbeProtocol, first_octet: int):
    specs = [GeneratorSpec(f"10.{first_octet}.0.{i + 1}", proto, Constant(50, 10)) for i in range(100)]
    # 100 rescan probes spread over 60 s
    camp = generate_campaign(specs, rounds=1, seed=4, config=SynthConfig(rescan_rate=100 / 60))
    key = (proto, 1)
    ledger = camp.ledgers[key]
    assert ledger[-1].send_time - ledger[0].send_time < 60 * SECOND and len(ledger) == 100
    rep = match_stream(ledger, camp.traces[key])
    return simulate_attack({proto.value: rep.responses}, {proto.value: (len(ledger), sum(p.probe_size for p in ledger))})


def test_4_attack_closed_form(report):
    icmp = _fleet_timeline(ProbeProtocol.ICMP, 60)
    ntp = _fleet_timeline(ProbeProtocol.NTP, 61)
    both = combine([icmp, ntp])
    single_ok = icmp.pps == [5_000] * 10 and ntp.pps == [5_000] * 10
    double_ok = both.pps == [10_000] * 10 and all(b == i + n for b, i, n in zip(both.bps, icmp.bps, ntp.bps))
    report(4, "attack-sim closed form", single_ok and double_ok,
           f"ICMP bins {icmp.pps}, two protocols {both.pps}, bins after 10 s: {len(both.pps) - 10}")


# ------------------------------------------------------------------ 5


def test_5_loop_detection(report):
    rng = random.Random(5)
    pool = [f"100.64.{i // 256}.{i % 256}" for i in range(4_000)]
    paths, planted_max = [], []
    for k in range(100_000):
        length = rng.randint(1, 25)
        hops = rng.sample(pool, length)
        repeat = rng.choice((1, 1, 2, 2, 3, 4, 6))
        if repeat > 1:
            hops += [hops[0]] * (repeat - 1)
        rng.shuffle(hops)
        hops = [None if rng.random() < 0.05 else h for h in hops]
        paths.append(TraceroutePath(f"10.0.{k // 256 % 256}.{k % 256}", tuple((i + 1, h) for i, h in enumerate(hops)),
                                    rng.choice(("ICMP", "NTP", "DNS"))))
        planted_max.append(max(Counter(h for h in hops if h is not None).values(), default=0))
    verdicts = [has_loop(p) for p in paths]
    oracle = [brute_force_loop(p.hops) for p in paths]
    stats = detect_loops(paths)
    per_proto = Counter(p.protocol for p, v in zip(paths, oracle) if v)
    agg_ok = all(stats[k].looping == per_proto[k] for k in stats) and sum(s.total for s in stats.values()) == len(paths)
    twos = [v for v, m in zip(verdicts, planted_max) if m == 2]
    ok = verdicts == oracle and agg_ok and not any(twos) and len(twos) > 0
    report(5, "loop detection", ok,
           f"{len(paths)} paths, looping {sum(verdicts)}, oracle {sum(oracle)}, "
           f"2-occurrence paths {len(twos)} flagged {sum(twos)}")


# ------------------------------------------------------------------ 6


def _rises(series):
    return any(series[j] > series[i] for i in range(len(series)) for j in range(i + 1, len(series)))


def test_6_stability_invariants(report):
    rng = random.Random(6)
    violations = []
    scenarios = 0
    rounds_checked = 0
    for s in range(40):
        planted_rise = s % 2 == 1
        rounds = 4
        # per-round scale shared by the whole population, then per-generator noise on top
        if planted_rise:
            scales = sorted((rng.choice((0.0, 0.5, 1.0)) for _ in range(rounds)), reverse=True)
            lo = rng.randrange(1, rounds)
            scales[lo] = 1.0
            scales[lo - 1] = 0.0
        else:
            scales = sorted((rng.choice((0.0, 0.5, 1.0)) for _ in range(rounds)), reverse=True)
        specs = [
            GeneratorSpec(f"10.{s}.{i // 256}.{i % 256}", ProbeProtocol.DNS, Constant(rng.randint(4, 8), 1),
                          churn=(1.0, *scales))
            for i in range(1, 41)
        ]
        camp = generate_campaign(specs, rounds=rounds, seed=s)
        counts = {}
        for rid in range(rounds + 1):
            key = (ProbeProtocol.DNS, rid)
            rep = match_stream(camp.ledgers[key], camp.traces[key])
            counts[rid] = {p.generator_ip: p.packets(rid) for p in build_profiles(rep.responses, rid, camp.ledgers[key])}
        bbgs = [ip for ip, n in counts[0].items() if n >= 4]
        st = stability(bbgs, {r: counts[r] for r in range(1, rounds + 1)})
        scenarios += 1
        for r in st.rounds:
            rounds_checked += 1
            if r.blowback > r.active:
                violations.append(f"scenario {s} round {r.round_id}")
        expect_b = _rises([r.blowback for r in st.rounds])
        expect_a = _rises([r.active for r in st.rounds])
        if st.blowback_churn != expect_b or st.active_churn != expect_a or st.blowback_churn != planted_rise:
            violations.append(f"scenario {s} churn flags {st.blowback_churn}/{st.active_churn} planted {planted_rise}")
    report(6, "stability invariants", not violations,
           f"{scenarios} planted scenarios, {rounds_checked} rounds, violations {violations or 'none'}")


# ------------------------------------------------------------------ 7

_PERF_SCRIPT = """
import json, resource, time
from bbkit.synth import stress_workload
from bbkit.matcher import match_stream
t0 = time.perf_counter()
probes, packets = stress_workload(100_000, 10_000_000, seed=7)
t1 = time.perf_counter()
rep = match_stream(probes, packets, keep_packets=False)
t2 = time.perf_counter()
print(json.dumps({"setup": t1 - t0, "match": t2 - t1, "packets": rep.total_packets, "probes": rep.probes,
                  "matched": rep.matched_count, "maxrss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss}))
"""


def test_7_matcher_performance(report):
    out = subprocess.run([sys.executable, "-c", _PERF_SCRIPT], capture_output=True, text=True, check=True)
    m = json.loads(out.stdout.strip().splitlines()[-1])
    rss_gb = m["maxrss_kb"] / 1024 / 1024
    ok = m["packets"] == 10_000_000 and m["probes"] == 100_000 and m["match"] < 60 and rss_gb < 2
    report(7, "performance", ok,
           f"{m['packets']} packets vs {m['probes']} probes matched in {m['match']:.1f} s "
           f"(+{m['setup']:.1f} s setup), peak RSS {rss_gb * 1024:.0f} MB, matched {m['matched']}")


# ------------------------------------------------------------------ 8


def test_8_run_determinism(report, tmp_path):
    config = ROOT / "scenarios" / "demo-run.toml"
    codes = [bbkit_main(["run", "--config", str(config), "--out-dir", str(tmp_path / d)]) for d in ("a", "b")]
    a = (tmp_path / "a" / "manifest.tsv").read_bytes()
    b = (tmp_path / "b" / "manifest.tsv").read_bytes()
    lines = a.decode().count("\n")
    report(8, "determinism", codes == [0, 0] and a == b, f"exit codes {codes}, manifest {lines} lines, identical {a == b}")
