"""End-to-end runs driven by one TOML config, ending in a digest manifest."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import plots
from .analysis import (
    PrefixDataset,
    activity_concentration,
    address_shares,
    attribute_origins,
    detect_loops,
    parse_traceroutes,
    round_counts_from_profiles,
    stability,
    timing_histogram,
    write_traceroutes,
)
from .attack import combine, simulate_attack
from .classify import (
    BLOWBACK_THRESHOLD,
    KIND_LABELS,
    KIND_ORDER,
    DataError,
    GeneratorProfile,
    build_profiles,
    format_factor,
    merge_profiles,
    multipacket_type_counts,
    response_type_breakdown,
    summarize_scan,
)
from .matcher import AckMode, MatchConfig, match_stream
from .model import MatchedResponse, ProbeProtocol, ProbeRecord, iter_packet_lines, iter_probe_ledger, write_packet_lines, write_probe_ledger
from .pcap import iter_pcap
from .report import digest_manifest, ensure_dir, probe_totals, write_profiles, write_responses, write_tsv_file

log = logging.getLogger(__name__)

SECOND = 1_000_000


class ValidationError(ValueError):
    """The config or its referenced inputs are unusable."""


@dataclass(frozen=True)
class RoundInput:
    protocol: ProbeProtocol
    round_id: int
    ledger: Path
    trace: Path


@dataclass
class PipelineConfig:
    output_dir: Path
    rounds: list[RoundInput] = field(default_factory=list)
    scenario: Optional[Path] = None
    seed: Optional[int] = None
    asn_dataset: Optional[Path] = None
    geo_dataset: Optional[Path] = None
    traceroutes: Optional[Path] = None
    match: MatchConfig = MatchConfig()
    threshold: int = BLOWBACK_THRESHOLD
    log_level: str = "WARNING"
    jobs: int = 1
    timing_panels: int = 8

    def validate(self) -> None:
        missing = []
        for p in (self.scenario, self.asn_dataset, self.geo_dataset, self.traceroutes):
            if p is not None and not Path(p).is_file():
                missing.append(str(p))
        for r in self.rounds:
            missing.extend(str(p) for p in (r.ledger, r.trace) if not Path(p).is_file())
        if missing:
            raise ValidationError("input file(s) not found: " + ", ".join(missing))
        if self.scenario is None and not self.rounds:
            raise ValidationError("config needs either inputs.scenario or at least one [[inputs.round]]")
        seen = set()
        for r in self.rounds:
            key = (r.protocol, r.round_id)
            if key in seen:
                raise ValidationError(f"round {r.round_id} of {r.protocol.value} listed twice")
            seen.add(key)
        if self.threshold < 2:
            raise ValidationError("blowback threshold must be at least 2")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")


def load_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    base = path.parent

    def rel(value) -> Optional[Path]:
        return None if value is None else (base / value)

    inputs = doc.get("inputs", {})
    rounds = []
    for row in inputs.get("round", []):
        try:
            rounds.append(RoundInput(ProbeProtocol(str(row["protocol"]).upper()), int(row["round"]),
                                     rel(row["ledger"]), rel(row["trace"])))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad [[inputs.round]] entry {row!r}: {exc}") from exc
    m = doc.get("match", {})
    try:
        match = MatchConfig(
            expiry_window=int(float(m.get("window_secs", 600)) * SECOND),
            tcp_ack_mode=AckMode.parse(m.get("ack_mode", "either")),
            ephemeral_port=int(m.get("ephemeral_port", 55000)),
            capacity=int(m.get("capacity", 10_000_000)),
        )
    except ValueError as exc:
        raise ValidationError(f"[match]: {exc}") from exc
    out = doc.get("output", {})
    cfg = PipelineConfig(
        output_dir=rel(out.get("dir", "out")),
        rounds=rounds,
        scenario=rel(inputs.get("scenario")),
        seed=inputs.get("seed"),
        asn_dataset=rel(inputs.get("asn_dataset")),
        geo_dataset=rel(inputs.get("geo_dataset")),
        traceroutes=rel(inputs.get("traceroutes")),
        match=match,
        threshold=int(doc.get("classify", {}).get("threshold", BLOWBACK_THRESHOLD)),
        log_level=str(doc.get("log", {}).get("level", "WARNING")),
        jobs=int(doc.get("run", {}).get("jobs", 1)),
        timing_panels=int(out.get("timing_panels", 8)),
    )
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


# ------------------------------------------------------------------ stages


def read_ledger(path) -> list[ProbeRecord]:
    rejects: list = []
    with open(path, encoding="utf-8") as fh:
        probes = list(iter_probe_ledger(fh, rejects))
    if rejects:
        log.warning("%s: skipped %d malformed line(s)", path, len(rejects))
    probes.sort(key=lambda p: p.send_time)
    return probes


def read_trace(path):
    """All packets of a native or pcap trace, sorted by arrival."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head in (b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4", b"\x4d\x3c\xb2\xa1", b"\xa1\xb2\x3c\x4d"):
        with open(path, "rb") as fh:
            packets = list(iter_pcap(fh))
    else:
        rejects: list = []
        with open(path, encoding="utf-8") as fh:
            packets = list(iter_packet_lines(fh, rejects))
        if rejects:
            log.warning("%s: skipped %d malformed line(s)", path, len(rejects))
    packets.sort(key=lambda p: p.recv_time)
    return packets


def _match_one(args):
    rnd, config = args
    probes = read_ledger(rnd.ledger)
    wrong = {p.protocol for p in probes} - {rnd.protocol}
    if wrong:
        raise DataError(f"{rnd.ledger}: ledger holds {', '.join(sorted(w.value for w in wrong))} probes, expected {rnd.protocol.value}")
    report = match_stream(probes, read_trace(rnd.trace), config)
    return probes, report


def synthesize_inputs(cfg: PipelineConfig) -> list[RoundInput]:
    from .synth import generate_campaign, load_scenario, synth_traceroutes

    scen = load_scenario(cfg.scenario)
    seed = scen.seed if cfg.seed is None else cfg.seed
    camp = generate_campaign(scen.specs, scen.rounds, scen.noise_pps, seed, scen.config)
    data = ensure_dir(cfg.output_dir / "data")
    rounds = []
    for (proto, rid), ledger in sorted(camp.ledgers.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        lp = data / f"ledger-{proto.value}-r{rid}.csv"
        tp = data / f"trace-{proto.value}-r{rid}.pkt"
        with open(lp, "w", encoding="utf-8", newline="\n") as fh:
            write_probe_ledger(ledger, fh)
        with open(tp, "w", encoding="utf-8", newline="\n") as fh:
            write_packet_lines(camp.traces[(proto, rid)], fh)
        rounds.append(RoundInput(proto, rid, lp, tp))
    if cfg.traceroutes is None:
        tr = data / "traceroutes.txt"
        with open(tr, "w", encoding="utf-8", newline="\n") as fh:
            write_traceroutes(synth_traceroutes(scen.specs, seed), fh)
        cfg.traceroutes = tr
    return rounds


def run_pipeline(cfg: PipelineConfig) -> Path:
    """Run every stage and write ``manifest.tsv``; returns the manifest path.

    On failure a ``.partial`` marker is left in the output directory next to
    whatever was written, and the exception propagates.
    """
    out = ensure_dir(cfg.output_dir)
    marker = out / ".partial"
    marker.write_text("incomplete run\n")
    manifest = out / "manifest.tsv"
    if manifest.exists():
        manifest.unlink()
    try:
        _run(cfg, out)
        path = digest_manifest(out, manifest, exclude={".partial"})
    except BaseException:
        log.error("run failed; partial outputs left in %s", out)
        raise
    marker.unlink()
    return path


def _run(cfg: PipelineConfig, out: Path) -> None:
    rounds = list(cfg.rounds)
    if cfg.scenario is not None:
        rounds += synthesize_inputs(cfg)
    rounds.sort(key=lambda r: (r.protocol.value, r.round_id))
    resp_dir = ensure_dir(out / "responses")
    work = [(r, cfg.match) for r in rounds]
    if cfg.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, os.cpu_count() or 1)) as pool:
            results = list(pool.map(_match_one, work))
    else:
        results = [_match_one(w) for w in work]

    parts: list[GeneratorProfile] = []
    totals = {}
    by_round: dict[tuple[ProbeProtocol, int], list[MatchedResponse]] = {}
    for rnd, (probes, report) in zip(rounds, results):
        with open(resp_dir / f"{rnd.protocol.value}-r{rnd.round_id}.csv", "w", encoding="utf-8", newline="\n") as fh:
            write_responses(report, fh, inputs=[rnd.ledger, rnd.trace])
        totals[(rnd.protocol, rnd.round_id)] = probe_totals(probes)
        by_round[(rnd.protocol, rnd.round_id)] = report.responses
        parts.extend(build_profiles(report.responses, rnd.round_id, probes, cfg.threshold))
    profiles = merge_profiles(parts)
    all_inputs = [p for r in rounds for p in (r.ledger, r.trace)]
    write_profiles(out / "profiles.tsv", profiles, totals, inputs=all_inputs)

    protocols = sorted({r.protocol for r in rounds}, key=lambda p: list(ProbeProtocol).index(p))
    per_proto = {p: [g for g in profiles if g.protocol is p] for p in protocols}
    write_scan_tables(out, per_proto, totals, cfg.threshold, all_inputs)

    fig_dir = ensure_dir(out / "figures")
    reports = {}
    for proto, profs in per_proto.items():
        bbgs = [g.generator_ip for g in profs if g.packets(0) >= cfg.threshold]
        rescans = {rid: c for rid, c in round_counts_from_profiles(profs).items() if rid != 0}
        if bbgs and rescans:
            reports[proto.value] = stability(bbgs, rescans, cfg.threshold)
    if reports:
        write_tsv_file(
            out / "stability.tsv",
            ("protocol", "round", "blowback_prevalence", "active_prevalence"),
            [(k, r.round_id, r.blowback, r.active) for k, rep in reports.items() for r in rep.rounds],
            all_inputs,
            [f"churn {k} blowback={rep.blowback_churn} active={rep.active_churn}" for k, rep in reports.items()],
        )
        plots.stability_figure(reports, fig_dir)
    for proto, profs in per_proto.items():
        rids = sorted({rid for g in profs for rid in g.rounds})
        if len(rids) > 1:
            bb = [g for g in profs if g.packets(0) >= cfg.threshold]
            curves = activity_concentration(bb, 0, rids)
            plots.concentration_figure(curves, fig_dir, stem=f"concentration-{proto.value}")

    if cfg.asn_dataset and cfg.geo_dataset:
        with open(cfg.asn_dataset, encoding="utf-8") as fh:
            asn = PrefixDataset.load(fh)
        with open(cfg.geo_dataset, encoding="utf-8") as fh:
            geo = PrefixDataset.load(fh)
        shares = address_shares(geo)
        rows = []
        for proto, profs in per_proto.items():
            for row in attribute_origins(profs, asn, geo):
                rows.append((proto.value, row.round_id, row.total_packets, row.dominant_asn, row.asn_share,
                             row.dominant_country, row.country_share,
                             shares.get(row.dominant_country) if row.dominant_country else None))
        write_tsv_file(out / "table3.tsv",
                       ("protocol", "round", "packets", "dominant_asn", "asn_share", "dominant_country",
                        "country_share", "country_address_share"),
                       rows, all_inputs + [cfg.asn_dataset, cfg.geo_dataset])

    if cfg.traceroutes:
        with open(cfg.traceroutes, encoding="utf-8") as fh:
            stats = detect_loops(parse_traceroutes(fh))
        write_tsv_file(out / "loops.tsv", ("protocol", "paths", "looping", "prevalence"),
                       [(k, s.total, s.looping, s.prevalence) for k, s in stats.items()], [cfg.traceroutes])
        plots.loops_figure(stats, fig_dir)

    first_rescan = {p: min((rid for q, rid in by_round if q is p and rid > 0), default=None) for p in protocols}
    timelines = []
    for proto, rid in first_rescan.items():
        if rid is None:
            continue
        timelines.append(simulate_attack({proto.value: by_round[(proto, rid)]}, {proto.value: totals[(proto, rid)]}))
    if timelines:
        tl = combine(timelines)
        pa, ba = tl.first_second_amplification()
        write_tsv_file(out / "attack.tsv", ("second", "pps", "Bps"), tl.rows(), all_inputs,
                       [f"protocols {','.join(sorted(tl.protocols))} (summed, assumed additive)",
                        f"probe_packets {tl.probe_packets} probe_bytes {tl.probe_bytes}",
                        f"first_second_amplification packets={format_factor(pa)} bytes={format_factor(ba)}"])
        plots.attack_figure(tl, fig_dir)

    busiest = sorted(
        (resp for (p, rid), resps in by_round.items() if rid == 0 for resp in resps),
        key=lambda r: (-r.packet_count, r.probe.protocol.value, r.probe.target_ip),
    )[: cfg.timing_panels]
    if busiest:
        hists = {f"{r.probe.protocol.value} {r.probe.target_ip}": timing_histogram(r) for r in busiest}
        plots.timing_figure(hists, fig_dir)


def write_scan_tables(out: Path, per_proto, totals, threshold: int, inputs, prefix: str = "") -> list[Path]:
    """Full-scan overview, rescan averages and packet-type shares."""
    t1, t2, t4 = [], [], []
    for proto, profs in per_proto.items():
        if (proto, 0) in totals:
            s = summarize_scan(profs, *totals[(proto, 0)], round_id=0, threshold=threshold)
            t1.append((proto.value, s.probe_packets, s.total_rggs, s.multipacket_rggs, s.blowback_rggs,
                       s.blowback_share_of_multipacket_traffic))
            counts = multipacket_type_counts(profs, 0)
            shares = response_type_breakdown(counts)
            t4.append((proto.value, *(f"{shares[k]:.2f}" for k in KIND_ORDER)))
        rescans = sorted(rid for p, rid in totals if p is proto and rid > 0)
        if rescans:
            sums = [summarize_scan(profs, *totals[(proto, rid)], round_id=rid, threshold=threshold) for rid in rescans]
            k = len(sums)
            probe_n = sum(s.probe_packets for s in sums) / k
            probe_b = sum(s.probe_bytes for s in sums) / k
            resp_n = sum(s.response_packets for s in sums) / k
            resp_b = sum(s.response_bytes for s in sums) / k
            t2.append((proto.value, probe_n, probe_b, resp_n, resp_b,
                       format_factor(resp_n / probe_n if probe_n else None),
                       format_factor(resp_b / probe_b if probe_b else None)))
    written = []
    if t1:
        written.append(write_tsv_file(out / f"{prefix}table1.tsv",
                       ("protocol", "probes", "rggs", "multipacket_rggs", "blowback_rggs", "blowback_share_of_multipacket"),
                       t1, inputs))
    if t2:
        written.append(write_tsv_file(out / f"{prefix}table2.tsv",
                       ("protocol", "probe_packets", "probe_bytes", "avg_response_packets", "avg_response_bytes",
                        "packet_amplification", "volume_amplification"),
                       t2, inputs, ["averaged over rescan rounds"]))
    if t4:
        written.append(write_tsv_file(out / f"{prefix}table4.tsv", ("protocol", *(KIND_LABELS[k] for k in KIND_ORDER)), t4,
                                      inputs, ["percent of packets from generators with two or more packets, full scan"]))
    return written

