"""Command-line entry point: ``bbkit <subcommand> ...``.

Exit codes: 0 ok, 2 bad arguments or config, 3 bad input data, 4 anything
else. ``BBKIT_LOG`` (DEBUG, INFO, WARNING, ...) sets the log level unless
``--log-level`` is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
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
)
from .attack import simulate_attack
from .classify import BLOWBACK_THRESHOLD, DataError, build_profiles, format_factor, merge_profiles, summarize_scan
from .matcher import AckMode, MatchConfig, UnsortedInputError, match_stream
from .model import FormatError, ProbeProtocol, ip_key, normalize_ip, write_packet_lines, write_probe_ledger
from .pcap import write_pcap
from .pipeline import ValidationError, load_config, read_ledger, read_trace, run_pipeline, write_scan_tables
from .probe import ConfigError, EmissionRefused, FullSweep, ScanKind, ScanPlan, emit_probes, generate_ledger
from .report import (
    probe_totals,
    read_profiles,
    read_responses,
    response_footer,
    responses_from_rows,
    write_profiles,
    write_responses,
    write_tsv_file,
)

log = logging.getLogger("bbkit")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _plot_dir(args, out: Path) -> Optional[Path]:
    if getattr(args, "no_plots", False):
        return None
    return Path(args.plot_dir) if args.plot_dir else out.parent


def _add_plot_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plot-dir", help="where PNG/.dat figures go (default: next to --out)")
    p.add_argument("--no-plots", action="store_true", help="skip figures")


def _load_profiles(paths: Sequence[str]):
    profiles, totals = [], {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            profs, tots = read_profiles(fh)
        profiles.extend(profs)
        totals.update(tots)
    return merge_profiles(_split_rounds(profiles)), totals


def _split_rounds(profiles):
    # merge_profiles wants one round per part so duplicates across files are caught
    from .classify import GeneratorProfile

    for prof in profiles:
        for rid, rec in prof.rounds.items():
            yield GeneratorProfile(prof.generator_ip, prof.protocol, {rid: rec})


def _protocol(text: str) -> ProbeProtocol:
    try:
        return ProbeProtocol(text.upper())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown protocol {text!r}; choose from {', '.join(p.value for p in ProbeProtocol)}")


# ------------------------------------------------------------- subcommands


def cmd_probe(args) -> int:
    if args.targets == "full":
        targets = FullSweep(args.limit)
    else:
        with open(args.targets, encoding="utf-8") as fh:
            targets = [normalize_ip(line.split("#")[0].strip()) for line in fh if line.split("#")[0].strip()]
    plan = ScanPlan(
        protocol=args.protocol,
        targets=targets,
        rate_pps=args.rate,
        kind=ScanKind(args.kind.upper()),
        seed=args.seed,
        start_time=args.start_us,
        zone=args.zone,
        probe_size=args.probe_size,
    )
    if args.emit and not args.allow_prefix:
        raise EmissionRefused("--emit needs at least one --allow-prefix")
    probes = list(generate_ledger(plan))
    if args.emit:
        sink = args.sink or f"{args.out}.pcap"
        with open(sink, "wb") as fh:
            n = emit_probes(probes, args.allow_prefix, fh, args.src_ip)
        log.info("wrote %d probe packet(s) to %s", n, sink)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        n = write_probe_ledger(probes, fh)
    log.info("wrote %d probe(s) to %s", n, args.out)
    return EXIT_OK


def cmd_match(args) -> int:
    try:
        config = MatchConfig(
            expiry_window=int(args.window_secs * 1_000_000),
            tcp_ack_mode=AckMode.parse(args.ack_mode),
            ephemeral_port=args.ephemeral_port,
            capacity=args.capacity,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    probes = read_ledger(args.probes)
    packets = read_trace(args.packets)
    report = match_stream(probes, packets, config)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_responses(report, fh, inputs=[args.probes, args.packets])
    for line in response_footer(report):
        log.info("%s", line)
    return EXIT_OK


def cmd_classify(args) -> int:
    probes = read_ledger(args.probes)
    with open(args.responses, encoding="utf-8") as fh:
        rows, _ = read_responses(fh)
    responses, kinds = responses_from_rows(rows, probes)
    profiles = build_profiles(responses, args.round, probes, args.threshold, kinds=kinds)
    by_proto = defaultdict(list)
    for p in probes:
        by_proto[p.protocol].append(p)
    totals = {(proto, args.round): probe_totals(ps) for proto, ps in by_proto.items()}
    write_profiles(args.out, profiles, totals, inputs=[args.responses, args.probes])
    return EXIT_OK


def cmd_summarize(args) -> int:
    profiles, totals = _load_profiles(args.profiles)
    out = Path(args.out)
    rows = []
    per_proto = defaultdict(list)
    for prof in profiles:
        per_proto[prof.protocol].append(prof)
    for proto in sorted(per_proto, key=lambda p: list(ProbeProtocol).index(p)):
        profs = per_proto[proto]
        rounds = sorted({rid for g in profs for rid in g.rounds} | {rid for p, rid in totals if p is proto})
        for rid in rounds:
            n, b = totals.get((proto, rid), (0, 0))
            s = summarize_scan(profs, n, b, rid, args.threshold)
            rows.append((proto.value, rid, s.probe_packets, s.probe_bytes, s.total_rggs, s.multipacket_rggs,
                         s.blowback_rggs, s.blowback_share_of_multipacket_traffic, s.response_packets,
                         s.response_bytes, format_factor(s.packet_amplification), format_factor(s.volume_amplification)))
    write_tsv_file(out, ("protocol", "round", "probe_packets", "probe_bytes", "rggs", "multipacket_rggs",
                         "blowback_rggs", "blowback_share_of_multipacket", "response_packets", "response_bytes",
                         "packet_amplification", "volume_amplification"), rows, args.profiles)
    write_scan_tables(out.parent, per_proto, totals, args.threshold, args.profiles, prefix=f"{out.stem}-")
    return EXIT_OK


def cmd_stability(args) -> int:
    from . import plots

    profiles, _ = _load_profiles(args.profiles)
    per_proto = defaultdict(list)
    for prof in profiles:
        per_proto[prof.protocol].append(prof)
    reports = {}
    for proto in sorted(per_proto, key=lambda p: list(ProbeProtocol).index(p)):
        profs = per_proto[proto]
        bbgs = [g.generator_ip for g in profs if g.packets(0) >= args.threshold]
        rescans = {rid: c for rid, c in round_counts_from_profiles(profs).items() if rid != 0}
        if not bbgs:
            raise DataError(f"{proto.value}: no blowback generators in round 0")
        reports[proto.value] = stability(bbgs, rescans, args.threshold)
    out = Path(args.out)
    write_tsv_file(
        out,
        ("protocol", "round", "blowback_prevalence", "active_prevalence"),
        [(k, r.round_id, r.blowback, r.active) for k, rep in reports.items() for r in rep.rounds],
        args.profiles,
        [f"{k} bbgs={rep.bbg_count} blowback_range={rep.blowback_range[0]:.4f}-{rep.blowback_range[1]:.4f} "
         f"active_range={rep.active_range[0]:.4f}-{rep.active_range[1]:.4f} "
         f"blowback_churn={rep.blowback_churn} active_churn={rep.active_churn}" for k, rep in reports.items()],
    )
    plot_dir = _plot_dir(args, out)
    if plot_dir and reports:
        plots.stability_figure(reports, plot_dir, stem=out.stem)
    return EXIT_OK


def cmd_concentration(args) -> int:
    from . import plots

    profiles, _ = _load_profiles(args.profiles)
    profs = [g for g in profiles if g.protocol is args.protocol]
    if args.bbgs_only:
        profs = [g for g in profs if g.packets(args.rank_round) >= args.threshold]
    curves = activity_concentration(profs, args.rank_round, persistent_only=not args.all)
    rounds = sorted(curves.curves)
    out = Path(args.out)
    rows = [(rank + 1, ip, *(curves.curves[r][rank] for r in rounds)) for rank, ip in enumerate(curves.ranked_ips)]
    write_tsv_file(out, ("rank", "generator_ip", *(f"round{r}" for r in rounds)), rows, args.profiles)
    plot_dir = _plot_dir(args, out)
    if plot_dir:
        plots.concentration_figure(curves, plot_dir, stem=out.stem)
    return EXIT_OK


def cmd_origins(args) -> int:
    profiles, _ = _load_profiles(args.profiles)
    with open(args.asn, encoding="utf-8") as fh:
        asn = PrefixDataset.load(fh)
    with open(args.geo, encoding="utf-8") as fh:
        geo = PrefixDataset.load(fh)
    shares = address_shares(geo)
    per_proto = defaultdict(list)
    for prof in profiles:
        per_proto[prof.protocol].append(prof)
    rows = []
    for proto in sorted(per_proto, key=lambda p: list(ProbeProtocol).index(p)):
        for row in attribute_origins(per_proto[proto], asn, geo):
            rows.append((proto.value, row.round_id, row.total_packets, row.dominant_asn, row.asn_share,
                         row.dominant_country, row.country_share,
                         shares.get(row.dominant_country) if row.dominant_country else None,
                         row.asn_packets.get("unknown", 0), row.unknown_generators))
    write_tsv_file(args.out, ("protocol", "round", "packets", "dominant_asn", "asn_share", "dominant_country",
                              "country_share", "country_address_share", "unknown_packets", "unknown_generators"),
                   rows, [*args.profiles, args.asn, args.geo])
    return EXIT_OK


def cmd_loops(args) -> int:
    from . import plots

    with open(args.paths, encoding="utf-8") as fh:
        paths = parse_traceroutes(fh)
    stats = detect_loops(paths, args.threshold)
    out = Path(args.out)
    write_tsv_file(out, ("protocol", "paths", "looping", "prevalence"),
                   [(k, s.total, s.looping, s.prevalence if s.prevalence is not None else "undefined")
                    for k, s in stats.items()] or [("all", 0, 0, "undefined")], [args.paths])
    plot_dir = _plot_dir(args, out)
    if plot_dir:
        plots.loops_figure(stats, plot_dir, stem=out.stem)
    return EXIT_OK


def cmd_timing(args) -> int:
    from . import plots

    probes = read_ledger(args.probes)
    with open(args.responses, encoding="utf-8") as fh:
        rows, _ = read_responses(fh)
    responses, _ = responses_from_rows(rows, probes)
    if args.target:
        wanted = {normalize_ip(t) for t in args.target}
        responses = [r for r in responses if r.probe.target_ip in wanted]
        missing = wanted - {r.probe.target_ip for r in responses}
        if missing:
            raise DataError(f"no matched packets for {', '.join(sorted(missing, key=ip_key))}")
    else:
        responses = sorted(responses, key=lambda r: (-r.packet_count, ip_key(r.probe.target_ip)))[: args.top]
    bin_us = int(args.bin_secs * 1_000_000)
    if bin_us <= 0:
        raise ConfigError("--bin-secs must be positive")
    hists = {f"{r.probe.protocol.value} {r.probe.target_ip}": timing_histogram(r, bin_us) for r in responses}
    out = Path(args.out)
    write_tsv_file(out, ("generator", "bin", "packets"),
                   [(label, i, n) for label, h in hists.items() for i, n in enumerate(h)],
                   [args.responses, args.probes])
    plot_dir = _plot_dir(args, out)
    if plot_dir and hists:
        plots.timing_figure(hists, plot_dir, stem=out.stem)
    return EXIT_OK


def cmd_attack(args) -> int:
    from . import plots

    if len(args.probes) != len(args.responses):
        raise ConfigError("give one --probes ledger per --responses file, in the same order")
    responses = defaultdict(list)
    totals = {}
    for resp_path, ledger_path in zip(args.responses, args.probes):
        probes = read_ledger(ledger_path)
        with open(resp_path, encoding="utf-8") as fh:
            rows, _ = read_responses(fh)
        resps, _ = responses_from_rows(rows, probes)
        protos = {p.protocol.value for p in probes} or {Path(resp_path).stem}
        label = "+".join(sorted(protos))
        if label in totals:
            label = f"{label}#{len(totals)}"
        responses[label].extend(resps)
        totals[label] = probe_totals(probes)
    tl = simulate_attack(responses, totals, args.repeat, args.period)
    pa, ba = tl.first_second_amplification()
    out = Path(args.out)
    comments = [
        f"protocols {','.join(sorted(tl.protocols))} (summed, assumes additive blowback)",
        f"probe_packets {tl.probe_packets} probe_bytes {tl.probe_bytes}",
        f"first_second_amplification packets={format_factor(pa)} bytes={format_factor(ba)}",
        f"skew_clamped {tl.skew_clamped}",
    ]
    if args.repeat > 1:
        comments.append(f"experimental repeat={args.repeat} period={args.period}s")
    write_tsv_file(out, ("second", "pps", "Bps"), tl.rows(), [*args.responses, *args.probes], comments)
    plot_dir = _plot_dir(args, out)
    if plot_dir:
        plots.attack_figure(tl, plot_dir, stem=out.stem)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .analysis import write_traceroutes
    from .synth import PRESETS, Scenario, generate_campaign, load_scenario, synth_traceroutes

    try:
        if args.scenario:
            scen = load_scenario(args.scenario)
        elif args.preset:
            unknown = [n for n in args.preset if n not in PRESETS]
            if unknown:
                raise ConfigError(f"unknown preset(s) {', '.join(unknown)}; known: {', '.join(PRESETS)}")
            scen = Scenario([PRESETS[name]() for name in args.preset])
        else:
            raise ConfigError("give --scenario FILE.toml or --preset NAME")
        rounds = scen.rounds if args.rounds is None else args.rounds
        noise = scen.noise_pps if args.noise_pps is None else args.noise_pps
        seed = scen.seed if args.seed is None else args.seed
        camp = generate_campaign(scen.specs, rounds, noise, seed, scen.config)
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad scenario: {exc}") from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth_rows = []
    for key in sorted(camp.ledgers, key=lambda k: (k[0].value, k[1])):
        proto, rid = key
        with open(out / f"ledger-{proto.value}-r{rid}.csv", "w", encoding="utf-8", newline="\n") as fh:
            write_probe_ledger(camp.ledgers[key], fh)
        if args.pcap:
            with open(out / f"trace-{proto.value}-r{rid}.pcap", "wb") as fh:
                write_pcap(camp.traces[key], fh)
        else:
            with open(out / f"trace-{proto.value}-r{rid}.pkt", "w", encoding="utf-8", newline="\n") as fh:
                write_packet_lines(camp.traces[key], fh)
        for ip, rec in sorted(camp.truth[key].items(), key=lambda kv: ip_key(kv[0])):
            truth_rows.append((ip, proto.value, rid, rec.packet_count, rec.byte_count, rec.klass.value,
                               ";".join(sorted(rec.member_ips, key=ip_key)) or "-"))
        log.info("%s round %d: %d probes, %d packets (%d noise)", proto.value, rid, len(camp.ledgers[key]),
                 len(camp.traces[key]), camp.noise[key])
    write_tsv_file(out / "truth.tsv", ("generator_ip", "protocol", "round", "packets", "bytes", "class", "members"),
                   truth_rows, [args.scenario] if args.scenario else ())
    with open(out / "traceroutes.txt", "w", encoding="utf-8", newline="\n") as fh:
        write_traceroutes(synth_traceroutes(scen.specs, seed), fh)
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {"jobs": args.jobs, "seed": args.seed, "output_dir": Path(args.out_dir) if args.out_dir else None}
    cfg = load_config(args.config, overrides)
    cfg.validate()
    if not args.log_level and not os.environ.get("BBKIT_LOG"):
        level = logging.getLevelName(cfg.log_level.upper())
        if isinstance(level, int):
            logging.getLogger().setLevel(level)
    manifest = run_pipeline(cfg)
    print(manifest)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbkit", description="Probe ledgers, response matching and blowback analysis.")
    parser.add_argument("--version", action="version", version=f"bbkit {__version__}")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default from BBKIT_LOG, else WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="generate a probe ledger")
    p.add_argument("--protocol", type=_protocol, required=True)
    p.add_argument("--targets", required=True, help="file with one IPv4 address per line, or 'full'")
    p.add_argument("--limit", type=int, help="cap on addresses for a full sweep")
    p.add_argument("--rate", type=float, help="probes per second (default depends on scan kind)")
    p.add_argument("--kind", choices=["full", "rescan"], default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-us", type=int, default=0, help="send time of the first probe")
    p.add_argument("--zone", default="scan.example", help="DNS qname suffix")
    p.add_argument("--probe-size", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--emit", action="store_true", help="also render probe packets into a pcap sink")
    p.add_argument("--allow-prefix", action="append", default=[], help="lab prefix emission may target (repeatable)")
    p.add_argument("--sink", help="pcap path for --emit (default: OUT.pcap)")
    p.add_argument("--src-ip", default="192.0.2.1")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("match", help="attribute received packets to probes")
    p.add_argument("--probes", required=True)
    p.add_argument("--packets", required=True, help="native packet lines or a pcap file")
    p.add_argument("--window-secs", type=float, default=600.0)
    p.add_argument("--ack-mode", default="either", choices=[m.value.lower() for m in AckMode])
    p.add_argument("--ephemeral-port", type=int, default=55000)
    p.add_argument("--capacity", type=int, default=10_000_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("classify", help="build per-generator profiles for one round")
    p.add_argument("--responses", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--threshold", "--blowback-threshold", type=int, default=BLOWBACK_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("summarize", help="per-round counts, amplification and packet-type tables")
    p.add_argument("--profiles", nargs="+", required=True)
    p.add_argument("--threshold", "--blowback-threshold", type=int, default=BLOWBACK_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("stability", help="blowback and active prevalence across rescans")
    p.add_argument("--profiles", nargs="+", required=True)
    p.add_argument("--threshold", "--blowback-threshold", type=int, default=BLOWBACK_THRESHOLD)
    p.add_argument("--out", required=True)
    _add_plot_args(p)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("concentration", help="cumulative packets of the top-X generators")
    p.add_argument("--profiles", nargs="+", required=True)
    p.add_argument("--protocol", type=_protocol, required=True)
    p.add_argument("--rank-round", type=int, default=0)
    p.add_argument("--all", action="store_true", help="keep generators that went silent in some round")
    p.add_argument("--bbgs-only", action="store_true", help="only generators that blew back in the rank round")
    p.add_argument("--threshold", "--blowback-threshold", type=int, default=BLOWBACK_THRESHOLD)
    p.add_argument("--out", required=True)
    _add_plot_args(p)
    p.set_defaults(func=cmd_concentration)

    p = sub.add_parser("origins", help="dominant ASN and country by generator")
    p.add_argument("--profiles", nargs="+", required=True)
    p.add_argument("--asn", required=True, help="CIDR,ASN lines")
    p.add_argument("--geo", required=True, help="CIDR,country lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_origins)

    p = sub.add_parser("loops", help="routing loop prevalence in traceroute paths")
    p.add_argument("--paths", required=True)
    p.add_argument("--threshold", type=int, default=3, help="occurrences of one router that make a loop")
    p.add_argument("--out", required=True)
    _add_plot_args(p)
    p.set_defaults(func=cmd_loops)

    p = sub.add_parser("timing", help="packets per second after the probe")
    p.add_argument("--responses", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--target", action="append", help="generator address (repeatable; default: the busiest)")
    p.add_argument("--top", type=int, default=8)
    p.add_argument("--bin-secs", type=float, default=1.0)
    p.add_argument("--out", required=True)
    _add_plot_args(p)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("attack-sim", help="victim bandwidth if all probes were sent at once")
    p.add_argument("--responses", nargs="+", required=True)
    p.add_argument("--probes", nargs="+", required=True, help="the ledgers behind each responses file")
    p.add_argument("--repeat", type=int, default=1, help="experimental: probe the targets N times")
    p.add_argument("--period", type=int, default=0, help="experimental: seconds between repeats")
    p.add_argument("--out", required=True)
    _add_plot_args(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("synth", help="synthesize ledgers, traces and ground truth")
    p.add_argument("--scenario", help="scenario TOML")
    p.add_argument("--preset", action="append", help="named generator preset (repeatable)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--noise-pps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pcap", action="store_true", help="write traces as pcap instead of packet lines")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the whole pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, help="worker processes for matching")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out-dir", help="override output.dir")
    p.set_defaults(func=cmd_run)
    return parser


def _setup_logging(level: Optional[str]) -> None:
    name = (level or os.environ.get("BBKIT_LOG") or "WARNING").upper()
    value = logging.getLevelName(name)
    if not isinstance(value, int):
        value = logging.WARNING
    logging.basicConfig(level=value, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, EmissionRefused, FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (DataError, FormatError, UnsortedInputError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
