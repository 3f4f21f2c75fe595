"""Tabular outputs and the matched-response interchange file.

Every TSV written here has a header row and ends with a comment line naming
the tool version and the sha256 of each input, so a table can be traced
back to exactly what produced it.
"""

from __future__ import annotations

import hashlib
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Optional, Sequence

from . import __version__
from .classify import DataError, GeneratorProfile, PacketKind, ResponseClass, RoundRecord, packet_kind
from .matcher import MatchReport
from .model import FormatError, MatchedResponse, MatchRule, PacketRecord, ProbeProtocol, ProbeRecord, Transport, ip_key, normalize_ip


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance_line(inputs: Iterable = ()) -> str:
    parts = [f"{Path(p).name}={file_digest(p)}" for p in inputs]
    return f"# bbkit {__version__} inputs: " + (" ".join(parts) if parts else "-")


def fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_tsv(
    out: IO[str],
    header: Sequence[str],
    rows: Iterable[Sequence],
    inputs: Iterable = (),
    comments: Iterable[str] = (),
) -> None:
    out.write("\t".join(header) + "\n")
    for row in rows:
        out.write("\t".join(fmt(v) for v in row) + "\n")
    for c in comments:
        out.write(f"# {c}\n")
    out.write(provenance_line(inputs) + "\n")


def write_tsv_file(path, header, rows, inputs=(), comments=()) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_tsv(fh, header, rows, inputs, comments)
    return path


def read_tsv(stream: Iterable[str]) -> tuple[list[str], list[list[str]], list[str]]:
    """(header, rows, comment lines without the leading '# ')."""
    header: Optional[list[str]] = None
    rows: list[list[str]] = []
    comments: list[str] = []
    for line in stream:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif header is None:
            header = line.split("\t")
        else:
            rows.append(line.split("\t"))
    return header or [], rows, comments


# ------------------------------------------------------ matched responses


@dataclass(frozen=True)
class MatchedRow:
    probe_target: str
    protocol: ProbeProtocol
    rule: MatchRule
    recv_time: int
    src_ip: str
    size: int
    kind: Optional[PacketKind] = None


def write_responses(report: MatchReport, out: IO[str], inputs: Iterable = ()) -> int:
    """One comma-separated line per matched packet, then a summary footer."""
    n = 0
    for resp in report.responses:
        probe = resp.probe
        prefix = f"{probe.target_ip},{probe.protocol.value},"
        for pkt, rule in resp.packets:
            kind = packet_kind(pkt, probe)
            out.write(f"{prefix}{rule.value},{pkt.recv_time},{pkt.src_ip},{pkt.size},{kind.value}\n")
            n += 1
    for line in response_footer(report):
        out.write(f"# {line}\n")
    out.write(provenance_line(inputs) + "\n")
    return n


def response_footer(report: MatchReport) -> list[str]:
    lines = [f"rule {r.value} {report.rule_counts.get(r, 0)}" for r in MatchRule]
    lines += [f"ack_form {k} {report.ack_forms.get(k, 0)}" for k in ("exact", "plus_one")]
    lines += [
        f"probes {report.probes}",
        f"matched {report.matched_count} {report.matched_bytes}",
        f"unmatched {report.unmatched_count} {report.unmatched_bytes}",
        f"other_transport {report.other_transport}",
        f"evicted {report.evicted}",
        f"matched_fraction {report.matched_fraction:.6f}",
    ]
    return lines


def parse_response_line(line: str) -> MatchedRow:
    parts = line.strip().split(",")
    if len(parts) < 6:
        raise FormatError(f"expected at least 6 fields, got {len(parts)}")
    try:
        kind = PacketKind(parts[6]) if len(parts) > 6 and parts[6] not in ("", "-") else None
        return MatchedRow(
            probe_target=normalize_ip(parts[0]),
            protocol=ProbeProtocol(parts[1].upper()),
            rule=MatchRule(parts[2].upper()),
            recv_time=int(parts[3]),
            src_ip=normalize_ip(parts[4]),
            size=int(parts[5]),
            kind=kind,
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def read_responses(stream: Iterable[str]) -> tuple[list[MatchedRow], dict[str, str]]:
    """Rows plus the footer as a key -> rest-of-line mapping."""
    rows = []
    footer: dict[str, str] = {}
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, rest = line[1:].strip().partition(" ")
            if key in ("rule", "ack_form"):
                sub, _, val = rest.partition(" ")
                footer[f"{key} {sub}"] = val
            else:
                footer[key] = rest
            continue
        try:
            rows.append(parse_response_line(line))
        except FormatError as exc:
            raise FormatError(f"responses line {lineno}: {exc}") from exc
    return rows, footer


def responses_from_rows(
    rows: Iterable[MatchedRow],
    probes: Iterable[ProbeRecord],
) -> tuple[list[MatchedResponse], dict[str, Counter]]:
    """Rejoin rows with their probes.

    Rebuilt packets keep time, source and size only (transport OTHER); kind
    counts per target come back separately for the classifier.
    """
    by_key: dict[tuple[str, ProbeProtocol], ProbeRecord] = {}
    for p in probes:
        key = (p.target_ip, p.protocol)
        if key in by_key:
            raise DataError(f"target {p.target_ip} probed twice for {p.protocol.value}")
        by_key[key] = p
    grouped: dict[tuple[str, ProbeProtocol], list] = defaultdict(list)
    kinds: dict[str, Counter] = defaultdict(Counter)
    for row in rows:
        key = (row.probe_target, row.protocol)
        if key not in by_key:
            raise DataError(f"response for {row.probe_target} {row.protocol.value} has no probe in the ledger")
        pkt = PacketRecord(row.recv_time, row.src_ip, "0.0.0.0", Transport.OTHER, row.size)
        grouped[key].append((pkt, row.rule))
        if row.kind is not None:
            kinds[row.probe_target][row.kind] += 1
    out = []
    for key, pkts in grouped.items():
        pkts.sort(key=lambda pr: pr[0].recv_time)
        out.append(MatchedResponse(by_key[key], tuple(pkts)))
    out.sort(key=lambda r: (r.probe.send_time, ip_key(r.probe.target_ip)))
    return out, dict(kinds)


# ----------------------------------------------------------------- profiles

PROFILE_HEADER = ("generator_ip", "protocol", "round", "packets", "bytes", "class", "members", "kinds")


def profile_rows(profiles: Iterable[GeneratorProfile]) -> list[tuple]:
    rows = []
    for prof in profiles:
        for rid in sorted(prof.rounds):
            rec = prof.rounds[rid]
            members = ";".join(sorted(rec.member_ips, key=ip_key)) or "-"
            kinds = ";".join(f"{k.value}={rec.kinds[k]}" for k in PacketKind if rec.kinds.get(k)) or "-"
            rows.append((prof.generator_ip, prof.protocol.value, rid, rec.packet_count, rec.byte_count,
                         rec.klass.value, members, kinds))
    return rows


def write_profiles(
    path,
    profiles: Iterable[GeneratorProfile],
    probe_totals: Mapping[tuple[ProbeProtocol, int], tuple[int, int]],
    inputs: Iterable = (),
) -> Path:
    comments = [f"probes {p.value} {rid} {n} {b}" for (p, rid), (n, b) in sorted(probe_totals.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))]
    return write_tsv_file(path, PROFILE_HEADER, profile_rows(profiles), inputs, comments)


def read_profiles(stream: Iterable[str]) -> tuple[list[GeneratorProfile], dict[tuple[ProbeProtocol, int], tuple[int, int]]]:
    header, rows, comments = read_tsv(stream)
    if tuple(header[: len(PROFILE_HEADER)]) != PROFILE_HEADER:
        raise FormatError("not a profiles table (header mismatch)")
    out: dict[tuple[str, ProbeProtocol], GeneratorProfile] = {}
    for n, row in enumerate(rows, 2):
        try:
            ip, proto, rid, pk, by, klass, members, kinds = row[:8]
            proto_v = ProbeProtocol(proto)
            kind_counts = {}
            if kinds != "-":
                for item in kinds.split(";"):
                    k, _, v = item.partition("=")
                    kind_counts[PacketKind(k)] = int(v)
            rec = RoundRecord(
                round_id=int(rid),
                packet_count=int(pk),
                byte_count=int(by),
                member_ips=frozenset() if members == "-" else frozenset(members.split(";")),
                klass=ResponseClass(klass),
                kinds=kind_counts,
            )
        except ValueError as exc:
            raise FormatError(f"profiles row {n}: {exc}") from exc
        prof = out.setdefault((ip, proto_v), GeneratorProfile(ip, proto_v))
        if rec.round_id in prof.rounds:
            raise DataError(f"round {rec.round_id} listed twice for {ip} {proto}")
        prof.rounds[rec.round_id] = rec
    totals = {}
    for c in comments:
        parts = c.split()
        if len(parts) == 5 and parts[0] == "probes":
            totals[(ProbeProtocol(parts[1]), int(parts[2]))] = (int(parts[3]), int(parts[4]))
    profiles = sorted(out.values(), key=lambda g: (g.protocol.value, ip_key(g.generator_ip)))
    return profiles, totals


def probe_totals(probes: Iterable[ProbeRecord]) -> tuple[int, int]:
    n = b = 0
    for p in probes:
        n += 1
        b += p.probe_size
    return n, b


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path


def digest_manifest(root, manifest, exclude=frozenset()) -> Path:
    """List every file under ``root`` with size and sha256, sorted by path."""
    root = Path(root)
    manifest = Path(manifest)
    rows = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if path == manifest or rel in exclude:
            continue
        rows.append((rel, path.stat().st_size, file_digest(path)))
    return write_tsv_file(manifest, ("path", "bytes", "sha256"), rows)
