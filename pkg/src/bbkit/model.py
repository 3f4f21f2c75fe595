"""Domain records shared by every stage, and their line-oriented formats.

Probe ledgers and native packet traces are plain text, one record per line.
Timestamps are integer microseconds since the epoch; addresses are dotted
IPv4 strings.
"""

from __future__ import annotations

import base64
import enum
import ipaddress
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import IO, Iterable, Iterator, NamedTuple, Optional, Union

log = logging.getLogger(__name__)

PAYLOAD_TEXT_CAP = 512
EPHEMERAL_PORT = 55000


class FormatError(ValueError):
    """A record could not be parsed or violates a record invariant."""


class ProbeProtocol(str, enum.Enum):
    DNS = "DNS"
    ICMP = "ICMP"
    NTP = "NTP"
    TCP25 = "TCP25"
    TCP80 = "TCP80"
    TCP443 = "TCP443"

    @property
    def tcp_port(self) -> Optional[int]:
        return _TCP_PORTS.get(self)

    @property
    def is_tcp(self) -> bool:
        return self in _TCP_PORTS

    def __str__(self) -> str:
        return self.value


_TCP_PORTS = {ProbeProtocol.TCP25: 25, ProbeProtocol.TCP80: 80, ProbeProtocol.TCP443: 443}


class Transport(str, enum.Enum):
    ICMP = "ICMP"
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"

    def __str__(self) -> str:
        return self.value


class MatchRule(str, enum.Enum):
    PS1 = "PS1"
    PS2 = "PS2"
    PS3 = "PS3"
    PA1 = "PA1"
    PA2 = "PA2"

    def __str__(self) -> str:
        return self.value


# TCP flag bits, low to high as on the wire.
FIN, SYN, RST, PSH, ACK, URG, ECE, CWR = (1 << i for i in range(8))
SYNACK = SYN | ACK
_FLAG_LETTERS = "FSRPAUEC"

# ICMP types that carry a quotation of the offending datagram.
ICMP_ECHO_REPLY = 0
ICMP_UNREACHABLE = 3
ICMP_REDIRECT = 5
ICMP_ECHO_REQUEST = 8
ICMP_TIME_EXCEEDED = 11
ICMP_ERROR_TYPES = frozenset({3, 4, 5, 11, 12})


def flags_to_text(flags: Optional[int]) -> str:
    if flags is None:
        return "-"
    return "".join(c for i, c in enumerate(_FLAG_LETTERS) if flags & (1 << i)) or "0"


def text_to_flags(text: str) -> Optional[int]:
    if text == "-":
        return None
    if text == "0":
        return 0
    value = 0
    for c in text:
        i = _FLAG_LETTERS.find(c)
        if i < 0:
            raise FormatError(f"unknown TCP flag {c!r}")
        value |= 1 << i
    return value


@lru_cache(maxsize=1 << 16)
def normalize_ip(text: str) -> str:
    """Return the canonical dotted form of an IPv4 address.

    IPv6 input raises FormatError with an explicit message.
    """
    if ":" in text:
        raise FormatError(f"IPv6 address {text!r} is not supported (IPv4 only)")
    try:
        return str(ipaddress.IPv4Address(text))
    except ValueError as exc:
        raise FormatError(f"bad IPv4 address {text!r}") from exc


@lru_cache(maxsize=1 << 16)
def ip_key(ip: str) -> int:
    """Integer value of a dotted IPv4 address, for numeric ordering."""
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


Token = Union[str, int, None]


@dataclass(frozen=True, slots=True)
class ProbeRecord:
    """One sent probe.

    ``token`` is the lowercase query name for DNS, the echo id for ICMP, the
    initial sequence number for the TCP probes and ``None`` for NTP.
    """

    send_time: int
    target_ip: str
    protocol: ProbeProtocol
    token: Token
    probe_size: int

    def __post_init__(self) -> None:
        if self.probe_size <= 0:
            raise FormatError("probe_size must be positive")
        proto = self.protocol
        tok = self.token
        if proto is ProbeProtocol.DNS:
            if not isinstance(tok, str) or not tok:
                raise FormatError("DNS probe needs a non-empty qname token")
            if tok != tok.lower():
                object.__setattr__(self, "token", tok.lower())
        elif proto is ProbeProtocol.ICMP:
            if not isinstance(tok, int) or not 0 <= tok <= 0xFFFF:
                raise FormatError("ICMP probe needs a 16-bit echo id token")
        elif proto is ProbeProtocol.NTP:
            if tok is not None:
                raise FormatError("NTP probes carry no token")
        elif not isinstance(tok, int) or not 0 <= tok <= 0xFFFFFFFF:
            raise FormatError("TCP probe needs a 32-bit sequence number token")


class PacketRecord(NamedTuple):
    """One received packet, normalized.

    Port fields are set for TCP/UDP only, ICMP fields for ICMP only.
    ``quoted_dst_ip`` comes from an ICMP error quotation; ``payload_text`` is
    a searchable excerpt (DNS name material or raw payload bytes).
    """

    recv_time: int
    src_ip: str
    dst_ip: str
    transport: Transport
    size: int
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    tcp_flags: Optional[int] = None
    tcp_ack: Optional[int] = None
    icmp_type: Optional[int] = None
    icmp_code: Optional[int] = None
    icmp_echo_id: Optional[int] = None
    quoted_dst_ip: Optional[str] = None
    payload_text: Optional[bytes] = None


def check_packet(p: PacketRecord) -> PacketRecord:
    """Validate the cross-field invariants of a packet record."""
    if p.size <= 0:
        raise FormatError("packet size must be positive")
    if p.transport in (Transport.TCP, Transport.UDP):
        if p.src_port is None or p.dst_port is None:
            raise FormatError(f"{p.transport} packet without ports")
    elif p.src_port is not None or p.dst_port is not None:
        raise FormatError(f"{p.transport} packet with ports set")
    if p.quoted_dst_ip is not None and not (
        p.transport is Transport.ICMP and p.icmp_type in ICMP_ERROR_TYPES
    ):
        raise FormatError("quoted_dst_ip only allowed on ICMP error messages")
    if p.payload_text is not None and len(p.payload_text) > PAYLOAD_TEXT_CAP:
        return p._replace(payload_text=p.payload_text[:PAYLOAD_TEXT_CAP])
    return p


@dataclass(frozen=True)
class MatchedResponse:
    """A probe and every packet attributed to it, ordered by arrival."""

    probe: ProbeRecord
    packets: tuple[tuple[PacketRecord, MatchRule], ...] = ()

    @property
    def packet_count(self) -> int:
        return len(self.packets)

    @property
    def byte_count(self) -> int:
        return sum(p.size for p, _ in self.packets)

    def responder_group(self) -> "ResponderGroup":
        return ResponderGroup(
            generator_ip=self.probe.target_ip,
            member_ips=frozenset(p.src_ip for p, _ in self.packets),
            packet_count=self.packet_count,
            byte_count=self.byte_count,
        )


@dataclass(frozen=True)
class ResponderGroup:
    generator_ip: str
    member_ips: frozenset[str] = field(default_factory=frozenset)
    packet_count: int = 0
    byte_count: int = 0


# ---------------------------------------------------------------- ledger I/O


def format_token(probe: ProbeRecord) -> str:
    proto = probe.protocol
    if proto is ProbeProtocol.DNS:
        return f"qname={probe.token}"
    if proto is ProbeProtocol.ICMP:
        return f"icmpid={probe.token}"
    if proto is ProbeProtocol.NTP:
        return "-"
    return f"seq={probe.token}"


def format_probe(probe: ProbeRecord) -> str:
    return (
        f"{probe.send_time},{probe.target_ip},{probe.protocol.value},"
        f"{format_token(probe)},{probe.probe_size}"
    )


def _parse_token(text: str) -> Token:
    if text == "-":
        return None
    key, sep, value = text.partition("=")
    if not sep:
        raise FormatError(f"bad token {text!r}")
    if key == "qname":
        return value
    if key in ("icmpid", "seq"):
        return int(value)
    raise FormatError(f"unknown token kind {key!r}")


def parse_probe_line(line: str) -> ProbeRecord:
    fields = line.strip().split(",")
    if len(fields) < 5:
        raise FormatError(f"expected 5 fields, got {len(fields)}")
    try:
        proto = ProbeProtocol(fields[2])
    except ValueError as exc:
        raise FormatError(f"unknown protocol {fields[2]!r}") from exc
    token = _parse_token(fields[3])
    if proto.is_tcp and not fields[3].startswith("seq="):
        raise FormatError("TCP probe token must be seq=")
    if proto is ProbeProtocol.ICMP and not fields[3].startswith("icmpid="):
        raise FormatError("ICMP probe token must be icmpid=")
    try:
        return ProbeRecord(
            send_time=int(fields[0]),
            target_ip=normalize_ip(fields[1]),
            protocol=proto,
            token=token,
            probe_size=int(fields[4]),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from exc


def iter_probe_ledger(stream: Iterable[str], rejects: Optional[list] = None) -> Iterator[ProbeRecord]:
    """Yield probes from ledger lines; malformed lines are skipped.

    Each rejected line number is appended to ``rejects`` when given.
    Blank lines and ``#`` comments are ignored.
    """
    for lineno, line in enumerate(stream, 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            yield parse_probe_line(line)
        except FormatError as exc:
            log.debug("ledger line %d rejected: %s", lineno, exc)
            if rejects is not None:
                rejects.append(lineno)


def parse_probe_ledger(stream: Iterable[str]) -> tuple[list[ProbeRecord], int]:
    """Parse a whole ledger. Returns the probes in file order and the reject count."""
    rejects: list[int] = []
    records = list(iter_probe_ledger(stream, rejects))
    if rejects:
        log.warning("%d malformed ledger line(s) skipped", len(rejects))
    return records, len(rejects)


def write_probe_ledger(probes: Iterable[ProbeRecord], out: IO[str]) -> int:
    n = 0
    for p in probes:
        out.write(format_probe(p))
        out.write("\n")
        n += 1
    return n


# ---------------------------------------------------------- packet line I/O


def _opt(value) -> str:
    return "-" if value is None else str(value)


def format_packet(p: PacketRecord) -> str:
    payload = "-" if p.payload_text is None else base64.b64encode(p.payload_text).decode("ascii")
    return ",".join(
        (
            str(p.recv_time),
            p.src_ip,
            p.dst_ip,
            p.transport.value,
            str(p.size),
            _opt(p.src_port),
            _opt(p.dst_port),
            flags_to_text(p.tcp_flags),
            _opt(p.tcp_ack),
            _opt(p.icmp_type),
            _opt(p.icmp_code),
            _opt(p.icmp_echo_id),
            _opt(p.quoted_dst_ip),
            payload,
        )
    )


def _int_or_none(text: str) -> Optional[int]:
    return None if text == "-" else int(text)


def parse_packet_line(line: str) -> PacketRecord:
    f = line.strip().split(",")
    if len(f) < 14:
        raise FormatError(f"expected 14 fields, got {len(f)}")
    try:
        transport = Transport(f[3])
    except ValueError:
        transport = Transport.OTHER
    try:
        rec = PacketRecord(
            recv_time=int(f[0]),
            src_ip=normalize_ip(f[1]),
            dst_ip=normalize_ip(f[2]),
            transport=transport,
            size=int(f[4]),
            src_port=_int_or_none(f[5]),
            dst_port=_int_or_none(f[6]),
            tcp_flags=text_to_flags(f[7]),
            tcp_ack=_int_or_none(f[8]),
            icmp_type=_int_or_none(f[9]),
            icmp_code=_int_or_none(f[10]),
            icmp_echo_id=_int_or_none(f[11]),
            quoted_dst_ip=None if f[12] == "-" else normalize_ip(f[12]),
            payload_text=None if f[13] == "-" else base64.b64decode(f[13], validate=True),
        )
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return check_packet(rec)


def iter_packet_lines(stream: Iterable[str], rejects: Optional[list] = None) -> Iterator[PacketRecord]:
    for lineno, line in enumerate(stream, 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            yield parse_packet_line(line)
        except FormatError as exc:
            log.debug("packet line %d rejected: %s", lineno, exc)
            if rejects is not None:
                rejects.append(lineno)


def write_packet_lines(packets: Iterable[PacketRecord], out: IO[str]) -> int:
    n = 0
    for p in packets:
        out.write(format_packet(p))
        out.write("\n")
        n += 1
    return n
