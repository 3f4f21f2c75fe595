"""libpcap reading and writing, plus the IPv4 wire codecs behind it.

Only the classic libpcap container is handled (microsecond magic, and the
nanosecond variant converted down). Link types: Ethernet, raw IP, Linux
cooked capture and BSD loopback.
"""

from __future__ import annotations

import logging
import re
import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional

from .model import (
    ICMP_ERROR_TYPES,
    PAYLOAD_TEXT_CAP,
    FormatError,
    PacketRecord,
    Transport,
)

log = logging.getLogger(__name__)

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228

_IPV4 = struct.Struct("!BBHHHBBH4s4s")

_NAME_LABEL = re.compile(rb"^[!-~]{1,63}$")


@dataclass
class PcapStats:
    frames: int = 0
    corrupt: int = 0
    non_ipv4: int = 0


def _ntoa(b: bytes) -> str:
    return socket.inet_ntoa(b)


def _aton(ip: str) -> bytes:
    return socket.inet_aton(ip)


def checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


# ------------------------------------------------------------------ DNS names


def decode_dns_qname(msg: bytes) -> Optional[bytes]:
    """Dotted question name of a DNS message, or None if it does not parse."""
    if len(msg) < 13 or struct.unpack_from("!H", msg, 4)[0] == 0:
        return None
    labels = []
    pos = 12
    total = 0
    while True:
        if pos >= len(msg):
            return None
        n = msg[pos]
        if n == 0:
            break
        if n > 63:
            return None
        label = msg[pos + 1 : pos + 1 + n]
        if len(label) < n or not _NAME_LABEL.match(label):
            return None
        labels.append(label)
        total += n + 1
        if total > 255:
            return None
        pos += n + 1
    if not labels:
        return None
    return b".".join(labels)


def is_name_like(text: bytes) -> bool:
    if not text or len(text) > 253:
        return False
    return all(_NAME_LABEL.match(label) for label in text.split(b"."))


def encode_dns_message(name: bytes, response: bool = True, qtype: int = 1) -> bytes:
    flags = 0x8180 if response else 0x0100
    header = struct.pack("!HHHHHH", 0x1234, flags, 1, 0, 0, 0)
    wire = b"".join(bytes([len(label)]) + label for label in name.split(b".")) + b"\0"
    return header + wire + struct.pack("!HH", qtype, 1)


def payload_excerpt(data: bytes) -> Optional[bytes]:
    if not data:
        return None
    name = decode_dns_qname(data)
    if name is not None:
        return name[:PAYLOAD_TEXT_CAP]
    return data[:PAYLOAD_TEXT_CAP]


# ------------------------------------------------------------- IPv4 decoding


def decode_ipv4(data: bytes, recv_time: int, size: int) -> PacketRecord:
    """Decode one IPv4 datagram into a PacketRecord.

    Raises FormatError when the headers are too short to be trusted.
    """
    if len(data) < 20:
        raise FormatError("short IPv4 header")
    vihl, _tos, total_len, _ident, frag, _ttl, proto, _csum, src, dst = _IPV4.unpack_from(data)
    if vihl >> 4 != 4:
        raise FormatError("not IPv4")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20 or len(data) < ihl:
        raise FormatError("bad IHL")
    end = min(len(data), total_len) if total_len >= ihl else len(data)
    body = data[ihl:end]
    src_ip, dst_ip = _ntoa(src), _ntoa(dst)
    base = dict(recv_time=recv_time, src_ip=src_ip, dst_ip=dst_ip, size=size)

    if frag & 0x1FFF:
        # non-first fragment: no transport header to read
        return PacketRecord(transport=Transport.OTHER, **base)
    if proto == 6:
        if len(body) < 4:
            raise FormatError("truncated TCP header")
        sport, dport = struct.unpack_from("!HH", body)
        flags = ack = None
        payload = None
        if len(body) >= 14:
            ack = struct.unpack_from("!I", body, 8)[0]
            off = (body[12] >> 4) * 4
            flags = body[13]
            if off >= 20:
                payload = payload_excerpt(body[off:])
        return PacketRecord(
            transport=Transport.TCP, src_port=sport, dst_port=dport,
            tcp_flags=flags, tcp_ack=ack, payload_text=payload, **base,
        )
    if proto == 17:
        if len(body) < 4:
            raise FormatError("truncated UDP header")
        sport, dport = struct.unpack_from("!HH", body)
        return PacketRecord(
            transport=Transport.UDP, src_port=sport, dst_port=dport,
            payload_text=payload_excerpt(body[8:]), **base,
        )
    if proto == 1:
        if len(body) < 2:
            raise FormatError("truncated ICMP header")
        itype, icode = body[0], body[1]
        echo_id = quoted = payload = None
        if itype in (0, 8) and len(body) >= 6:
            echo_id = struct.unpack_from("!H", body, 4)[0]
            payload = payload_excerpt(body[8:])
        elif itype in ICMP_ERROR_TYPES:
            quoted, payload = _decode_quotation(body[8:])
        return PacketRecord(
            transport=Transport.ICMP, icmp_type=itype, icmp_code=icode,
            icmp_echo_id=echo_id, quoted_dst_ip=quoted, payload_text=payload, **base,
        )
    return PacketRecord(transport=Transport.OTHER, **base)


def _decode_quotation(inner: bytes) -> tuple[Optional[str], Optional[bytes]]:
    # A quotation shorter than a full inner header yields nothing.
    if len(inner) < 20 or inner[0] >> 4 != 4:
        return None, None
    ihl = (inner[0] & 0x0F) * 4
    if ihl < 20 or len(inner) < ihl:
        return None, None
    quoted = _ntoa(inner[16:20])
    payload = None
    if inner[9] == 17 and len(inner) > ihl + 8:
        payload = payload_excerpt(inner[ihl + 8 :])
    return quoted, payload


# ------------------------------------------------------------- IPv4 encoding


def ipv4_packet(src: str, dst: str, proto: int, body: bytes, total_len: Optional[int] = None, ttl: int = 64) -> bytes:
    length = total_len if total_len is not None else 20 + len(body)
    header = _IPV4.pack(0x45, 0, length, 0, 0, ttl, proto, 0, _aton(src), _aton(dst))
    header = header[:10] + struct.pack("!H", checksum(header)) + header[12:]
    return header + body


def tcp_segment(sport: int, dport: int, seq: int, ack: int, flags: int, payload: bytes = b"") -> bytes:
    return struct.pack("!HHIIBBHHH", sport, dport, seq, ack, 5 << 4, flags, 65535, 0, 0) + payload


def udp_datagram(sport: int, dport: int, payload: bytes = b"") -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


def icmp_message(itype: int, code: int, rest: bytes, payload: bytes = b"") -> bytes:
    msg = struct.pack("!BBH", itype, code, 0) + rest + payload
    return msg[:2] + struct.pack("!H", checksum(msg)) + msg[4:]


def _excerpt_bytes(text: Optional[bytes]) -> bytes:
    if not text:
        return b""
    if is_name_like(text):
        return encode_dns_message(text)
    return text


def encode_packet(rec: PacketRecord) -> bytes:
    """Build IPv4 bytes that decode back to ``rec`` (its size aside).

    The datagram's total-length field carries ``rec.size``; the bytes
    themselves may be shorter, as in a snaplen-truncated capture.
    """
    t = rec.transport
    if t is Transport.TCP:
        body = tcp_segment(rec.src_port, rec.dst_port, 0, rec.tcp_ack or 0, rec.tcp_flags or 0,
                           _excerpt_bytes(rec.payload_text))
        proto = 6
    elif t is Transport.UDP:
        body = udp_datagram(rec.src_port, rec.dst_port, _excerpt_bytes(rec.payload_text))
        proto = 17
    elif t is Transport.ICMP:
        proto = 1
        itype, code = rec.icmp_type or 0, rec.icmp_code or 0
        if itype in (0, 8):
            rest = struct.pack("!HH", rec.icmp_echo_id or 0, 0)
            body = icmp_message(itype, code, rest, _excerpt_bytes(rec.payload_text))
        elif itype in ICMP_ERROR_TYPES and rec.quoted_dst_ip is not None:
            inner_payload = _excerpt_bytes(rec.payload_text)
            dport = 53 if rec.payload_text and is_name_like(rec.payload_text) else 0
            inner = ipv4_packet(rec.dst_ip, rec.quoted_dst_ip, 17,
                                udp_datagram(55000, dport, inner_payload))
            body = icmp_message(itype, code, b"\0\0\0\0", inner)
        else:
            body = icmp_message(itype, code, b"\0\0\0\0")
    else:
        proto = 47
        body = b""
    data = ipv4_packet(rec.src_ip, rec.dst_ip, proto, body, total_len=rec.size)
    if len(data) > rec.size:
        raise ValueError(f"record size {rec.size} smaller than its {len(data)}-byte encoding")
    return data


# ------------------------------------------------------------ pcap container


def _link_payload(linktype: int, frame: bytes) -> Optional[bytes]:
    """IPv4 bytes inside a link-layer frame, or None if not IPv4."""
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            raise FormatError("short Ethernet frame")
        etype = struct.unpack_from("!H", frame, 12)[0]
        off = 14
        while etype in (0x8100, 0x88A8) and len(frame) >= off + 4:
            etype = struct.unpack_from("!H", frame, off + 2)[0]
            off += 4
        return frame[off:] if etype == 0x0800 else None
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4):
        if not frame:
            raise FormatError("empty frame")
        return frame if frame[0] >> 4 == 4 else None
    if linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            raise FormatError("short SLL frame")
        return frame[16:] if struct.unpack_from("!H", frame, 14)[0] == 0x0800 else None
    if linktype == LINKTYPE_NULL:
        if len(frame) < 4:
            raise FormatError("short loopback frame")
        fam = struct.unpack_from("<I", frame)[0]
        if fam not in (2, 0x02000000):
            return None
        return frame[4:]
    raise FormatError(f"unsupported link type {linktype}")


def iter_pcap(stream: BinaryIO, stats: Optional[PcapStats] = None) -> Iterator[PacketRecord]:
    """Yield PacketRecords from a libpcap stream.

    Corrupt frames are skipped and counted in ``stats``; a bad global header
    raises FormatError.
    """
    stats = stats if stats is not None else PcapStats()
    head = stream.read(24)
    if len(head) < 24:
        raise FormatError("not a pcap file (short header)")
    if head[:4] == b"\x0a\x0d\x0d\x0a":
        raise FormatError("pcapng is not supported")
    magic = struct.unpack("<I", head[:4])[0]
    if magic in (MAGIC_US, MAGIC_NS):
        endian = "<"
    else:
        magic = struct.unpack(">I", head[:4])[0]
        if magic not in (MAGIC_US, MAGIC_NS):
            raise FormatError("not a pcap file (bad magic)")
        endian = ">"
    nanos = magic == MAGIC_NS
    linktype = struct.unpack(endian + "I", head[20:24])[0] & 0x0FFFFFFF
    rec = struct.Struct(endian + "IIII")
    while True:
        rh = stream.read(16)
        if not rh:
            return
        if len(rh) < 16:
            stats.corrupt += 1
            return
        ts_sec, ts_frac, incl, orig = rec.unpack(rh)
        frame = stream.read(incl)
        stats.frames += 1
        if len(frame) < incl:
            stats.corrupt += 1
            return
        usec = ts_frac // 1000 if nanos else ts_frac
        try:
            ip = _link_payload(linktype, frame)
            if ip is None:
                stats.non_ipv4 += 1
                continue
            link_overhead = len(frame) - len(ip)
            size = orig - link_overhead if linktype == LINKTYPE_NULL else orig
            yield decode_ipv4(ip, ts_sec * 1_000_000 + usec, max(size, 1))
        except FormatError as exc:
            log.debug("frame %d skipped: %s", stats.frames, exc)
            stats.corrupt += 1


def write_pcap(packets: Iterable[PacketRecord], out: BinaryIO) -> int:
    """Write records as a raw-IP libpcap file; the record size becomes orig_len."""
    out.write(struct.pack("<IHHiIII", MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_RAW))
    n = 0
    for p in packets:
        data = encode_packet(p)
        out.write(struct.pack("<IIII", p.recv_time // 1_000_000, p.recv_time % 1_000_000, len(data), p.size))
        out.write(data)
        n += 1
    return n


def write_raw_pcap(frames: Iterable[tuple[int, bytes]], out: BinaryIO) -> int:
    """Write (time_us, ip_bytes) frames verbatim as a raw-IP pcap."""
    out.write(struct.pack("<IHHiIII", MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_RAW))
    n = 0
    for t, data in frames:
        out.write(struct.pack("<IIII", t // 1_000_000, t % 1_000_000, len(data), len(data)))
        out.write(data)
        n += 1
    return n
