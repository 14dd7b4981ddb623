"""Classic libpcap reader that keeps QUIC-over-UDP packets of one connection.

Only the classic format is handled (no pcapng). Link layers: Ethernet
(optionally 802.1Q tagged) and raw IP. Timestamps are kept as integer
nanoseconds so window and bin edges can be computed exactly downstream.
"""
from __future__ import annotations

import enum
import io
import ipaddress
import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Optional, Union

logger = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = (12, 101, 228, 229)

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = (0x8100, 0x88A8)

IPPROTO_UDP = 17
_IPV6_EXT_HEADERS = (0, 43, 60)
_IPV6_FRAGMENT = 44

Endpoint = tuple[str, int]


class PcapError(ValueError):
    pass


class MalformedHeader(PcapError):
    pass


class TruncatedPacket(PcapError):
    pass


class AmbiguousEndpoints(PcapError):
    pass


class EndpointMismatch(PcapError):
    pass


class Direction(enum.IntEnum):
    """Packet direction. The value doubles as the histogram channel index."""

    SERVER_TO_CLIENT = 0
    CLIENT_TO_SERVER = 1


@dataclass(frozen=True)
class PacketRecord:
    time_ns: int
    length: int
    direction: Direction

    @property
    def timestamp(self) -> float:
        return self.time_ns / 1e9


@dataclass(frozen=True)
class TraceMeta:
    trace_id: str
    packets: tuple[PacketRecord, ...] = ()
    client: Optional[Endpoint] = None
    server: Optional[Endpoint] = None
    server_label: str = ""
    no_quic: bool = False
    non_quic_packets: int = 0
    mismatched_packets: int = 0

    def __post_init__(self):
        if self.client is not None and self.client == self.server:
            raise ValueError("client and server endpoints must differ")

    @property
    def duration_ns(self) -> int:
        return self.packets[-1].time_ns if self.packets else 0

    @property
    def duration(self) -> float:
        return self.duration_ns / 1e9

    def direction_counts(self) -> Counter:
        return Counter(p.direction for p in self.packets)


@dataclass(frozen=True)
class QuicFilterConfig:
    quic_ports: frozenset[int] = frozenset({443})
    client: Optional[Endpoint] = None
    split_flows: bool = False


@dataclass(frozen=True)
class GlobalHeader:
    byte_order: str
    nanosecond: bool
    version: tuple[int, int]
    snaplen: int
    linktype: int


@dataclass(frozen=True)
class RawRecord:
    time_ns: int
    orig_len: int
    data: bytes


@dataclass(frozen=True)
class UdpDatagram:
    src: Endpoint
    dst: Endpoint
    payload: bytes


def read_global_header(buf: bytes) -> GlobalHeader:
    if len(buf) < 24:
        raise MalformedHeader(f"global header needs 24 bytes, got {len(buf)}")
    for order in ("<", ">"):
        (magic,) = struct.unpack(order + "I", buf[:4])
        if magic in (MAGIC_USEC, MAGIC_NSEC):
            break
    else:
        raise MalformedHeader(f"bad magic {buf[:4].hex()}")
    vmaj, vmin, _zone, _sigfigs, snaplen, linktype = struct.unpack(order + "HHiIII", buf[4:24])
    return GlobalHeader(order, magic == MAGIC_NSEC, (vmaj, vmin), snaplen, linktype & 0xFFFF)


def iter_records(buf: bytes, header: GlobalHeader) -> Iterator[RawRecord]:
    fmt = header.byte_order + "IIII"
    scale = 1 if header.nanosecond else 1000
    pos, end = 24, len(buf)
    while pos < end:
        if pos + 16 > end:
            raise TruncatedPacket(f"record header at offset {pos} runs past end of file")
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack_from(fmt, buf, pos)
        pos += 16
        if pos + incl_len > end:
            raise TruncatedPacket(f"record at offset {pos - 16} claims {incl_len} bytes, {end - pos} remain")
        yield RawRecord(ts_sec * 1_000_000_000 + ts_frac * scale, orig_len, buf[pos:pos + incl_len])
        pos += incl_len


def _ip_to_udp(data: bytes) -> Optional[UdpDatagram]:
    if not data:
        return None
    version = data[0] >> 4
    if version == 4:
        if len(data) < 20:
            return None
        ihl = (data[0] & 0x0F) * 4
        if data[9] != IPPROTO_UDP or len(data) < ihl + 8:
            return None
        frag_offset = struct.unpack_from("!H", data, 6)[0] & 0x1FFF
        if frag_offset:
            return None
        src = str(ipaddress.IPv4Address(data[12:16]))
        dst = str(ipaddress.IPv4Address(data[16:20]))
        udp = data[ihl:]
    elif version == 6:
        if len(data) < 40:
            return None
        nxt, pos = data[6], 40
        while nxt in _IPV6_EXT_HEADERS or nxt == _IPV6_FRAGMENT:
            if len(data) < pos + 8:
                return None
            if nxt == _IPV6_FRAGMENT:
                if struct.unpack_from("!H", data, pos + 2)[0] >> 3:
                    return None
                nxt, pos = data[pos], pos + 8
            else:
                nxt, pos = data[pos], pos + (data[pos + 1] + 1) * 8
        if nxt != IPPROTO_UDP or len(data) < pos + 8:
            return None
        src = str(ipaddress.IPv6Address(data[8:24]))
        dst = str(ipaddress.IPv6Address(data[24:40]))
        udp = data[pos:]
    else:
        return None
    sport, dport, ulen = struct.unpack_from("!HHH", udp, 0)
    # ulen bounds the payload when it is sane; Ethernet padding otherwise leaks in
    payload = udp[8:ulen] if 8 <= ulen <= len(udp) else udp[8:]
    return UdpDatagram((src, sport), (dst, dport), payload)


def decode_udp(frame: bytes, linktype: int) -> Optional[UdpDatagram]:
    """Return the UDP datagram carried by a frame, or None for anything else."""
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        ethertype, pos = struct.unpack_from("!H", frame, 12)[0], 14
        while ethertype in ETHERTYPE_VLAN and len(frame) >= pos + 4:
            ethertype, pos = struct.unpack_from("!H", frame, pos + 2)[0], pos + 4
        if ethertype not in (ETHERTYPE_IPV4, ETHERTYPE_IPV6):
            return None
        return _ip_to_udp(frame[pos:])
    if linktype in LINKTYPE_RAW:
        return _ip_to_udp(frame)
    raise MalformedHeader(f"unsupported link type {linktype}")


def classify_quic(payload: bytes, ports: tuple[int, int], config: QuicFilterConfig = QuicFilterConfig()) -> bool:
    if not (ports[0] in config.quic_ports or ports[1] in config.quic_ports):
        return False
    if len(payload) < 1 or not payload[0] & 0x40:
        return False
    if payload[0] & 0x80 and len(payload) < 7:
        return False
    return True


def resolve_direction(src: Endpoint, dst: Endpoint, client: Endpoint, server: Endpoint) -> Direction:
    if src == client and dst == server:
        return Direction.CLIENT_TO_SERVER
    if src == server and dst == client:
        return Direction.SERVER_TO_CLIENT
    raise EndpointMismatch(f"{src} -> {dst} belongs to neither orientation of {client} <-> {server}")


def _read_all(source: Union[bytes, bytearray, BinaryIO, str, os.PathLike]) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _quic_datagrams(buf: bytes, config: QuicFilterConfig):
    header = read_global_header(buf)
    kept, dropped = [], 0
    for rec in iter_records(buf, header):
        dgram = decode_udp(rec.data, header.linktype)
        if dgram is None or not classify_quic(dgram.payload, (dgram.src[1], dgram.dst[1]), config):
            dropped += 1
            continue
        kept.append((rec, dgram))
    return kept, dropped


def _build_trace(trace_id, server_label, kept, client, server, non_quic) -> TraceMeta:
    packets, mismatched = [], 0
    base = None
    for rec, dgram in kept:
        try:
            direction = resolve_direction(dgram.src, dgram.dst, client, server)
        except EndpointMismatch:
            mismatched += 1
            continue
        if base is None:
            base = rec.time_ns
        packets.append(PacketRecord(rec.time_ns - base, rec.orig_len, direction))
    # captures are occasionally written out of order; a stable sort keeps ties in file order
    packets.sort(key=lambda p: p.time_ns)
    return TraceMeta(
        trace_id, tuple(packets), client, server, server_label,
        non_quic_packets=non_quic, mismatched_packets=mismatched,
    )


def _flow_key(d: UdpDatagram) -> frozenset:
    return frozenset((d.src, d.dst))


def _first_source(kept, key) -> Endpoint:
    for _rec, d in kept:
        if _flow_key(d) == key:
            return d.src
    raise AssertionError("flow key without packets")


def parse_pcap(
    source,
    config: QuicFilterConfig = QuicFilterConfig(),
    trace_id: str = "",
    server_label: str = "",
) -> TraceMeta:
    """Parse a capture into one QUIC trace.

    The dominant endpoint pair (by packet count) is kept. The client is the
    source of that flow's first packet unless ``config.client`` pins it.
    A capture without QUIC traffic yields an empty trace with ``no_quic`` set.
    """
    buf = _read_all(source)
    kept, non_quic = _quic_datagrams(buf, config)
    if not kept:
        logger.warning("%s: no QUIC packets retained", trace_id or "<pcap>")
        return TraceMeta(trace_id, server_label=server_label, no_quic=True, non_quic_packets=non_quic)

    flows = Counter(_flow_key(d) for _r, d in kept)
    if config.client is not None:
        flows = Counter({k: n for k, n in flows.items() if config.client in k and len(k) == 2})
        if not flows:
            raise AmbiguousEndpoints(f"client override {config.client} matches no QUIC flow")
    ranked = flows.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        raise AmbiguousEndpoints(
            f"{len(ranked)} candidate flows, top two tie at {ranked[0][1]} packets; set a client override"
        )
    key = ranked[0][0]
    if len(key) != 2:
        raise AmbiguousEndpoints("dominant flow has identical source and destination")
    if len(ranked) > 1:
        logger.info("%s: keeping dominant flow, %d other flows dropped", trace_id, len(ranked) - 1)
    client = config.client if config.client is not None else _first_source(kept, key)
    (server,) = key - {client}
    return _build_trace(trace_id, server_label, kept, client, server, non_quic)


def parse_pcap_flows(
    source,
    config: QuicFilterConfig = QuicFilterConfig(),
    trace_id: str = "",
    server_label: str = "",
) -> list[TraceMeta]:
    """Split a capture into one trace per endpoint pair, in order of first appearance.

    Each flow's trace id is ``<trace_id>#<k>``.
    """
    buf = _read_all(source)
    kept, non_quic = _quic_datagrams(buf, config)
    order: dict[frozenset, None] = {}
    for _r, d in kept:
        order.setdefault(_flow_key(d), None)
    traces = []
    for k, key in enumerate(k for k in order if len(k) == 2):
        flow = [(r, d) for r, d in kept if _flow_key(d) == key]
        client = config.client if config.client in key else flow[0][1].src
        (server,) = key - {client}
        traces.append(_build_trace(f"{trace_id}#{k}", server_label, flow, client, server, non_quic))
    return traces


# -- writer, used for fixtures and for parse-and-rewrite round trips ---------

def _ip_udp_frame(src: Endpoint, dst: Endpoint, payload: bytes, proto: int = IPPROTO_UDP) -> tuple[bytes, int]:
    saddr, daddr = ipaddress.ip_address(src[0]), ipaddress.ip_address(dst[0])
    l4 = struct.pack("!HHHH", src[1], dst[1], 8 + len(payload), 0) + payload
    if proto != IPPROTO_UDP:
        l4 = struct.pack("!HHIIBBHHH", src[1], dst[1], 0, 0, 0x50, 0x18, 0xFFFF, 0, 0) + payload
    if saddr.version == 4:
        ip = struct.pack(
            "!BBHHHBBH4s4s", 0x45, 0, 20 + len(l4), 0, 0x4000, 64, proto, 0, saddr.packed, daddr.packed
        )
        return ip + l4, ETHERTYPE_IPV4
    ip = struct.pack("!IHBB16s16s", 6 << 28, len(l4), proto, 64, saddr.packed, daddr.packed)
    return ip + l4, ETHERTYPE_IPV6


@dataclass
class PcapWriter:
    """Minimal classic-pcap writer (Ethernet or raw IP link)."""

    byte_order: str = "<"
    nanosecond: bool = False
    linktype: int = LINKTYPE_ETHERNET
    _out: io.BytesIO = field(default_factory=io.BytesIO)

    def __post_init__(self):
        magic = MAGIC_NSEC if self.nanosecond else MAGIC_USEC
        self._out.write(struct.pack(self.byte_order + "IHHiIII", magic, 2, 4, 0, 0, 262144, self.linktype))

    def write_frame(self, time_ns: int, frame: bytes, orig_len: Optional[int] = None) -> None:
        sec, rem = divmod(time_ns, 1_000_000_000)
        frac = rem if self.nanosecond else rem // 1000
        orig = len(frame) if orig_len is None else orig_len
        self._out.write(struct.pack(self.byte_order + "IIII", sec, frac, len(frame), orig))
        self._out.write(frame)

    def write_udp(self, time_ns: int, src: Endpoint, dst: Endpoint, payload: bytes,
                  proto: int = IPPROTO_UDP, orig_len: Optional[int] = None) -> None:
        ip, ethertype = _ip_udp_frame(src, dst, payload, proto)
        if self.linktype == LINKTYPE_ETHERNET:
            frame = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + struct.pack("!H", ethertype) + ip
        else:
            frame = ip
        self.write_frame(time_ns, frame, orig_len)

    def getvalue(self) -> bytes:
        return self._out.getvalue()


def quic_payload(size: int, long_header: bool = False) -> bytes:
    """A payload of ``size`` bytes that passes the QUIC predicate."""
    if long_header:
        head = bytes([0xC3]) + struct.pack("!I", 1) + b"\x08"
    else:
        head = bytes([0x43])
    return (head + bytes(max(0, size - len(head))))[:max(size, len(head))]


def rewrite_trace(trace: TraceMeta, start_ns: int = 1_700_000_000_000_000_000, nanosecond: bool = True) -> bytes:
    """Serialize a parsed trace back to a capture (payloads are synthetic)."""
    w = PcapWriter(nanosecond=nanosecond)
    for p in trace.packets:
        src, dst = (trace.client, trace.server) if p.direction == Direction.CLIENT_TO_SERVER else (trace.server, trace.client)
        w.write_udp(start_ns + p.time_ns, src, dst, quic_payload(16), orig_len=p.length)
    return w.getvalue()
