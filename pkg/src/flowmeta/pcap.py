"""Classic libpcap reader producing per-packet metadata for flow assembly."""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field

from .errors import FormatError, ParseError

FIN, SYN, RST, PSH, ACK, URG = "FIN", "SYN", "RST", "PSH", "ACK", "URG"
_TCP_FLAG_BITS = ((0x01, FIN), (0x02, SYN), (0x04, RST), (0x08, PSH), (0x10, ACK), (0x20, URG))

PROTO_TCP = 6
PROTO_UDP = 17

FORWARD = "forward"
BACKWARD = "backward"

# magic -> (byte order, timestamp fraction is nanoseconds)
_MAGICS = {
    b"\xd4\xc3\xb2\xa1": ("<", False),
    b"\xa1\xb2\xc3\xd4": (">", False),
    b"\x4d\x3c\xb2\xa1": ("<", True),
    b"\xa1\xb2\x3c\x4d": (">", True),
}

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229

_IPV6_EXT_HEADERS = {0, 43, 60}  # hop-by-hop, routing, destination options
_IPV6_FRAGMENT = 44


@dataclass(frozen=True)
class FlowKey:
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    protocol: int

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_addr, self.src_addr, self.dst_port, self.src_port, self.protocol)

    def canonical_id(self) -> tuple:
        """Orientation-free identity: a key and its reverse map to the same value."""
        a = (self.src_addr, self.src_port)
        b = (self.dst_addr, self.dst_port)
        return (min(a, b), max(a, b), self.protocol)


@dataclass(frozen=True)
class PacketMeta:
    timestamp: int  # microseconds
    key: FlowKey
    header_len: int
    payload_len: int
    tcp_flags: frozenset = frozenset()
    direction: str = FORWARD


@dataclass
class Capture:
    packets: list = field(default_factory=list)
    skipped: int = 0
    linktype: int = LINKTYPE_ETHERNET

    def __len__(self):
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def __getitem__(self, i):
        return self.packets[i]


class _Skip(Exception):
    pass


def parse_capture(path) -> Capture:
    """Read a classic pcap file.

    Only TCP/UDP over IPv4/IPv6 frames become `PacketMeta`; every other
    frame (ARP, ICMP, non-first fragments, frames too short to decode)
    is counted in ``Capture.skipped``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_capture_bytes(data)


def parse_capture_bytes(data: bytes) -> Capture:
    if len(data) < 24:
        raise FormatError(f"pcap global header truncated: {len(data)} bytes")
    try:
        order, nanos = _MAGICS[data[:4]]
    except KeyError:
        raise FormatError(f"bad pcap magic 0x{data[:4].hex()}") from None
    _vmaj, _vmin, _tz, _sig, _snap, linktype = struct.unpack(order + "HHiIII", data[4:24])
    linktype &= 0x0FFFFFFF

    cap = Capture(linktype=linktype)
    rec_hdr = struct.Struct(order + "IIII")
    off = 24
    n = len(data)
    while off < n:
        if off + 16 > n:
            raise ParseError("truncated pcap record header", off)
        ts_sec, ts_frac, incl_len, _orig_len = rec_hdr.unpack_from(data, off)
        start = off + 16
        end = start + incl_len
        if end > n:
            raise ParseError(f"truncated pcap record body (need {incl_len} bytes)", off)
        micros = ts_frac // 1000 if nanos else ts_frac
        ts = ts_sec * 1_000_000 + micros
        try:
            cap.packets.append(_decode_frame(data[start:end], linktype, ts))
        except _Skip:
            cap.skipped += 1
        off = end
    return cap


def _decode_frame(frame: bytes, linktype: int, ts: int) -> PacketMeta:
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            raise _Skip
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        pos = 14
        while ethertype in (0x8100, 0x88A8):  # VLAN tags
            if len(frame) < pos + 4:
                raise _Skip
            ethertype = struct.unpack_from("!H", frame, pos + 2)[0]
            pos += 4
        if ethertype == 0x0800:
            return _decode_ipv4(frame, pos, ts)
        if ethertype == 0x86DD:
            return _decode_ipv6(frame, pos, ts)
        raise _Skip
    if linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            raise _Skip
        proto = struct.unpack_from("!H", frame, 14)[0]
        if proto == 0x0800:
            return _decode_ipv4(frame, 16, ts)
        if proto == 0x86DD:
            return _decode_ipv6(frame, 16, ts)
        raise _Skip
    if linktype == LINKTYPE_NULL:
        if len(frame) < 4:
            raise _Skip
        family = struct.unpack_from("<I", frame, 0)[0]
        if family not in (2, 24, 28, 30) and struct.unpack_from(">I", frame, 0)[0] in (2, 24, 28, 30):
            family = struct.unpack_from(">I", frame, 0)[0]
        if family == 2:
            return _decode_ipv4(frame, 4, ts)
        if family in (24, 28, 30):
            return _decode_ipv6(frame, 4, ts)
        raise _Skip
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6):
        if not frame:
            raise _Skip
        version = frame[0] >> 4
        if version == 4:
            return _decode_ipv4(frame, 0, ts)
        if version == 6:
            return _decode_ipv6(frame, 0, ts)
        raise _Skip
    raise FormatError(f"unsupported pcap link type {linktype}")


def _decode_ipv4(frame: bytes, pos: int, ts: int) -> PacketMeta:
    if len(frame) < pos + 20:
        raise _Skip
    vihl = frame[pos]
    if vihl >> 4 != 4:
        raise _Skip
    ihl = (vihl & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", frame, pos + 2)
    proto = frame[pos + 9]
    if frag & 0x1FFF:
        raise _Skip  # non-first fragment: no transport header
    if ihl < 20 or len(frame) < pos + ihl:
        raise _Skip
    src = str(ipaddress.IPv4Address(frame[pos + 12:pos + 16]))
    dst = str(ipaddress.IPv4Address(frame[pos + 16:pos + 20]))
    return _decode_transport(frame, pos + ihl, proto, src, dst, ihl, total_len - ihl, ts)


def _decode_ipv6(frame: bytes, pos: int, ts: int) -> PacketMeta:
    if len(frame) < pos + 40:
        raise _Skip
    if frame[pos] >> 4 != 6:
        raise _Skip
    payload_len = struct.unpack_from("!H", frame, pos + 4)[0]
    nxt = frame[pos + 6]
    src = str(ipaddress.IPv6Address(frame[pos + 8:pos + 24]))
    dst = str(ipaddress.IPv6Address(frame[pos + 24:pos + 40]))
    hdr = 40
    cur = pos + 40
    remaining = payload_len
    while nxt in _IPV6_EXT_HEADERS or nxt == _IPV6_FRAGMENT:
        if len(frame) < cur + 8:
            raise _Skip
        if nxt == _IPV6_FRAGMENT:
            frag_off = struct.unpack_from("!H", frame, cur + 2)[0] >> 3
            if frag_off:
                raise _Skip
            ext_len = 8
        else:
            ext_len = (frame[cur + 1] + 1) * 8
        nxt = frame[cur]
        cur += ext_len
        hdr += ext_len
        remaining -= ext_len
    return _decode_transport(frame, cur, nxt, src, dst, hdr, remaining, ts)


def _decode_transport(frame, pos, proto, src, dst, net_hdr, l4_len, ts) -> PacketMeta:
    if proto == PROTO_TCP:
        if len(frame) < pos + 14:
            raise _Skip
        sport, dport = struct.unpack_from("!HH", frame, pos)
        data_off = (frame[pos + 12] >> 4) * 4
        bits = frame[pos + 13]
        flags = frozenset(name for bit, name in _TCP_FLAG_BITS if bits & bit)
        if data_off < 20:
            raise _Skip
        hdr = data_off
    elif proto == PROTO_UDP:
        if len(frame) < pos + 8:
            raise _Skip
        sport, dport, ulen = struct.unpack_from("!HHH", frame, pos)
        flags = frozenset()
        hdr = 8
        l4_len = ulen if ulen >= 8 else l4_len
    else:
        raise _Skip
    key = FlowKey(src, dst, sport, dport, proto)
    return PacketMeta(
        timestamp=ts,
        key=key,
        header_len=net_hdr + hdr,
        payload_len=max(l4_len - hdr, 0),
        tcp_flags=flags,
    )
