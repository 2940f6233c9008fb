"""Bidirectional flow assembly and flow-level statistical features."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .pcap import ACK, BACKWARD, FIN, FORWARD, PSH, RST, SYN, URG, FlowKey
from .table import format_real

DEFAULT_IDLE_TIMEOUT_US = 120_000_000

# The 33 features kept for modelling, in canonical order.
TABLE1_FEATURES = (
    "Bwd Packet Count Total",
    "Bwd Packet Count Mean",
    "Flow Packet Count Total",
    "Flow Packet Count Mean",
    "Bwd/Fwd Packet Total Count Ratio",
    "Fwd Header Length Total",
    "Bwd Header Length Total",
    "Flow Header Length Total",
    "Bwd/Fwd Header Total Length Ratio",
    "Fwd Packet Length Total",
    "Fwd Packet Length Max",
    "Fwd Packet Length Mean",
    "Fwd Packet Length Std",
    "Bwd Packet Length Total",
    "Bwd Packet Length Max",
    "Bwd Packet Length Mean",
    "Bwd Packet Length Std",
    "Flow Packet Length Total",
    "Flow Packet Length Max",
    "Flow Packet Length Mean",
    "Flow Packet Length Std",
    "Bwd/Fwd Packet Total Length Ratio",
    "Fwd IAT Min",
    "Fwd IAT Max",
    "Fwd IAT Mean",
    "Fwd IAT Std",
    "Bwd IAT Max",
    "Bwd IAT Mean",
    "Flow IAT Total",
    "Flow IAT Max",
    "Flow IAT Mean",
    "Fwd Flag Count PSH",
    "Flow Flag Count ACK",
)

_DIRS = ("Fwd", "Bwd", "Flow")
_STATS = ("Total", "Min", "Max", "Mean", "Std")


def _candidate_ids():
    ids = ["Protocol", "Flow Duration", "Flow Bytes/s"]
    for d in _DIRS:
        ids += [f"{d} Packet Count Total", f"{d} Packet Count Mean"]
    ids.append("Bwd/Fwd Packet Total Count Ratio")
    for d in _DIRS:
        ids.append(f"{d} Header Length Total")
    ids.append("Bwd/Fwd Header Total Length Ratio")
    for d in _DIRS:
        ids += [f"{d} Packet Length {s}" for s in _STATS]
    ids.append("Bwd/Fwd Packet Total Length Ratio")
    for d in _DIRS:
        ids += [f"{d} IAT {s}" for s in _STATS]
    for flag in (PSH, URG):
        ids += [f"Fwd Flag Count {flag}", f"Bwd Flag Count {flag}"]
    for flag in (FIN, SYN, RST, PSH, ACK, URG):
        ids.append(f"Flow Flag Count {flag}")
    return tuple(ids)


FEATURE_IDS = _candidate_ids()
assert set(TABLE1_FEATURES) <= set(FEATURE_IDS)
assert len(set(FEATURE_IDS)) == len(FEATURE_IDS)


@dataclass(frozen=True)
class FlowRecord:
    key: FlowKey
    packets: tuple

    @property
    def u(self) -> int:
        return len(self.packets)

    @property
    def start_time(self) -> int:
        return self.packets[0].timestamp

    @property
    def end_time(self) -> int:
        return self.packets[-1].timestamp

    @property
    def duration(self) -> int:
        return self.end_time - self.start_time


@dataclass(frozen=True)
class FeatureVector:
    values: tuple  # of (feature_id, value)

    @property
    def v(self) -> int:
        return len(self.values)

    @property
    def ids(self):
        return [fid for fid, _ in self.values]

    def as_dict(self) -> dict:
        return dict(self.values)

    def array(self) -> np.ndarray:
        return np.array([val for _, val in self.values], dtype=np.float64)


class _OpenFlow:
    __slots__ = ("key", "packets", "fin_fwd", "fin_bwd", "last_ts")

    def __init__(self, key):
        self.key = key
        self.packets = []
        self.fin_fwd = False
        self.fin_bwd = False
        self.last_ts = None


def assemble_flows(packets, idle_timeout: int = DEFAULT_IDLE_TIMEOUT_US) -> list:
    """Group time-ordered packets into bidirectional flows.

    A flow ends on an idle gap longer than `idle_timeout` microseconds,
    after FIN has been seen in both directions, on any RST, or at end of
    input. Flows are returned in termination order; flows still open at
    the end are closed in creation order.
    """
    if idle_timeout <= 0:
        raise PreconditionError(f"idle_timeout must be > 0, got {idle_timeout}")
    open_flows: dict = {}
    done = []
    prev_ts = None
    for i, pkt in enumerate(packets):
        if prev_ts is not None and pkt.timestamp < prev_ts:
            raise PreconditionError(
                f"packet {i} timestamp {pkt.timestamp} precedes previous {prev_ts}"
            )
        prev_ts = pkt.timestamp
        cid = pkt.key.canonical_id()
        flow = open_flows.get(cid)
        if flow is not None and pkt.timestamp - flow.last_ts > idle_timeout:
            done.append(_close(open_flows.pop(cid)))
            flow = None
        if flow is None:
            flow = _OpenFlow(pkt.key)
            open_flows[cid] = flow
        direction = FORWARD if pkt.key == flow.key else BACKWARD
        flow.packets.append(replace(pkt, direction=direction))
        flow.last_ts = pkt.timestamp
        if FIN in pkt.tcp_flags:
            if direction == FORWARD:
                flow.fin_fwd = True
            else:
                flow.fin_bwd = True
        if RST in pkt.tcp_flags or (flow.fin_fwd and flow.fin_bwd):
            done.append(_close(open_flows.pop(cid)))
    # dicts keep insertion order, which is creation order here
    done.extend(_close(f) for f in open_flows.values())
    return done


def _close(flow: _OpenFlow) -> FlowRecord:
    return FlowRecord(key=flow.key, packets=tuple(flow.packets))


def _stats(values) -> tuple:
    """(total, min, max, mean, population std); all zero for empty input."""
    if len(values) == 0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.sum()), float(arr.min()), float(arr.max()), float(arr.mean()), float(arr.std())


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def compute_features(flow: FlowRecord) -> FeatureVector:
    """Candidate feature vector of one flow (ids and order of `FEATURE_IDS`).

    Lengths are payload bytes, IATs microseconds, rates per second.
    Empty directions and single samples yield 0 rather than NaN.
    """
    pkts = flow.packets
    by_dir = {
        "Fwd": [p for p in pkts if p.direction == FORWARD],
        "Bwd": [p for p in pkts if p.direction == BACKWARD],
        "Flow": list(pkts),
    }
    duration = flow.duration
    seconds = duration / 1e6
    out = {
        "Protocol": float(flow.key.protocol),
        "Flow Duration": float(duration),
        "Flow Bytes/s": _ratio(sum(p.payload_len for p in pkts), seconds),
    }
    for d, group in by_dir.items():
        n = len(group)
        out[f"{d} Packet Count Total"] = float(n)
        out[f"{d} Packet Count Mean"] = _ratio(n, seconds)
        out[f"{d} Header Length Total"] = float(sum(p.header_len for p in group))
        for name, val in zip(_STATS, _stats([p.payload_len for p in group])):
            out[f"{d} Packet Length {name}"] = val
        ts = [p.timestamp for p in group]
        iats = [b - a for a, b in zip(ts, ts[1:])]
        for name, val in zip(_STATS, _stats(iats)):
            out[f"{d} IAT {name}"] = val
    out["Bwd/Fwd Packet Total Count Ratio"] = _ratio(
        out["Bwd Packet Count Total"], out["Fwd Packet Count Total"]
    )
    out["Bwd/Fwd Header Total Length Ratio"] = _ratio(
        out["Bwd Header Length Total"], out["Fwd Header Length Total"]
    )
    out["Bwd/Fwd Packet Total Length Ratio"] = _ratio(
        out["Bwd Packet Length Total"], out["Fwd Packet Length Total"]
    )
    for flag in (PSH, URG):
        out[f"Fwd Flag Count {flag}"] = float(sum(flag in p.tcp_flags for p in by_dir["Fwd"]))
        out[f"Bwd Flag Count {flag}"] = float(sum(flag in p.tcp_flags for p in by_dir["Bwd"]))
    for flag in (FIN, SYN, RST, PSH, ACK, URG):
        out[f"Flow Flag Count {flag}"] = float(sum(flag in p.tcp_flags for p in pkts))
    return FeatureVector(values=tuple((fid, out[fid]) for fid in FEATURE_IDS))


def extract_features(flows) -> list:
    return [compute_features(f) for f in flows]


def feature_manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".features.json")


def export_features(vectors, path, labels=None, feature_ids=None) -> Path:
    """Write feature vectors as CSV (9 significant digits) plus a JSON id list.

    Returns the path of the id manifest. `feature_ids` is only needed when
    `vectors` is empty and the header should not default to `FEATURE_IDS`.
    """
    vectors = list(vectors)
    if labels is not None:
        labels = list(labels)
        if len(labels) != len(vectors):
            raise PreconditionError(
                f"{len(labels)} labels for {len(vectors)} flows"
            )
    if vectors:
        ids = vectors[0].ids
        for i, vec in enumerate(vectors):
            if vec.ids != ids:
                raise PreconditionError(f"flow {i} has a different feature id ordering")
    else:
        ids = list(feature_ids if feature_ids is not None else FEATURE_IDS)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ids + (["label"] if labels is not None else []))
        for i, vec in enumerate(vectors):
            row = [format_real(val) for _, val in vec.values]
            if labels is not None:
                row.append(labels[i])
            writer.writerow(row)
    manifest = feature_manifest_path(path)
    manifest.write_text(json.dumps(ids, indent=1) + "\n", encoding="utf-8")
    return manifest
