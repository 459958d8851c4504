"""Subgraph -> chronological plain-text log document.

Events are truncated to whole seconds and repeated (subject, action, object)
triples within the same second collapse into one sentence with a count.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .graph_store import ProvenanceGraph

TEMPLATE_VERSION = 1

_FILE_KEYS = ("path", "file_path", "filename", "file_name", "name")
_PROCESS_KEYS = ("image", "image_path", "exe", "executable", "command_name", "name", "command_line", "cmdline")
_IP_KEYS = ("remote_address", "remote_ip", "dst_ip", "ip", "address")
_PORT_KEYS = ("remote_port", "dst_port", "port")


def _kind(node_type: str) -> str:
    t = node_type.upper()
    if "FILE" in t:
        return "file"
    if "PROCESS" in t or t == "SUBJECT":
        return "process"
    if t in ("IP", "FLOW", "NETFLOW", "SOCKET", "NETWORK") or "FLOW" in t or "SOCKET" in t or t.startswith("IP"):
        return "ip"
    return "other"


def node_label(node_id: str, node_type: str, attrs: dict) -> str:
    """Most informative attribute for the node: path, image, or address:port; else the id."""
    kind = _kind(node_type)
    if kind == "file":
        keys = _FILE_KEYS
    elif kind == "process":
        keys = _PROCESS_KEYS
    elif kind == "ip":
        for key in _IP_KEYS:
            if attrs.get(key):
                port = next((attrs[p] for p in _PORT_KEYS if attrs.get(p)), None)
                return f"{attrs[key]}:{port}" if port else attrs[key]
        return node_id
    else:
        return node_id
    for key in keys:
        if attrs.get(key):
            return attrs[key]
    return node_id


def iso_second(second: int) -> str:
    return datetime.fromtimestamp(second, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Sentence:
    second: int
    subject: str
    subject_type: str
    subject_label: str
    action: str
    object: str
    object_type: str
    object_label: str
    count: int

    @property
    def text(self) -> str:
        times = f" {self.count} times" if self.count > 1 else ""
        return (
            f"At {iso_second(self.second)} {self.subject_type} '{self.subject_label}' "
            f"{self.action}{times} {self.object_type} '{self.object_label}'"
        )


@dataclass
class LogDocument:
    subgraph_id: str
    sentences: list
    chunks: list = field(default_factory=list)  # (start, end) sentence index ranges

    @property
    def lines(self) -> list:
        return [s.text for s in self.sentences]

    @property
    def text(self) -> str:
        return "\n".join(self.lines)

    def chunk_texts(self) -> list:
        lines = self.lines
        return ["\n".join(lines[a:b]) for a, b in self.chunks]

    @property
    def labels(self) -> set:
        out = set()
        for s in self.sentences:
            out.add(s.subject_label)
            out.add(s.object_label)
        return out


def subgraph_record(graph: ProvenanceGraph, nodes, edge_ids, subgraph_id="") -> dict:
    """Plain dict form of a node/edge selection, the shape the serializer consumes."""
    return {
        "id": subgraph_id,
        "nodes": [
            {"id": n, "type": graph.node_type(n), "attrs": dict(sorted(graph.attrs(n).items()))}
            for n in sorted(nodes)
        ],
        "edges": [
            {"src": e.src, "action": e.action, "dst": e.dst, "timestamp_us": e.timestamp_us}
            for e in (graph.edge(i) for i in edge_ids)
        ],
    }


def serialize_subgraph(record: dict, max_sentences_per_chunk: int = 20) -> LogDocument:
    """Turn a subgraph record (``{"id", "nodes", "edges"}``) into a log document."""
    info = {n["id"]: (n["type"], n.get("attrs", {})) for n in record["nodes"]}

    def describe(node_id):
        node_type, attrs = info.get(node_id, ("NODE", {}))
        return node_type, node_label(node_id, node_type, attrs)

    groups = Counter()
    for e in record["edges"]:
        # microseconds -> seconds by truncation; one tumbling window per second
        groups[(e["src"], e["action"], e["dst"], int(e["timestamp_us"]) // 1_000_000)] += 1

    sentences = []
    for (src, action, dst, second), count in groups.items():
        s_type, s_label = describe(src)
        o_type, o_label = describe(dst)
        sentences.append(Sentence(second, src, s_type, s_label, action, dst, o_type, o_label, count))
    sentences.sort(key=lambda s: (s.second, s.subject_label, s.action, s.object_label, s.subject, s.object))
    doc = LogDocument(record.get("id", ""), sentences)
    doc.chunks = chunk_document(doc, max_sentences_per_chunk)
    return doc


def chunk_document(doc: LogDocument, max_sentences_per_chunk: int) -> list:
    """Consecutive sentence ranges of at most ``max_sentences_per_chunk`` sentences."""
    if max_sentences_per_chunk < 1:
        raise ValueError("max_sentences_per_chunk must be >= 1")
    n = len(doc.sentences)
    return [(a, min(a + max_sentences_per_chunk, n)) for a in range(0, n, max_sentences_per_chunk)]
