"""Staged LLM investigation: per-subgraph IOC extraction, validation and reports,
per-stage IOC maps, a comprehensive report, and judge-driven context enrichment.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .graph_store import ProvenanceGraph
from .llm_gateway import LLMError, VectorIndex
from .serializer import LogDocument, node_label, serialize_subgraph, subgraph_record, _FILE_KEYS, _IP_KEYS, _PROCESS_KEYS
from .subgraphs import Level

logger = logging.getLogger(__name__)

PROMPT_VERSION = 1

STAGES = (
    "Initial Compromise",
    "Internal Reconnaissance",
    "Command and Control",
    "Privilege Escalation",
    "Lateral Movement",
    "Maintain Persistence",
    "Data Exfiltration",
    "Covering Tracks",
)
STAGE_ABBREV = dict(zip(STAGES, ("IC", "IR", "C&C", "PE", "LM", "MP", "DE", "CT")))
JUDGE_NODE_TYPES = ("IP", "PROCESS", "FILE")

FORMAT_REMINDER = (
    "Your previous answer could not be parsed. Reply with the Python list only, "
    "formatted as: ['IOC1', 'IOC2', 'IOC3']."
)
JUDGE_REMINDER = (
    "The IOC you returned does not appear among the validated IOCs of the report. "
    "Return exactly one IOC copied verbatim from the report, formatted as 'IOC'."
)
INCOMPLETE_MARKER = "INCOMPLETE"
NO_CONTEXT_NOTE = "No additional anomalous context was found for this IOC."

_PROMPT_FILES = {
    "investigator": "investigator_instructions.txt",
    "ioc": "retrieve_iocs.txt",
    "summarize": "summarize_report.txt",
    "ioc_stage": "retrieve_iocs_per_stage.txt",
    "comprehensive": "summarize_comprehensive.txt",
    "judge_instructions": "judge_instructions.txt",
    "judge": "judge_select_ioc.txt",
    "enrich": "enrich_comprehensive.txt",
}


class NothingToReport(ValueError):
    pass


@dataclass
class Prompts:
    investigator: str
    ioc: str
    summarize: str
    ioc_stage: str
    comprehensive: str
    judge_instructions: str
    judge: str
    enrich: str

    @classmethod
    def load(cls, directory=None) -> "Prompts":
        """Templates from ``directory``, falling back to the packaged defaults per file."""
        texts = {}
        base = resources.files("provsentinel") / "prompts"
        for key, name in _PROMPT_FILES.items():
            override = Path(directory) / name if directory else None
            if override is not None and override.exists():
                texts[key] = override.read_text(encoding="utf-8").strip()
            else:
                texts[key] = (base / name).read_text(encoding="utf-8").strip()
        return cls(**texts)


@dataclass
class InvestigationConfig:
    top_k: int = 8
    chunk_size: int = 20
    min_level: Level = Level.Moderate

    def __post_init__(self):
        self.min_level = Level.parse(self.min_level)


# -- IOC lists --------------------------------------------------------------------


@dataclass
class IocEntry:
    value: str
    status: str = "untagged"  # validated | rejected | untagged


@dataclass
class IocList:
    entries: list = field(default_factory=list)

    @property
    def validated(self) -> list:
        return [e.value for e in self.entries if e.status == "validated"]

    @property
    def rejected(self) -> list:
        return [e.value for e in self.entries if e.status == "rejected"]

    @property
    def values(self) -> list:
        return [e.value for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_dict(self):
        return {"validated": self.validated, "rejected": self.rejected}


_FENCE = re.compile(r"```[a-zA-Z]*\n?|```")
_QUOTED = re.compile(r"'([^'\n]*)'|\"([^\"\n]*)\"|`([^`'\n]*)'|‘([^’\n]*)’|“([^”\n]*)”|`([^`\n]*)`")


def parse_ioc_list(text: str):
    """Quoted strings of the last bracketed list in ``text``; None when no list is found."""
    if text is None:
        return None
    body = _FENCE.sub("", text)
    candidates = re.findall(r"\[[^\[\]]*\]", body, flags=re.DOTALL)
    for chunk in reversed(candidates):
        inner = chunk[1:-1].strip()
        if not inner:
            return []
        # raw quoted text first: literal_eval would turn "C:\\bin" style paths into escapes
        found = [next(g for g in m.groups() if g is not None) for m in _QUOTED.finditer(inner)]
        found = [_unescape(f.strip()) for f in found if f.strip()]
        if found:
            return _dedup(found)
        try:
            value = ast.literal_eval(chunk)
        except (ValueError, SyntaxError):
            continue
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return _dedup([v.strip() for v in value if v.strip()])
    return None


def _unescape(value: str) -> str:
    # a Python-literal list doubles its backslashes; the evidence text does not
    return value.replace("\\\\", "\\")


def parse_single_ioc(text: str):
    if text is None:
        return None
    body = _FENCE.sub("", text).strip()
    m = _QUOTED.search(body)
    if m:
        value = _unescape(next(g for g in m.groups() if g is not None).strip())
        return value or None
    line = body.splitlines()[0].strip() if body else ""
    return line.strip("'\"`‘’“” ") or None


def _dedup(values):
    seen, out = set(), []
    for v in values:
        key = v.lower()
        if key not in seen:
            seen.add(key)
            out.append(v)
    return out


def validate_iocs(iocs, evidence) -> IocList:
    """Tag each IOC validated iff it occurs case-insensitively in the evidence text(s)."""
    texts = [evidence] if isinstance(evidence, str) else list(evidence)
    haystack = "\n".join(t.lower() for t in texts)
    values = iocs.values if isinstance(iocs, IocList) else list(iocs)
    return IocList([IocEntry(v, "validated" if v and v.lower() in haystack else "rejected") for v in _dedup(values)])


# -- markdown checks ------------------------------------------------------------------

_SECTION_PATTERNS = {
    "summary": re.compile(r"^\s*(#+|\*\*).*(summary|overview)", re.I | re.M),
    "ioc table": re.compile(r"^\s*\|.*\b(IOC|indicator)s?\b.*\|", re.I | re.M),
    "chronological log": re.compile(r"^\s*(#+|\*\*).*(chronolog|timeline|log of actions)", re.I | re.M),
}


def missing_sections(markdown: str) -> list:
    return [name for name, pat in _SECTION_PATTERNS.items() if not pat.search(markdown or "")]


def _split_row(line):
    cells = line.strip().strip("|").split("|")
    return [c.strip() for c in cells]


def _is_separator(line):
    return bool(re.fullmatch(r"\s*\|?\s*:?-{2,}:?\s*(\|\s*:?-{2,}:?\s*)*\|?\s*", line))


def _clean_cell(cell):
    return cell.strip().strip("`*_'\" ").strip()


def sanitize_ioc_tables(markdown: str, evidence) -> tuple:
    """Drop IOC-table rows whose indicator cell is absent from the evidence.

    A table counts as an IOC table when a header cell mentions IOC or
    indicator; that column (else the first) is checked. Returns the cleaned
    text and the list of removed indicators.
    """
    texts = [evidence] if isinstance(evidence, str) else list(evidence)
    haystack = "\n".join(t.lower() for t in texts)
    lines = (markdown or "").split("\n")
    out, removed = [], []
    i = 0
    while i < len(lines):
        line = lines[i]
        is_header = line.strip().startswith("|") and i + 1 < len(lines) and _is_separator(lines[i + 1])
        if not is_header:
            out.append(line)
            i += 1
            continue
        header = _split_row(line)
        col = next((k for k, c in enumerate(header) if re.search(r"\b(ioc|indicator)", c, re.I)), None)
        out.extend([line, lines[i + 1]])
        i += 2
        while i < len(lines) and lines[i].strip().startswith("|"):
            row = lines[i]
            if col is not None:
                cells = _split_row(row)
                value = _clean_cell(cells[col]) if col < len(cells) else ""
                if not value or value.lower() not in haystack:
                    removed.append(value)
                    i += 1
                    continue
            out.append(row)
            i += 1
    return "\n".join(out), removed


def ioc_table_values(markdown: str) -> list:
    """Indicator cells of every IOC table in ``markdown``."""
    lines = (markdown or "").split("\n")
    values = []
    i = 0
    while i < len(lines):
        if lines[i].strip().startswith("|") and i + 1 < len(lines) and _is_separator(lines[i + 1]):
            header = _split_row(lines[i])
            col = next((k for k, c in enumerate(header) if re.search(r"\b(ioc|indicator)", c, re.I)), None)
            i += 2
            while i < len(lines) and lines[i].strip().startswith("|"):
                if col is not None:
                    cells = _split_row(lines[i])
                    if col < len(cells):
                        values.append(_clean_cell(cells[col]))
                i += 1
        else:
            i += 1
    return values


# -- reports --------------------------------------------------------------------------


@dataclass
class AttackReport:
    subgraph_id: str
    text: str
    iocs: list = field(default_factory=list)
    removed_rows: list = field(default_factory=list)
    complete: bool = True


@dataclass
class EnrichmentEntry:
    node_type: str
    ioc: str
    context_id: str
    summary: str
    note: str = ""
    stages: dict = field(default_factory=dict)  # stage -> {"validated": [...], "rejected": [...]}


@dataclass
class ComprehensiveReport:
    text: str
    stage_iocs: dict = field(default_factory=dict)  # stage -> validated IOC list
    enrichment: list = field(default_factory=list)
    source_ids: list = field(default_factory=list)
    removed_rows: list = field(default_factory=list)

    @property
    def stages_named(self) -> list:
        return [s for s in STAGES if self.stage_iocs.get(s)]

    def render(self) -> str:
        parts = [self.text.rstrip(), "", "## APT Stage IOC Map", ""]
        parts.append("| Stage | Abbrev. | IOC |")
        parts.append("|---|---|---|")
        for stage in STAGES:
            for ioc in self.stage_iocs.get(stage, []):
                parts.append(f"| {stage} | {STAGE_ABBREV[stage]} | `{ioc}` |")
        parts += ["", "## Enrichment", ""]
        if not self.enrichment:
            parts.append("No IOC was selected for enrichment.")
        for entry in self.enrichment:
            parts.append(f"### {entry.node_type}: `{entry.ioc}`")
            parts.append("")
            parts.append(entry.note or entry.summary.strip())
            parts.append("")
        parts += ["", "Source subgraphs: " + ", ".join(self.source_ids), ""]
        return "\n".join(parts)


def _context_message(title, blocks) -> str:
    body = "\n\n".join(blocks) if blocks else "(no context retrieved)"
    return f"{title}:\n{body}"


def _doc_context(index: VectorIndex, doc: LogDocument, query: str, k: int):
    chunks = index.retrieve(query, k, doc_id=doc.subgraph_id) if len(index) else []
    chunks.sort(key=lambda c: c.chunk_id)
    return [c.text for c in chunks]


def extract_iocs(doc: LogDocument, chat, index: VectorIndex, prompts: Prompts, config: InvestigationConfig | None = None, history=None, log=None) -> list:
    """Ask for the document's IOCs as a Python list; one reprompt on a bad format, then []."""
    config = config or InvestigationConfig()
    history = history if history is not None else []
    prompt = prompts.ioc.format(doc_name=doc.subgraph_id)
    context = _context_message(f"Document {doc.subgraph_id}", _doc_context(index, doc, prompt, config.top_k))
    history.append({"role": "user", "content": f"{context}\n\n{prompt}"})
    for attempt in range(2):
        reply = chat.chat(prompts.investigator, history)
        history.append({"role": "assistant", "content": reply})
        parsed = parse_ioc_list(reply)
        if parsed is not None:
            return parsed
        if attempt == 0:
            history.append({"role": "user", "content": FORMAT_REMINDER})
    logger.warning("could not parse an IOC list for %s after a reprompt", doc.subgraph_id)
    if log is not None:
        log.append(f"{doc.subgraph_id}: unparseable IOC list")
    return []


def summarize_subgraph_report(doc: LogDocument, validated_iocs, chat, prompts: Prompts, history=None, evidence=None) -> AttackReport:
    """Ask for the three-section Markdown report; one reprompt naming missing sections."""
    history = history if history is not None else []
    ioc_list = ", ".join(f"'{v}'" for v in validated_iocs)
    prompt = prompts.summarize.format(doc_name=doc.subgraph_id, ioc_list=ioc_list)
    history.append({"role": "user", "content": f"Document {doc.subgraph_id}:\n{doc.text}\n\n{prompt}"})
    reply = chat.chat(prompts.investigator, history)
    history.append({"role": "assistant", "content": reply})
    missing = missing_sections(reply)
    if missing:
        history.append(
            {
                "role": "user",
                "content": "The report is missing the following section(s): "
                + ", ".join(missing)
                + ". Rewrite the complete report including every required section.",
            }
        )
        reply = chat.chat(prompts.investigator, history)
        history.append({"role": "assistant", "content": reply})
        missing = missing_sections(reply)
    text, removed = sanitize_ioc_tables(reply, evidence if evidence is not None else doc.text)
    complete = not missing
    if not complete:
        text = f"> {INCOMPLETE_MARKER}: missing section(s): {', '.join(missing)}\n\n{text}"
    return AttackReport(doc.subgraph_id, text, list(validated_iocs), removed, complete)


def _report_chunks(report: AttackReport, size: int):
    lines = report.text.split("\n")
    return ["\n".join(lines[a : a + size]) for a in range(0, len(lines), size)] or [""]


def index_reports(reports, embedder, chunk_size=20) -> VectorIndex:
    index = VectorIndex(embedder)
    for r in reports:
        chunks = _report_chunks(r, chunk_size)
        index.add([f"{r.subgraph_id}#{k:04d}" for k in range(len(chunks))], chunks, r.subgraph_id)
    return index


def extract_iocs_per_stage(reports, stage, chat, prompts: Prompts, report_index: VectorIndex, evidence, config: InvestigationConfig | None = None, log=None) -> IocList:
    """Top IOCs for one kill-chain stage across all reports, validated against the evidence."""
    if stage not in STAGES:
        raise ValueError(f"unknown APT stage {stage!r}")
    config = config or InvestigationConfig()
    names = ", ".join(f"'{r.subgraph_id}'" for r in reports)
    prompt = prompts.ioc_stage.format(report_names=names, stage=stage)
    k = max(config.top_k, len(reports))
    chunks = report_index.retrieve(f"{stage}\n{prompt}", k) if len(report_index) else []
    chunks.sort(key=lambda c: c.chunk_id)
    messages = [{"role": "user", "content": _context_message("Reports", [f"[{c.doc_id}]\n{c.text}" for c in chunks]) + "\n\n" + prompt}]
    parsed = None
    for attempt in range(2):
        reply = chat.chat(prompts.investigator, messages)
        messages.append({"role": "assistant", "content": reply})
        parsed = parse_ioc_list(reply)
        if parsed is not None:
            break
        if attempt == 0:
            messages.append({"role": "user", "content": FORMAT_REMINDER})
    if parsed is None:
        logger.warning("could not parse stage IOCs for %s after a reprompt", stage)
        if log is not None:
            log.append(f"{stage}: unparseable IOC list")
        parsed = []
    return validate_iocs(parsed, evidence)


def compose_comprehensive(reports, per_stage_iocs: dict, chat, prompts: Prompts, evidence) -> ComprehensiveReport:
    if not reports:
        raise ValueError("compose_comprehensive needs at least one attack report")
    stage_iocs = {s: list(per_stage_iocs[s].validated if isinstance(per_stage_iocs[s], IocList) else per_stage_iocs[s]) for s in STAGES if s in per_stage_iocs}
    union = _dedup([v for s in STAGES for v in stage_iocs.get(s, [])])
    prompt = prompts.comprehensive.format(ioc_list=", ".join(f"'{v}'" for v in union))
    blocks = [f"Report {r.subgraph_id}:\n{r.text}" for r in reports]
    messages = [{"role": "user", "content": _context_message("Provided reports", blocks) + "\n\n" + prompt}]
    reply = chat.chat(prompts.investigator, messages)
    text, removed = sanitize_ioc_tables(reply, evidence)
    return ComprehensiveReport(text, stage_iocs, [], [r.subgraph_id for r in reports], removed)


def judge_select_ioc(comp: ComprehensiveReport, node_type: str, judge_chat, prompts: Prompts, allowed) -> str | None:
    """Judge's highest-priority IOC of ``node_type``; must be validated and present in the report."""
    allowed_lower = {a.lower(): a for a in allowed}
    report_text = comp.render().lower()
    prompt = prompts.judge.format(node_type=node_type)
    messages = [{"role": "user", "content": f"Attack report:\n{comp.render()}\n\n{prompt}"}]
    for attempt in range(2):
        reply = judge_chat.chat(prompts.judge_instructions, messages)
        messages.append({"role": "assistant", "content": reply})
        choice = parse_single_ioc(reply)
        if choice and choice.lower() in allowed_lower and choice.lower() in report_text:
            return allowed_lower[choice.lower()]
        if attempt == 0:
            messages.append({"role": "user", "content": JUDGE_REMINDER})
    logger.warning("judge gave no usable %s IOC; skipping that type", node_type)
    return None


_LABEL_FIELDS = set(_FILE_KEYS) | set(_PROCESS_KEYS) | set(_IP_KEYS)


def resolve_ioc_nodes(graph: ProvenanceGraph, ioc: str) -> list:
    """Nodes whose serializer label, or one of its label attributes, equals ``ioc``."""
    hits = []
    for i, nid in enumerate(graph.node_ids):
        attrs = graph.node_attrs[i]
        if node_label(nid, graph.node_types[i], attrs) == ioc or nid == ioc:
            hits.append(nid)
        elif any(attrs.get(k) == ioc for k in _LABEL_FIELDS):
            hits.append(nid)
    return hits


def ioc_context_record(graph: ProvenanceGraph, nodes, anomalous_set, context_id: str) -> dict:
    members, edges = set(), set()
    for n in nodes:
        view = graph.query_ioc_context(n, anomalous_set)
        members |= view.nodes
        edges.update(view.edge_ids)
    return subgraph_record(graph, members, sorted(edges), context_id)


# -- orchestration ---------------------------------------------------------------------


@dataclass
class InvestigationResult:
    reports: list  # per-subgraph AttackReports, followed by context reports
    comprehensive: ComprehensiveReport
    documents: list  # LogDocuments: subgraph docs then context docs
    audit: dict


class Investigator:
    """Runs the full pipeline over a set of subgraph records."""

    def __init__(self, backends, prompts: Prompts | None = None, config: InvestigationConfig | None = None):
        self.backends = backends
        self.prompts = prompts or Prompts.load()
        self.config = config or InvestigationConfig()

    def _stage(self, name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LLMError as exc:
            raise exc.with_stage(name)

    def run(self, subgraphs: list, graph: ProvenanceGraph, anomalous_set) -> InvestigationResult:
        cfg, prompts, chat = self.config, self.prompts, self.backends.chat
        eligible = [s for s in subgraphs if Level.parse(s.get("summary", {}).get("level", "Critical")) >= cfg.min_level]
        if not eligible:
            raise NothingToReport("nothing at reporting level")
        anomalous = set(anomalous_set)
        warnings_log = []
        audit = {"prompt_version": PROMPT_VERSION, "subgraphs": [], "stages": {}, "judge": [], "enrichment": []}

        docs = [serialize_subgraph(s, cfg.chunk_size) for s in eligible]
        log_index = VectorIndex(self.backends.embedder)
        for d in docs:
            log_index.add_document(d)

        reports = []
        for doc in docs:
            history = []  # conversation memory lives only for this subgraph
            raw = self._stage("extract_iocs", extract_iocs, doc, chat, log_index, prompts, cfg, history, warnings_log)
            iocs = validate_iocs(raw, doc.text)
            report = self._stage(
                "summarize_report", summarize_subgraph_report, doc, iocs.validated, chat, prompts, history
            )
            reports.append(report)
            audit["subgraphs"].append(
                {
                    "id": doc.subgraph_id,
                    "iocs": iocs.to_dict(),
                    "removed_table_rows": report.removed_rows,
                    "complete": report.complete,
                }
            )

        evidence = [d.text for d in docs]
        report_index = index_reports(reports, self.backends.embedder, cfg.chunk_size)
        per_stage = {}
        for stage in STAGES:
            per_stage[stage] = self._stage(
                "extract_iocs_per_stage",
                extract_iocs_per_stage,
                reports,
                stage,
                chat,
                prompts,
                report_index,
                evidence,
                cfg,
                warnings_log,
            )
            audit["stages"][stage] = per_stage[stage].to_dict()
        comp = self._stage("compose_comprehensive", compose_comprehensive, reports, per_stage, chat, prompts, evidence)
        audit["comprehensive_removed_table_rows"] = list(comp.removed_rows)

        for node_type in JUDGE_NODE_TYPES:
            allowed = _dedup(
                [v for s in STAGES for v in comp.stage_iocs.get(s, [])]
                + [v for r in reports for v in r.iocs]
            )
            ioc = self._stage("judge_select_ioc", judge_select_ioc, comp, node_type, self.backends.judge, prompts, allowed)
            audit["judge"].append({"node_type": node_type, "ioc": ioc})
            if ioc is None:
                warnings_log.append(f"judge: no usable {node_type} IOC")
                continue
            comp, ctx_doc, ctx_report = self._stage(
                "enrich_with_context",
                enrich_with_context,
                comp,
                ioc,
                node_type,
                graph,
                anomalous,
                chat,
                prompts,
                log_index,
                evidence,
                cfg,
                warnings_log,
            )
            entry = {"node_type": node_type, "ioc": ioc}
            if ctx_doc is not None:
                docs.append(ctx_doc)
                evidence.append(ctx_doc.text)
                entry["context_id"] = ctx_doc.subgraph_id
                entry["context_sentences"] = len(ctx_doc.sentences)
            if ctx_report is not None:
                reports.append(ctx_report)
                entry["removed_table_rows"] = ctx_report.removed_rows
            last = comp.enrichment[-1]
            entry["note"] = last.note
            entry["stages"] = last.stages
            audit["enrichment"].append(entry)

        audit["warnings"] = warnings_log
        audit["rejected_iocs"] = sorted(
            {v for s in audit["subgraphs"] for v in s["iocs"]["rejected"]}
            | {v for st in audit["stages"].values() for v in st["rejected"]}
            | {v for e in audit["enrichment"] for st in e.get("stages", {}).values() for v in st["rejected"]}
        )
        return InvestigationResult(reports, comp, docs, audit)


def enrich_with_context(comp, ioc, node_type, graph, anomalous_set, chat, prompts, log_index, evidence, config=None, log=None):
    """One enrichment round: IOC context subgraph -> stage IOCs -> summary -> merged report.

    Returns ``(comprehensive, context_doc | None, context_report | None)``.
    """
    config = config or InvestigationConfig()
    log = log if log is not None else []
    nodes = resolve_ioc_nodes(graph, ioc)
    if not nodes:
        logger.warning("IOC %r matches no graph node; skipping enrichment", ioc)
        log.append(f"enrichment: {ioc!r} matches no node")
        comp.enrichment.append(EnrichmentEntry(node_type, ioc, "", "", f"IOC `{ioc}` could not be located in the provenance graph."))
        return comp, None, None
    context_id = f"ctx_{node_type.lower()}"
    record = ioc_context_record(graph, nodes, anomalous_set, context_id)
    if not record["edges"]:
        comp.enrichment.append(EnrichmentEntry(node_type, ioc, context_id, "", NO_CONTEXT_NOTE))
        return comp, None, None

    doc = serialize_subgraph(record, config.chunk_size)
    log_index.add_document(doc)
    ctx_evidence = list(evidence) + [doc.text]
    stage_lists = {}
    for stage in STAGES:
        names = f"'{context_id}'"
        prompt = prompts.ioc_stage.format(report_names=names, stage=stage)
        context = _context_message(f"Document {context_id}", _doc_context(log_index, doc, f"{stage}\n{prompt}", config.top_k))
        messages = [{"role": "user", "content": f"{context}\n\n{prompt}"}]
        parsed = None
        for attempt in range(2):
            reply = chat.chat(prompts.investigator, messages)
            messages.append({"role": "assistant", "content": reply})
            parsed = parse_ioc_list(reply)
            if parsed is not None:
                break
            if attempt == 0:
                messages.append({"role": "user", "content": FORMAT_REMINDER})
        stage_lists[stage] = validate_iocs(parsed or [], doc.text)
    ctx_iocs = _dedup([v for s in STAGES for v in stage_lists[s].validated])
    report = summarize_subgraph_report(doc, ctx_iocs, chat, prompts, [], ctx_evidence)

    prompt = prompts.enrich.format(comp_name="R_comp", report_name=context_id)
    messages = [
        {
            "role": "user",
            "content": f"Comprehensive attack report R_comp:\n{comp.text}\n\n"
            f"Attack report {context_id}:\n{report.text}\n\n{prompt}",
        }
    ]
    reply = chat.chat(prompts.investigator, messages)
    text, removed = sanitize_ioc_tables(reply, ctx_evidence)
    stage_iocs = {s: list(v) for s, v in comp.stage_iocs.items()}
    for stage in STAGES:
        merged = _dedup(stage_iocs.get(stage, []) + stage_lists[stage].validated)
        if merged:
            stage_iocs[stage] = merged
    entry = EnrichmentEntry(node_type, ioc, context_id, report.text, stages={s: stage_lists[s].to_dict() for s in STAGES})
    new = ComprehensiveReport(text, stage_iocs, list(comp.enrichment) + [entry], list(comp.source_ids), comp.removed_rows + removed)
    return new, doc, report


def run_investigation(subgraphs, graph, anomalous_set, backends, config=None, prompts=None) -> InvestigationResult:
    return Investigator(backends, prompts, config).run(subgraphs, graph, anomalous_set)
