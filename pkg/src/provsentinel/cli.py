"""Command-line entry point: ingest, train, detect, investigate, evaluate, scenario, ask.

Exit codes: 0 success, 1 usage or config error, 2 nothing to report, 3 LLM transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, override
from .evaluation import (
    STRICT,
    TWO_HOP,
    generate_scenario,
    scenario_mock_rules,
    scenario_summary,
    score_strict,
    score_two_hop,
    training_params,
    write_mock_fixture,
)
from .graph_store import GraphError, load, read_events_jsonl, snapshot, write_events_jsonl
from .investigator import NothingToReport, Prompts, run_investigation
from .llm_gateway import Backends, LLMError, LLMSettings, MockScriptError, VectorIndex
from .ocrgcn import DegenerateModelWarning, ModelError, OCRGCNDetector
from .subgraphs import construct_anomalous_subgraphs, read_subgraph_json, write_subgraph_json

logger = logging.getLogger("provsentinel")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_TRANSPORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _dump_json(data, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _need(value, what):
    if value is None:
        raise UsageError(f"missing {what} (pass it on the command line or set it in the config file)")
    return value


def _existing(path, what):
    p = Path(_need(path, what))
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_graph(path, what="graph snapshot"):
    return load(_existing(path, what))


def _detector(cfg: RunConfig) -> OCRGCNDetector:
    t = cfg.training
    return OCRGCNDetector(
        learning_rate=t.learning_rate,
        n_layers=t.n_layers,
        hidden_dim=t.hidden_dim,
        beta=t.beta,
        min_con=t.min_con,
        max_con=t.max_con,
        max_epochs=t.max_epochs,
        patience=t.patience,
        val_fraction=t.val_fraction,
        random_state=t.rng_seed,
        n_jobs=cfg.jobs,
    )


# -- commands ---------------------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig) -> int:
    events = _existing(args.events or cfg.paths.events, "events file")
    out = _need(args.out or cfg.paths.snapshot, "output snapshot path (--out)")
    diagnostics = []
    existing = load(args.append) if args.append else None
    graph = read_events_jsonl(events, existing=existing, diagnostics=diagnostics)
    for diag in diagnostics:
        print(f"warning: {events}: {diag}", file=sys.stderr)
    counts = {t: len(graph.nodes_of_type(t)) for t in graph.type_vocab}
    print(f"nodes: {graph.n_nodes}  edges: {graph.n_edges}  rejected: {len(diagnostics)}")
    for t, n in counts.items():
        print(f"  {t:<10} {n}")
    if diagnostics and args.strict:
        print(f"error: {len(diagnostics)} record(s) rejected (--strict); snapshot not written", file=sys.stderr)
        return EXIT_USAGE
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    snapshot(graph, out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    graph = _load_graph(args.snapshot or cfg.paths.snapshot, "benign snapshot")
    out = _need(args.out or cfg.paths.model, "output model path (--out)")
    det = _detector(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateModelWarning)
        det.fit(graph)
    for w in caught:
        if issubclass(w.category, DegenerateModelWarning):
            print(f"warning: {w.message}", file=sys.stderr)
    for t, m in det.models_.items():
        tail = ", ".join(f"{v:.4f}" for v in m.loss_history[-5:])
        print(f"{t:<10} epochs={len(m.loss_history):<4} loss tail=[{tail}]")
        print(f"{'':<10} threshold={m.sphere.threshold:.6g} radius={m.sphere.radius:.6g} contamination={m.contamination:g}")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    det.save(out)
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    det = OCRGCNDetector.load(_existing(args.model or cfg.paths.model, "model file"))
    graph = _load_graph(args.snapshot or cfg.paths.snapshot, "test snapshot")
    out = Path(_need(args.out or cfg.paths.out_dir, "output directory (--out)"))
    scores = det.score_samples(graph)
    flagged = det.detect(graph)
    kept, everything = construct_anomalous_subgraphs(graph, flagged, cfg.subgraphs, return_all=True)

    out.mkdir(parents=True, exist_ok=True)
    sg_dir = out / "subgraphs"
    sg_dir.mkdir(exist_ok=True)
    for old in sg_dir.glob("sg_*.json"):
        old.unlink()
    nodes = [
        {"id": n, "type": graph.node_type(n), "score": flagged[n]}
        for n in sorted(flagged, key=lambda n: (-flagged[n], n))
    ]
    _dump_json(nodes, out / "anomalous_nodes.json")
    for sg in everything:
        write_subgraph_json(sg, graph, scores, sg_dir / f"{sg.id}.json")
    rows = [
        {
            "id": sg.id,
            "level": sg.level.name,
            "score": sg.score,
            "seed": sg.seed,
            "n_nodes": len(sg.nodes),
            "n_edges": sg.n_edges,
            "n_anomalous": len(sg.anomalous_nodes),
        }
        for sg in everything
    ]
    summary = {
        "n_nodes": graph.n_nodes,
        "n_anomalous": len(flagged),
        "thresholds": det.thresholds_,
        "reporting_level": cfg.subgraphs.min_level.name,
        "n_reportable": len(kept),
        "subgraphs": rows,
    }
    _dump_json(summary, out / "summary.json")
    print(f"anomalous nodes: {len(flagged)} / {graph.n_nodes}   subgraphs: {len(everything)} ({len(kept)} at >= {cfg.subgraphs.min_level.name})")
    if rows:
        print(f"{'id':<8} {'level':<12} {'score':>12} {'nodes':>6} {'edges':>6}  seed")
        for r in rows:
            print(f"{r['id']:<8} {r['level']:<12} {r['score']:>12.3f} {r['n_nodes']:>6} {r['n_edges']:>6}  {r['seed']}")
    return EXIT_OK


def _backends(args, cfg: RunConfig) -> Backends:
    settings = LLMSettings.from_env(cfg.llm)
    if getattr(args, "mock", None):
        settings = LLMSettings(**{**asdict(settings), "mock_script": args.mock})
    if settings.mock_script and not Path(settings.mock_script).is_file():
        raise UsageError(f"mock script not found: {settings.mock_script}")
    return Backends.from_settings(settings)


def cmd_investigate(args, cfg: RunConfig) -> int:
    detect_dir = _existing(args.detect_dir or cfg.paths.out_dir, "detect output directory")
    graph = _load_graph(args.graph or cfg.paths.snapshot, "graph snapshot")
    out = Path(_need(args.out, "output directory (--out)"))
    sg_files = sorted((detect_dir / "subgraphs").glob("sg_*.json"))
    anomalous = [n["id"] for n in _read_json(detect_dir / "anomalous_nodes.json")]
    records = [read_subgraph_json(p) for p in sg_files]
    backends = _backends(args, cfg)
    prompts = Prompts.load(args.prompts) if args.prompts else None
    try:
        result = run_investigation(records, graph, anomalous, backends, cfg.investigation, prompts)
    except NothingToReport as exc:
        print(f"refusing to investigate: {exc} (no subgraph at or above {cfg.investigation.min_level.name})", file=sys.stderr)
        return EXIT_EMPTY

    out.mkdir(parents=True, exist_ok=True)
    rep_dir, doc_dir = out / "reports", out / "docs"
    rep_dir.mkdir(exist_ok=True)
    doc_dir.mkdir(exist_ok=True)
    for report in result.reports:
        (rep_dir / f"{report.subgraph_id}.md").write_text(report.text.rstrip() + "\n", encoding="utf-8")
    chunks = {}
    for doc in result.documents:
        (doc_dir / f"{doc.subgraph_id}.txt").write_text(doc.text + "\n", encoding="utf-8")
        chunks[doc.subgraph_id] = [list(c) for c in doc.chunks]
    _dump_json(chunks, doc_dir / "chunks.json")
    (out / "comprehensive_report.md").write_text(result.comprehensive.render(), encoding="utf-8")
    _dump_json(result.audit, out / "audit.json")
    calls = getattr(backends.chat, "call_log", None)
    if calls is not None:
        _dump_json(calls, out / "calls.json")
    stages = result.comprehensive.stages_named
    print(f"reports: {len(result.reports)}   stages named: {len(stages)}/8")
    for s in stages:
        print(f"  {s}: {', '.join(result.comprehensive.stage_iocs[s])}")
    print(f"rejected IOCs: {len(result.audit['rejected_iocs'])}")
    return EXIT_OK


def _labels(path):
    data = _read_json(path)
    if isinstance(data, dict):
        data = data.get("malicious", data.get("labels"))
    if not isinstance(data, list):
        raise UsageError(f"{path}: expected a list of node ids or an object with a 'malicious' list")
    return [d["id"] if isinstance(d, dict) else d for d in data]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    graph = _load_graph(args.graph or cfg.paths.snapshot)
    flagged_path = Path(args.flagged)
    if flagged_path.is_dir():
        flagged_path = flagged_path / "anomalous_nodes.json"
    flagged, labels = _labels(flagged_path), _labels(args.labels)
    try:
        outcome = score_two_hop(flagged, labels, graph) if args.mode == TWO_HOP else score_strict(flagged, labels, graph)
    except ValueError as exc:
        raise UsageError(f"labels do not match the graph: {exc}") from None
    print(outcome.table())
    print(json.dumps(outcome.to_dict(), sort_keys=True))
    if args.json:
        _dump_json(outcome.to_dict(), args.json)
    return EXIT_OK


def cmd_scenario(args, cfg: RunConfig) -> int:
    params = cfg.scenario
    if args.seed is not None:
        params = override(cfg, "scenario", rng_seed=args.seed).scenario
    out = Path(_need(args.out or cfg.paths.out_dir, "output directory (--out)"))
    out.mkdir(parents=True, exist_ok=True)
    test = generate_scenario(params)
    train = generate_scenario(training_params(params))
    write_events_jsonl(test.events, out / "test_events.jsonl")
    write_events_jsonl(train.events, out / "train_events.jsonl")
    _dump_json({"malicious": sorted(test.malicious)}, out / "labels.json")
    _dump_json(
        {"expected_iocs": test.expected_iocs, "expected_stages": test.expected_stages, "stage_iocs": test.stage_iocs},
        out / "expected.json",
    )
    _dump_json(scenario_summary(test), out / "scenario.json")
    write_mock_fixture(scenario_mock_rules(test), out / "mock_llm.json")
    print(f"test events: {len(test.events)}   train events: {len(train.events)}   planted nodes: {len(test.malicious)}")
    print(f"written to {out}")
    return EXIT_OK


ASK_PROMPT = "Answer the analyst question using only the provided context.\n\nAnalyst question: {question}"


def cmd_ask(args, cfg: RunConfig) -> int:
    inv_dir = _existing(args.investigation or cfg.paths.out_dir, "investigation output directory")
    backends = _backends(args, cfg)
    index = VectorIndex(backends.embedder)
    size = cfg.investigation.chunk_size
    sources = sorted((inv_dir / "reports").glob("*.md")) + sorted((inv_dir / "docs").glob("*.txt"))
    comp = inv_dir / "comprehensive_report.md"
    if comp.exists():
        sources.insert(0, comp)
    if not sources:
        raise UsageError(f"{inv_dir}: no reports or documents to search (run investigate first)")
    for path in sources:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        texts = ["\n".join(lines[a : a + size]) for a in range(0, len(lines), size)]
        doc_id = f"{path.parent.name}/{path.name}"
        index.add([f"{doc_id}#{k:04d}" for k in range(len(texts))], texts, doc_id)
    hits = index.retrieve(args.question, k=args.k or cfg.investigation.top_k)
    context = "\n\n".join(f"[{h.chunk_id}]\n{h.text}" for h in hits)
    prompts = Prompts.load()
    message = f"Context:\n{context}\n\n" + ASK_PROMPT.format(question=args.question)
    answer = backends.chat.chat(prompts.investigator, [{"role": "user", "content": message}])
    print(answer.rstrip())
    print("\nsources: " + ", ".join(h.chunk_id for h in hits))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="provsentinel", description="Provenance-graph APT detection and LLM reporting.")
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--jobs", type=int, help="worker cap for parallel stages")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="build a graph snapshot from a JSONL event log")
    s.add_argument("events", nargs="?")
    s.add_argument("--out", help="snapshot to write")
    s.add_argument("--append", help="existing snapshot to extend")
    s.add_argument("--strict", action="store_true", help="fail if any record is rejected")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="fit per-type models on a benign snapshot")
    s.add_argument("snapshot", nargs="?")
    s.add_argument("--out", help="model file to write")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="flag anomalous nodes and build subgraphs")
    s.add_argument("snapshot", nargs="?")
    s.add_argument("--model")
    s.add_argument("--out", help="output directory")
    s.add_argument("--min-level")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("investigate", help="generate attack reports from detect output")
    s.add_argument("detect_dir", nargs="?")
    s.add_argument("--graph", help="graph snapshot the subgraphs came from")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--mock", help="JSON mock-LLM fixture (offline mode)")
    s.add_argument("--prompts", help="directory overriding prompt templates")
    s.add_argument("--min-level")
    s.set_defaults(func=cmd_investigate)

    s = sub.add_parser("evaluate", help="score flagged nodes against labels")
    s.add_argument("--flagged", required=True, help="anomalous_nodes.json, a detect directory, or a JSON id list")
    s.add_argument("--labels", required=True, help="JSON id list or {'malicious': [...]}")
    s.add_argument("--graph", help="graph snapshot")
    s.add_argument("--mode", choices=(TWO_HOP, STRICT), default=TWO_HOP)
    s.add_argument("--json", help="also write the outcome here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("scenario", help="generate a seeded synthetic attack scenario")
    s.add_argument("--out", help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("ask", help="answer one follow-up question over an investigation")
    s.add_argument("question")
    s.add_argument("--investigation", help="investigate output directory")
    s.add_argument("--mock", help="JSON mock-LLM fixture (offline mode)")
    s.add_argument("-k", type=int, help="chunks to retrieve")
    s.set_defaults(func=cmd_ask)
    return p


def _configure(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.jobs = args.jobs
    if args.command == "train":
        cfg = override(cfg, "training", rng_seed=args.seed, max_epochs=args.epochs)
    if getattr(args, "min_level", None):
        section = "subgraphs" if args.command == "detect" else "investigation"
        cfg = override(cfg, section, min_level=args.min_level)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _configure(args)
        return args.func(args, cfg)
    except LLMError as exc:
        stage = exc.stage or "llm"
        print(f"error: LLM call failed during stage '{stage}': {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except MockScriptError as exc:
        print(f"error: mock LLM script: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError, GraphError, ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
