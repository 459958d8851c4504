"""Detection metrics (two-hop and strict) and a seeded synthetic APT scenario."""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .graph_store import Event, ProvenanceGraph

TWO_HOP = "two_hop"
STRICT = "strict"


@dataclass
class DetectionOutcome:
    tp: int
    fp: int
    fn: int
    tn: int
    mode: str

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    def table(self) -> str:
        d = self.to_dict()
        rows = [f"{k:>9}  {v:.4f}" if isinstance(v, float) else f"{k:>9}  {v}" for k, v in d.items()]
        return "\n".join(rows)


def _check_subset(nodes, graph, what):
    missing = [n for n in nodes if n not in graph]
    if missing:
        raise ValueError(f"{what} contains {len(missing)} id(s) not in the graph, e.g. {missing[0]!r}")


def _within_two_hops(graph: ProvenanceGraph, sources) -> set:
    """Nodes at undirected distance <= 2 from any node in ``sources`` (sources included)."""
    reach = set(sources)
    frontier = set(sources)
    for _ in range(2):
        nxt = set()
        for n in frontier:
            nxt |= graph.neighbors(n)
        nxt -= reach
        reach |= nxt
        frontier = nxt
    return reach


def score_two_hop(flagged, labels, graph: ProvenanceGraph) -> DetectionOutcome:
    """Malicious nodes count as found if they or a node within two hops is flagged;
    flagged benign nodes are false positives only with no malicious node within two hops."""
    flagged, labels = set(flagged), set(labels)
    _check_subset(flagged, graph, "flagged set")
    _check_subset(labels, graph, "labels")
    near_flagged = _within_two_hops(graph, flagged)
    near_malicious = _within_two_hops(graph, labels)
    tp = len(labels & near_flagged)
    fn = len(labels) - tp
    fp = len({n for n in flagged - labels if n not in near_malicious})
    tn = graph.n_nodes - tp - fn - fp
    return DetectionOutcome(tp, fp, fn, tn, TWO_HOP)


def score_strict(flagged, labels, n_nodes=None) -> DetectionOutcome:
    """Plain set-overlap confusion matrix; ``tn`` needs the population size."""
    flagged, labels = set(flagged), set(labels)
    tp = len(flagged & labels)
    fp = len(flagged - labels)
    fn = len(labels - flagged)
    if isinstance(n_nodes, ProvenanceGraph):
        _check_subset(flagged, n_nodes, "flagged set")
        _check_subset(labels, n_nodes, "labels")
        n_nodes = n_nodes.n_nodes
    tn = (n_nodes - tp - fp - fn) if n_nodes is not None else 0
    return DetectionOutcome(tp, fp, fn, tn, STRICT)


# -- synthetic scenario ----------------------------------------------------------------

ACTIONS = ("read", "write", "execute", "fork", "connect", "send", "receive", "delete", "modify")

_PROGRAMS = [
    # image, weights over (read, write, execute, fork, connect, send, receive, delete, modify)
    ("C:\\Windows\\explorer.exe", (6, 1, 1, 2, 0, 0, 0, 0, 1)),
    ("C:\\Windows\\System32\\svchost.exe", (5, 3, 0, 0, 2, 2, 2, 0, 1)),
    ("C:\\Program Files\\Mozilla Firefox\\firefox.exe", (4, 3, 0, 0, 4, 4, 5, 1, 0)),
    ("C:\\Program Files\\Microsoft Office\\WINWORD.EXE", (6, 3, 0, 0, 0, 0, 0, 1, 1)),
    ("C:\\Windows\\System32\\cmd.exe", (3, 1, 1, 2, 0, 0, 0, 1, 0)),
    ("C:\\Windows\\System32\\conhost.exe", (5, 1, 0, 0, 0, 0, 0, 0, 0)),
    ("C:\\Windows\\System32\\lsass.exe", (7, 2, 0, 0, 1, 1, 1, 0, 0)),
    ("C:\\Windows\\System32\\taskhostw.exe", (5, 2, 0, 1, 0, 0, 0, 0, 1)),
    ("C:\\Program Files\\Google\\Chrome\\chrome.exe", (4, 3, 0, 1, 4, 4, 5, 1, 0)),
    ("C:\\Windows\\System32\\SearchIndexer.exe", (9, 2, 0, 0, 0, 0, 0, 0, 1)),
    ("C:\\Windows\\System32\\OneDrive.exe", (4, 4, 0, 0, 3, 4, 3, 1, 1)),
    ("C:\\Windows\\System32\\WmiPrvSE.exe", (5, 1, 0, 1, 1, 1, 1, 0, 0)),
]


@dataclass
class ScenarioParams:
    n_processes: int = 600
    n_files: int = 3900
    n_ips: int = 450
    n_shared_files: int = 120
    duration_s: int = 15 * 3600
    start_us: int = 1_569_888_000_000_000  # 2019-10-01T00:00:00Z
    mean_gap_s: float = 2.0
    events_per_process: int = 18
    with_attack: bool = True
    attack_start_s: float = 1800.0
    attack_step_s: float = 300.0
    dormant_s: float = 7200.0
    rng_seed: int = 7

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioParams":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class Scenario:
    events: list
    malicious: set
    expected_iocs: list
    expected_stages: list
    params: ScenarioParams
    stage_iocs: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), separators=(",", ":")) + "\n" for e in self.events)


class _Builder:
    def __init__(self, start_us):
        self.start = start_us
        self.events = []
        self.types = {}
        self.attrs = {}

    def node(self, nid, ntype, **attrs):
        self.types[nid] = ntype
        self.attrs[nid] = {k: str(v) for k, v in attrs.items()}
        return nid

    def emit(self, t_s, subj, action, obj):
        self.events.append(
            Event(
                subj,
                self.types[subj],
                action,
                obj,
                self.types[obj],
                self.start + int(round(t_s * 1_000_000)),
                dict(self.attrs[subj]),
                dict(self.attrs[obj]),
            )
        )


def _gap(rng, mean):
    # bounded jitter around the mean keeps benign idle times short and regular
    return mean * rng.uniform(0.5, 1.5)


def _benign(b: _Builder, p: ScenarioParams, rng: np.random.Generator):
    n_private = p.n_files - p.n_shared_files
    shared = [
        b.node(f"F{k:05d}", "FILE", path=f"C:\\Windows\\System32\\lib{k:03d}.dll")
        for k in range(p.n_shared_files)
    ]
    private = [
        b.node(f"F{p.n_shared_files + k:05d}", "FILE", path=f"C:\\Users\\user{k % 40:02d}\\Documents\\doc_{k:05d}.dat")
        for k in range(n_private)
    ]
    ips = [
        b.node(f"I{k:05d}", "IP", remote_address=f"10.{(k // 250) % 250}.{k % 250}.{(k * 7) % 250 + 1}", remote_port=443)
        for k in range(p.n_ips)
    ]
    procs = []
    for k in range(p.n_processes):
        image, weights = _PROGRAMS[k % len(_PROGRAMS)]
        procs.append((b.node(f"P{k:05d}", "PROCESS", image=image, pid=1000 + k), np.asarray(weights, float)))

    private_of = np.array_split(np.arange(n_private), p.n_processes)
    ip_of = np.array_split(rng.permutation(p.n_ips), p.n_processes)
    start = rng.uniform(0, p.duration_s - 600, size=p.n_processes)
    # sessions run in start order; a fork moves the child's session to the fork time,
    # so forked processes never sit idle between their creation and their own work
    queue = [(start[k], k) for k in range(p.n_processes)]
    heapq.heapify(queue)
    done = set()
    while queue:
        t, k = heapq.heappop(queue)
        if k in done or t != start[k]:
            continue
        done.add(k)
        proc, weights = procs[k]
        mine = [private[j] for j in private_of[k]]
        my_ips = [ips[j] for j in ip_of[k]]
        probs = weights / weights.sum()
        n_events = max(3, int(rng.poisson(p.events_per_process)))
        for _ in range(n_events):
            t += _gap(rng, p.mean_gap_s)
            action = ACTIONS[rng.choice(len(ACTIONS), p=probs)]
            if action in ("connect", "send", "receive") and my_ips:
                b.emit(t, proc, action, my_ips[rng.integers(len(my_ips))])
                continue
            if action == "fork":
                waiting = [j for j in range(p.n_processes) if j not in done and start[j] > t]
                if waiting:
                    child = waiting[rng.integers(len(waiting))]
                    start[child] = t + _gap(rng, p.mean_gap_s)
                    heapq.heappush(queue, (start[child], child))
                    b.emit(t, proc, "fork", procs[child][0])
                    continue
            if action == "execute":
                b.emit(t, proc, "execute", shared[rng.integers(len(shared))])
                continue
            if action in ("write", "delete", "modify") and mine:
                b.emit(t, proc, action, mine[rng.integers(len(mine))])
                continue
            pool = mine if (mine and rng.random() < 0.5) else shared
            b.emit(t, proc, "read", pool[rng.integers(len(pool))])
        # every private file and ip is touched at least twice inside the session
        for target in mine + my_ips:
            verb = "write" if target in mine else "send"
            for _ in range(2):
                t += _gap(rng, p.mean_gap_s)
                b.emit(t, proc, verb, target)


# Attacker-created nodes. Each one takes part in at least two steps of the
# script below and consecutive steps are minutes apart, so every planted node
# idles far longer between events than the benign background does.
_ATTACK_NODES = {
    "stage_ip": ("IP", {"remote_address": "192.0.2.10", "remote_port": 80}),
    "c2_ip": ("IP", {"remote_address": "198.51.100.23", "remote_port": 443}),
    "payload_file": ("FILE", {"path": "C:\\ProgramData\\svc_update.exe"}),
    "payload": ("PROCESS", {"image": "C:\\ProgramData\\svc_update.exe", "pid": 7720}),
    "dll": ("FILE", {"path": "C:\\ProgramData\\uac_bypass.dll"}),
    "elevate": ("PROCESS", {"image": "C:\\Windows\\System32\\fodhelper.exe", "pid": 7804}),
    "schtasks": ("PROCESS", {"image": "C:\\Windows\\System32\\schtasks.exe", "pid": 7911}),
    "task_file": ("FILE", {"path": "C:\\Windows\\System32\\Tasks\\SvcUpdate"}),
}
_RECON = [
    "whoami.exe", "ipconfig.exe", "net.exe", "systeminfo.exe", "tasklist.exe", "nltest.exe",
    "netstat.exe", "quser.exe", "arp.exe", "route.exe", "hostname.exe", "reg.exe",
    "wmic.exe", "sc.exe", "dsquery.exe", "qwinsta.exe", "klist.exe", "cmdkey.exe",
    "gpresult.exe", "fsutil.exe", "driverquery.exe", "getmac.exe", "netsh.exe", "nslookup.exe",
    "ping.exe", "tracert.exe", "vssadmin.exe", "icacls.exe", "where.exe", "findstr.exe",
    "certutil.exe", "bitsadmin.exe", "net1.exe", "nbtstat.exe", "setspn.exe", "query.exe",
    "logman.exe", "auditpol.exe", "bcdedit.exe", "cipher.exe", "chcp.exe",
]

_STAGE_IOCS = {
    "Initial Compromise": ["192.0.2.10", "C:\\ProgramData\\svc_update.exe"],
    "Internal Reconnaissance": ["C:\\Windows\\System32\\whoami.exe", "C:\\Windows\\System32\\nltest.exe"],
    "Command and Control": ["198.51.100.23"],
    "Privilege Escalation": ["C:\\ProgramData\\uac_bypass.dll", "C:\\Windows\\System32\\fodhelper.exe"],
    "Maintain Persistence": ["C:\\Windows\\System32\\Tasks\\SvcUpdate", "C:\\Windows\\System32\\schtasks.exe"],
    "Data Exfiltration": ["198.51.100.23"],
    "Covering Tracks": ["C:\\ProgramData\\svc_update.exe"],
}


_DORMANT = ("sleep",)  # the implant lies dormant before its first beacon


class _Burst(list):
    """Steps emitted a few seconds apart within one slot of the script."""


def _attack_script(d, recon, sysfile, core_libs):
    """Ordered (subject, action, object) steps of the planted attack."""
    steps = [
        # a user browser (benign) fetches the trojanized update and launches it
        _Burst(
            [(d["browser"], "read", sysfile()) for _ in range(4)]
            + [(d["browser"], "connect", d["stage_ip"]), (d["browser"], "receive", d["stage_ip"]), (d["browser"], "write", d["payload_file"])]
            + [(d["browser"], "read", sysfile()) for _ in range(4)]
            + [(d["browser"], "fork", d["payload"]), (d["payload"], "execute", d["payload_file"])]
        ),
        (d["payload"], "connect", d["stage_ip"]),
        _DORMANT,
        (d["payload"], "connect", d["c2_ip"]),
    ]
    beacon = _Burst([(d["payload"], a, d["c2_ip"]) for a in ("connect", "send", "receive", "receive")])
    half = len(recon) // 2
    for k, tool in enumerate(recon):
        if k % 3 == 0:
            steps.append(beacon)
        steps += [(d["payload"], "fork", tool), _Burst([(tool, "read", lib) for lib in core_libs])]
        if k == 5:
            steps += [(d["payload"], "write", d["dll"]), (d["payload"], "fork", d["elevate"])]
            steps += [(d["elevate"], "read", d["dll"]), (d["elevate"], "modify", sysfile())]
        if k == half:
            steps.append(_DORMANT)
    steps += [
        (d["payload"], "fork", d["schtasks"]),
        (d["schtasks"], "write", d["task_file"]),
        (d["payload"], "modify", d["task_file"]),
        beacon,
        # collected output leaves over the command channel
        _Burst([(d["payload"], "send", d["c2_ip"]) for _ in range(6)]),
        (d["payload"], "delete", d["payload_file"]),
    ]
    return steps


def _attack(b: _Builder, p: ScenarioParams, rng: np.random.Generator, benign_files, first_id):
    ids = {}
    counter = iter(range(first_id, first_id + 1000))
    prefix = {"IP": "I", "PROCESS": "P", "FILE": "F"}
    for key, (ntype, attrs) in _ATTACK_NODES.items():
        ids[key] = b.node(f"{prefix[ntype]}{next(counter):05d}", ntype, **attrs)
    browser = b.node(f"P{next(counter):05d}", "PROCESS", image="C:\\Program Files\\Mozilla Firefox\\firefox.exe", pid=5480)
    recon = [
        b.node(f"P{next(counter):05d}", "PROCESS", image=f"C:\\Windows\\System32\\{name}", pid=8200 + k)
        for k, name in enumerate(_RECON)
    ]
    # every tool loads the same core libraries; other touches use distinct ones
    libs = iter(rng.permutation(benign_files))
    core_libs = [str(next(libs)), str(next(libs))]
    sysfile = lambda: str(next(libs))  # noqa: E731
    t = p.attack_start_s
    for step in _attack_script({**ids, "browser": browser}, recon, sysfile, core_libs):
        if step is _DORMANT:
            t += p.dormant_s
            continue
        if isinstance(step, _Burst):
            for k, sub in enumerate(step):
                b.emit(t + 2.0 * k, *sub)
        else:
            b.emit(t, *step)
        t += p.attack_step_s * rng.uniform(1.0, 1.3)
    return set(ids.values()) | set(recon)


def generate_scenario(params: ScenarioParams | None = None) -> Scenario:
    """Seeded benign background plus, optionally, a planted multi-stage attack.

    Returns events sorted by time, the malicious node ids, the IOC strings a
    complete report should name, and the kill-chain stages the attack covers.
    """
    p = params or ScenarioParams()
    rng = np.random.default_rng(p.rng_seed)
    b = _Builder(p.start_us)
    _benign(b, p, rng)
    malicious = set()
    stages, iocs, stage_iocs = [], [], {}
    if p.with_attack:
        shared = [n for n in b.types if n.startswith("F") and int(n[1:]) < p.n_shared_files]
        first = p.n_processes + p.n_files + p.n_ips
        malicious = _attack(b, p, rng, shared, first)
        stage_iocs = {s: list(v) for s, v in _STAGE_IOCS.items()}
        stages = list(_STAGE_IOCS)
        iocs = []
        for v in _STAGE_IOCS.values():
            for ioc in v:
                if ioc not in iocs:
                    iocs.append(ioc)
    events = sorted(b.events, key=lambda ev: (ev.timestamp_us, ev.subject_id, ev.action, ev.object_id))
    scenario = Scenario(events, malicious, iocs, stages, p, stage_iocs)
    if malicious:
        ratio = idle_gap_ratio(scenario)
        if ratio < MIN_IDLE_RATIO:
            raise ValueError(
                f"planted nodes are not slow enough (idle ratio {ratio:.2f} < {MIN_IDLE_RATIO}); "
                "raise attack_step_s or lower mean_gap_s"
            )
    return scenario


MIN_IDLE_RATIO = 5.0


def training_params(params: ScenarioParams) -> ScenarioParams:
    """Benign-only stream for training, drawn from a different seed than the test stream."""
    return replace(params, rng_seed=params.rng_seed + 4, with_attack=False)


def idle_gap_ratio(scenario: Scenario) -> float:
    """Smallest planted-node mean idle gap over the benign mean of per-node means."""
    nodes = set()
    for ev in scenario.events:
        nodes.add(ev.subject_id)
        nodes.add(ev.object_id)
    gaps = idle_gap_means(scenario.events, nodes)
    benign = [g for n, g in gaps.items() if n not in scenario.malicious]
    planted = [g for n, g in gaps.items() if n in scenario.malicious]
    if not benign or not planted:
        return float("inf")
    return min(planted) / float(np.mean(benign))


def idle_gap_means(events, nodes) -> dict:
    """Mean idle gap in seconds per node (nodes with < 2 events omitted)."""
    times = {n: [] for n in nodes}
    for ev in events:
        if ev.subject_id in times:
            times[ev.subject_id].append(ev.timestamp_us)
        if ev.object_id in times and ev.object_id != ev.subject_id:
            times[ev.object_id].append(ev.timestamp_us)
    out = {}
    for n, ts in times.items():
        if len(ts) >= 2:
            out[n] = float(np.mean(np.diff(np.sort(ts)))) / 1e6
    return out


def _fabricated():
    return ["malicious.exe", "10.66.66.66", "C:\\Temp\\ghost_loader.dll"]


def _report_markdown(title, iocs, stages, fabricated):
    rows = "\n".join(f"| `{ioc}` | Observed in the alert logs; exploitation likelihood high. |" for ioc in iocs + fabricated)
    stage_lines = "\n".join(f"- **{s}**: activity consistent with this stage." for s in stages)
    return (
        f"# {title}\n\n"
        "## Summary of Attack Behavior\n\n"
        "A trojanized update fetched by the browser beaconed to a remote server, "
        "ran discovery tools, escalated privileges, persisted through a scheduled task, "
        "sent collected data out and deleted its own binary.\n\n"
        f"{stage_lines}\n\n"
        "## Indicators of Compromise\n\n"
        "| IOC | Security Context |\n|---|---|\n"
        f"{rows}\n\n"
        "## Chronological Log of Actions\n\n"
        "- Actions are listed in the source log document, grouped by minute.\n"
    )


def scenario_mock_rules(scenario: Scenario, fabricated=None) -> list:
    """Mock-LLM script for a scenario: every extraction also returns fabricated IOCs.

    Returns ``[{"pattern": ..., "response": ...}]`` records, the JSON fixture layout.
    """
    fabricated = list(fabricated) if fabricated is not None else _fabricated()
    as_list = lambda values: "```python\n[" + ", ".join(repr(v) for v in values) + "]\n```"  # noqa: E731
    rules = [
        {"pattern": r"Extract the list of IOCs from the document", "response": "Here are the IOCs:\n" + as_list(scenario.expected_iocs + fabricated)},
        {"pattern": r"Summarize the \S+ document into an attack report", "response": _report_markdown("Attack Report", scenario.expected_iocs, scenario.expected_stages, fabricated)},
    ]
    for stage in [
        "Initial Compromise",
        "Internal Reconnaissance",
        "Command and Control",
        "Privilege Escalation",
        "Lateral Movement",
        "Maintain Persistence",
        "Data Exfiltration",
        "Covering Tracks",
    ]:
        values = scenario.stage_iocs.get(stage, [])
        rules.append({"pattern": rf"related to the stage: {stage}\b", "response": as_list(values + fabricated[:1])})
    rules.append(
        {
            "pattern": r"Summarize all provided reports into a comprehensive attack report",
            "response": _report_markdown("Comprehensive Attack Report", scenario.expected_iocs, scenario.expected_stages, fabricated),
        }
    )
    by_kind = {"IP": None, "PROCESS": None, "FILE": None}
    for ioc in scenario.expected_iocs:
        kind = "IP" if ioc[0].isdigit() else ("PROCESS" if ioc.endswith(".exe") else "FILE")
        if by_kind[kind] is None:
            by_kind[kind] = ioc
    for kind, ioc in by_kind.items():
        if ioc:
            rules.append({"pattern": rf"highest-priority {kind} IOC", "response": f"'{ioc}'"})
    rules.append(
        {
            "pattern": r"Enrich the comprehensive attack report",
            "response": _report_markdown("Comprehensive Attack Report (enriched)", scenario.expected_iocs, scenario.expected_stages, fabricated),
        }
    )
    # follow-up questions get the retrieved context echoed back
    rules.append({"pattern": r"Analyst question:", "response": "Answer grounded in the retrieved context:\n\n{{last_user}}"})
    return rules


def write_mock_fixture(rules, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"rules": rules}, fh, indent=2)
        fh.write("\n")


def scenario_summary(scenario: Scenario) -> dict:
    return {
        "params": asdict(scenario.params),
        "n_events": len(scenario.events),
        "malicious": sorted(scenario.malicious),
        "expected_iocs": scenario.expected_iocs,
        "expected_stages": scenario.expected_stages,
    }
