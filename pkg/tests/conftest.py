import os
import random

import pytest
from hypothesis import HealthCheck, settings

from provsentinel.graph_store import Event, ingest_events

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TYPES = {"P": "PROCESS", "F": "FILE", "I": "IP"}


def ntype(node_id):
    return TYPES[node_id[0]]


def ev(src, action, dst, t=0, sattrs=None, dattrs=None):
    """Event between ids whose first letter names the type (P/F/I)."""
    return Event(src, ntype(src), action, dst, ntype(dst), t, dict(sattrs or {}), dict(dattrs or {}))


def graph_of(triples):
    """Graph from (src, action, dst[, t]) tuples; timestamps default to the row index."""
    events = []
    for k, row in enumerate(triples):
        src, action, dst = row[:3]
        t = row[3] if len(row) > 3 else k
        events.append(ev(src, action, dst, t))
    return ingest_events(events)


def random_graph(rng: random.Random, n_nodes, n_edges, actions=("read", "write", "fork", "connect")):
    ids = [f"{rng.choice('PFI')}{k:03d}" for k in range(n_nodes)]
    rows = []
    for k in range(n_edges):
        rows.append((rng.choice(ids), rng.choice(actions), rng.choice(ids), k * 1000 + rng.randrange(1000)))
    return graph_of(rows), ids


@pytest.fixture
def rng():
    return random.Random(1234)


def benign_graph(n_processes=80, n_files=400, n_ips=40, seed=3):
    """Small benign background from the scenario generator."""
    from provsentinel.evaluation import ScenarioParams, generate_scenario

    params = ScenarioParams(
        n_processes=n_processes,
        n_files=n_files,
        n_ips=n_ips,
        n_shared_files=max(5, n_files // 30),
        duration_s=3 * 3600,
        with_attack=False,
        rng_seed=seed,
    )
    return ingest_events(generate_scenario(params).events)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
