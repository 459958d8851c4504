"""Run configuration: one TOML or JSON file, overridable from the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .evaluation import ScenarioParams
from .investigator import InvestigationConfig
from .llm_gateway import LLMSettings
from .ocrgcn import TrainingConfig
from .subgraphs import Level, SubgraphConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    events: str | None = None
    snapshot: str | None = None
    model: str | None = None
    out_dir: str | None = None


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    subgraphs: SubgraphConfig = field(default_factory=SubgraphConfig)
    investigation: InvestigationConfig = field(default_factory=InvestigationConfig)
    llm: LLMSettings = field(default_factory=LLMSettings)
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    jobs: int = 1

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
        for section in ("subgraphs", "investigation"):
            out[section]["min_level"] = Level(out[section]["min_level"]).name
        out["subgraphs"]["level_thresholds"] = list(out["subgraphs"]["level_thresholds"])
        return out


_SECTIONS = {
    "paths": Paths,
    "training": TrainingConfig,
    "subgraphs": SubgraphConfig,
    "investigation": InvestigationConfig,
    "llm": LLMSettings,
    "scenario": ScenarioParams,
}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    values = dict(values)
    try:
        if "min_level" in values:
            values["min_level"] = Level.parse(values["min_level"])
        if "level_thresholds" in values:
            values["level_thresholds"] = tuple(float(v) for v in values["level_thresholds"])
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def from_mapping(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS) - {"jobs"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kwargs = {name: _build(cls, data.get(name, {}) or {}, name) for name, cls in _SECTIONS.items()}
    jobs = data.get("jobs", 1)
    if not isinstance(jobs, int) or jobs < 1:
        raise ConfigError("jobs must be a positive integer")
    return RunConfig(jobs=jobs, **kwargs)


def load_config(path=None) -> RunConfig:
    """Read a ``.toml`` or ``.json`` config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw = p.read_bytes()
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: cannot parse config ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a table/object")
    return from_mapping(data)


def override(config: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``config`` with non-None ``values`` set on one section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return config
    current = getattr(config, section)
    merged = {**asdict(current), **values}
    return replace(config, **{section: _build(type(current), merged, section)})
