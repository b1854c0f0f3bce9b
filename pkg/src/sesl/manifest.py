"""Experiment manifest: load, validate, persist the configuration that drives a run.

The manifest is a single YAML file with a required schema_version field.
Durations accept a number of seconds or a string with an s/m/h suffix and are
stored as float seconds. Money rates and the CO2 factor are decimals so cost
accounting stays exact. Secrets never live here; they come from environment
variables only.

Manifests are immutable after load and safe to share across concurrent clone
executions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import yaml

from sesl.agents.tools import TOOL_NAMES
from sesl.defects import DefectError, DefectProfile

SCHEMA_VERSION = 1
AGENT_ROLES = ("planning", "coding", "testing", "review")
_SLUG_RE = re.compile(r"^[a-z0-9-]{1,64}$")


class ManifestError(ValueError):
    """Manifest failed to parse or validate; message carries field paths."""


def _parse_duration(value, path: str) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        seconds = float(value)
    elif isinstance(value, str):
        match = re.fullmatch(r"\s*([0-9]+(?:\.[0-9]+)?)\s*([smh]?)\s*", value)
        if not match:
            raise ManifestError(f"{path}: invalid duration {value!r} (use seconds or e.g. '90s', '10m', '2h')")
        seconds = float(match.group(1)) * {"": 1, "s": 1, "m": 60, "h": 3600}[match.group(2)]
    else:
        raise ManifestError(f"{path}: invalid duration {value!r}")
    if seconds <= 0:
        raise ManifestError(f"{path}: duration must be positive")
    return seconds


def _parse_decimal(value, path: str) -> Decimal:
    try:
        return Decimal(str(value))
    except InvalidOperation:
        raise ManifestError(f"{path}: invalid decimal {value!r}") from None


@dataclass(frozen=True)
class AgentSpec:
    role: str
    system_prompt: str
    tool_allowlist: frozenset[str]
    max_tool_calls_per_step: int = 25


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str  # "live" | "scripted"
    model: str
    temperature: float
    in_rate: Decimal  # currency per million input tokens
    out_rate: Decimal  # currency per million output tokens
    co2_factor: Decimal  # kg CO2 per token


@dataclass(frozen=True)
class BaselineSpec:
    baseline_id: str
    project_ref: str
    defect_profile: DefectProfile | None = None


@dataclass(frozen=True)
class ExperimentManifest:
    experiment_id: str
    baselines: tuple[BaselineSpec, ...]
    clones_per_baseline: int
    max_wall_time_per_clone: float  # seconds
    max_pipeline_wait: float  # seconds
    agents: tuple[AgentSpec, ...]
    llm: LlmConfig
    seed: int
    cycle_limit: int = 3
    max_clone_retries: int = 1
    concurrency_limit: int = 1

    def agent(self, role: str) -> AgentSpec:
        for spec in self.agents:
            if spec.role == role:
                return spec
        raise KeyError(role)


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ManifestError(f"{path}{key}: required field missing")
    return mapping[key]


def _load_agent(raw: dict, path: str) -> AgentSpec:
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: must be a mapping")
    role = _require(raw, "role", f"{path}.")
    prompt = _require(raw, "system_prompt", f"{path}.")
    allowlist = _require(raw, "tool_allowlist", f"{path}.")
    if not isinstance(allowlist, list) or not allowlist:
        raise ManifestError(f"{path}.tool_allowlist: must be a non-empty list")
    unknown = sorted(set(allowlist) - set(TOOL_NAMES))
    if unknown:
        raise ManifestError(f"{path}.tool_allowlist: unknown tools {unknown}")
    max_calls = int(raw.get("max_tool_calls_per_step", 25))
    if max_calls < 1:
        raise ManifestError(f"{path}.max_tool_calls_per_step: must be >= 1")
    return AgentSpec(
        role=str(role),
        system_prompt=str(prompt),
        tool_allowlist=frozenset(str(t) for t in allowlist),
        max_tool_calls_per_step=max_calls,
    )


def _load_llm(raw: dict, path: str) -> LlmConfig:
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: must be a mapping")
    endpoint = _require(raw, "endpoint", f"{path}.")
    if endpoint not in ("live", "scripted"):
        raise ManifestError(f"{path}.endpoint: must be 'live' or 'scripted'")
    temperature = float(_require(raw, "temperature", f"{path}."))
    if not (0.0 <= temperature <= 2.0):
        raise ManifestError(f"{path}.temperature: must be in [0, 2]")
    in_rate = _parse_decimal(_require(raw, "in_rate", f"{path}."), f"{path}.in_rate")
    out_rate = _parse_decimal(_require(raw, "out_rate", f"{path}."), f"{path}.out_rate")
    co2_factor = _parse_decimal(_require(raw, "co2_factor", f"{path}."), f"{path}.co2_factor")
    if in_rate < 0 or out_rate < 0 or co2_factor < 0:
        raise ManifestError(f"{path}: rates and co2_factor must be non-negative")
    return LlmConfig(
        endpoint=endpoint,
        model=str(_require(raw, "model", f"{path}.")),
        temperature=temperature,
        in_rate=in_rate,
        out_rate=out_rate,
        co2_factor=co2_factor,
    )


def _load_baseline(raw: dict, path: str) -> BaselineSpec:
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: must be a mapping")
    baseline_id = str(_require(raw, "baseline_id", f"{path}."))
    project_ref = str(_require(raw, "project_ref", f"{path}."))
    if not project_ref:
        raise ManifestError(f"{path}.project_ref: must be non-empty")
    profile = None
    if raw.get("defect_profile") is not None:
        try:
            profile = DefectProfile.from_dict(raw["defect_profile"])
        except DefectError as exc:
            raise ManifestError(f"{path}.defect_profile: {exc}") from exc
    return BaselineSpec(baseline_id=baseline_id, project_ref=project_ref, defect_profile=profile)


def manifest_from_dict(data: dict) -> ExperimentManifest:
    if not isinstance(data, dict):
        raise ManifestError("manifest root must be a mapping")
    version = _require(data, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")

    experiment_id = str(_require(data, "experiment_id", ""))
    if not _SLUG_RE.fullmatch(experiment_id):
        raise ManifestError("experiment_id: must match [a-z0-9-]{1,64}")

    raw_baselines = _require(data, "baselines", "")
    if not isinstance(raw_baselines, list) or not raw_baselines:
        raise ManifestError("baselines: at least one baseline required")
    baselines = tuple(
        _load_baseline(raw, f"baselines[{i}]") for i, raw in enumerate(raw_baselines)
    )
    ids = [b.baseline_id for b in baselines]
    if len(set(ids)) != len(ids):
        raise ManifestError("baselines: baseline_id values must be unique")

    clones = int(_require(data, "clones_per_baseline", ""))
    if clones < 1:
        raise ManifestError("clones_per_baseline: must be >= 1")
    cycle_limit = int(data.get("cycle_limit", 3))
    if cycle_limit < 1:
        raise ManifestError("cycle_limit: must be >= 1")
    max_clone_retries = int(data.get("max_clone_retries", 1))
    if max_clone_retries < 0:
        raise ManifestError("max_clone_retries: must be >= 0")
    concurrency = int(data.get("concurrency_limit", 1))
    if concurrency < 1:
        raise ManifestError("concurrency_limit: must be >= 1")
    seed = int(_require(data, "seed", ""))
    if not (0 <= seed < 2 ** 64):
        raise ManifestError("seed: must be an unsigned 64-bit integer")

    raw_agents = _require(data, "agents", "")
    if not isinstance(raw_agents, list):
        raise ManifestError("agents: must be a list")
    agents = tuple(_load_agent(raw, f"agents[{i}]") for i, raw in enumerate(raw_agents))
    roles = [a.role for a in agents]
    if roles != list(AGENT_ROLES):
        raise ManifestError(
            f"agents: exactly the roles {list(AGENT_ROLES)} are required in that order, got {roles}"
        )
    for agent in agents:
        if agent.role == "review" and "merge" not in agent.tool_allowlist:
            raise ManifestError("agents: review role must include the merge tool")
        if agent.role == "planning" and "merge" in agent.tool_allowlist:
            raise ManifestError("agents: planning role must not include the merge tool")

    return ExperimentManifest(
        experiment_id=experiment_id,
        baselines=baselines,
        clones_per_baseline=clones,
        cycle_limit=cycle_limit,
        max_wall_time_per_clone=_parse_duration(
            _require(data, "max_wall_time_per_clone", ""), "max_wall_time_per_clone"
        ),
        max_pipeline_wait=_parse_duration(_require(data, "max_pipeline_wait", ""), "max_pipeline_wait"),
        max_clone_retries=max_clone_retries,
        agents=agents,
        llm=_load_llm(_require(data, "llm", ""), "llm"),
        seed=seed,
        concurrency_limit=concurrency,
    )


def manifest_to_dict(manifest: ExperimentManifest) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment_id": manifest.experiment_id,
        "baselines": [
            {
                "baseline_id": b.baseline_id,
                "project_ref": b.project_ref,
                **({"defect_profile": b.defect_profile.to_dict()} if b.defect_profile else {}),
            }
            for b in manifest.baselines
        ],
        "clones_per_baseline": manifest.clones_per_baseline,
        "cycle_limit": manifest.cycle_limit,
        "max_wall_time_per_clone": manifest.max_wall_time_per_clone,
        "max_pipeline_wait": manifest.max_pipeline_wait,
        "max_clone_retries": manifest.max_clone_retries,
        "concurrency_limit": manifest.concurrency_limit,
        "seed": manifest.seed,
        "agents": [
            {
                "role": a.role,
                "system_prompt": a.system_prompt,
                "tool_allowlist": sorted(a.tool_allowlist),
                "max_tool_calls_per_step": a.max_tool_calls_per_step,
            }
            for a in manifest.agents
        ],
        "llm": {
            "endpoint": manifest.llm.endpoint,
            "model": manifest.llm.model,
            "temperature": manifest.llm.temperature,
            "in_rate": str(manifest.llm.in_rate),
            "out_rate": str(manifest.llm.out_rate),
            "co2_factor": str(manifest.llm.co2_factor),
        },
    }


def load_manifest(path: str | Path) -> ExperimentManifest:
    """Load and validate a manifest document; raises ManifestError with the
    offending field path on any invariant violation."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ManifestError(f"malformed manifest document: {exc}") from exc
    return manifest_from_dict(data)


def save_manifest(manifest: ExperimentManifest, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(manifest_to_dict(manifest), sort_keys=False), encoding="utf-8"
    )


def planned_clone_ids(manifest: ExperimentManifest) -> list[tuple[str, int, str]]:
    """Deterministic (baseline_id, clone_index, clone_name) triples; names are
    `<experiment_id>-<baseline_id>-c<NN>` with indices starting at 01."""
    return [
        (b.baseline_id, i, f"{manifest.experiment_id}-{b.baseline_id}-c{i:02d}")
        for b in manifest.baselines
        for i in range(1, manifest.clones_per_baseline + 1)
    ]
