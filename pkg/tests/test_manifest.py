"""Manifest loading, validation, clone naming, and round-trip identity."""

from __future__ import annotations

import copy
import random
from decimal import Decimal

import pytest
import yaml

from sesl.manifest import (
    AGENT_ROLES,
    ManifestError,
    load_manifest,
    manifest_from_dict,
    manifest_to_dict,
    planned_clone_ids,
    save_manifest,
)


def base_manifest_dict() -> dict:
    return {
        "schema_version": 1,
        "experiment_id": "bs",
        "baselines": [
            {"baseline_id": "A", "project_ref": "proj/a"},
            {"baseline_id": "B", "project_ref": "proj/b"},
        ],
        "clones_per_baseline": 2,
        "cycle_limit": 3,
        "max_wall_time_per_clone": "2h",
        "max_pipeline_wait": "10m",
        "max_clone_retries": 1,
        "concurrency_limit": 1,
        "seed": 42,
        "llm": {
            "endpoint": "scripted",
            "model": "m1",
            "temperature": 0.2,
            "in_rate": "0.27",
            "out_rate": "1.10",
            "co2_factor": "0.000000005",
        },
        "agents": [
            {"role": "planning", "system_prompt": "plan", "tool_allowlist": ["read_issue", "write_file"]},
            {"role": "coding", "system_prompt": "code", "tool_allowlist": ["write_file", "run_pipeline"]},
            {"role": "testing", "system_prompt": "test", "tool_allowlist": ["write_file", "run_pipeline"]},
            {"role": "review", "system_prompt": "review", "tool_allowlist": ["run_pipeline", "merge"]},
        ],
    }


def test_full_scale_manifest_plans_20_clones():
    data = base_manifest_dict()
    data["clones_per_baseline"] = 10
    manifest = manifest_from_dict(data)
    planned = planned_clone_ids(manifest)
    assert len(planned) == 20


def test_missing_review_agent_names_agents_field():
    data = base_manifest_dict()
    data["agents"] = data["agents"][:3]
    with pytest.raises(ManifestError, match="agents"):
        manifest_from_dict(data)


def test_wrong_role_order_rejected():
    data = base_manifest_dict()
    data["agents"][0], data["agents"][1] = data["agents"][1], data["agents"][0]
    with pytest.raises(ManifestError, match="agents"):
        manifest_from_dict(data)


def test_temperature_round_trips(tmp_path):
    manifest = manifest_from_dict(base_manifest_dict())
    assert manifest.llm.temperature == 0.2
    path = tmp_path / "m.yaml"
    save_manifest(manifest, path)
    assert load_manifest(path) == manifest


def test_planned_clone_ids_naming():
    manifest = manifest_from_dict(base_manifest_dict())
    names = [name for _, _, name in planned_clone_ids(manifest)]
    assert names == ["bs-A-c01", "bs-A-c02", "bs-B-c01", "bs-B-c02"]


def test_planned_clone_ids_single():
    data = base_manifest_dict()
    data["baselines"] = data["baselines"][:1]
    data["clones_per_baseline"] = 1
    names = [name for _, _, name in planned_clone_ids(manifest_from_dict(data))]
    assert names == ["bs-A-c01"]


def test_planned_clone_ids_pure():
    manifest = manifest_from_dict(base_manifest_dict())
    assert planned_clone_ids(manifest) == planned_clone_ids(manifest)


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: d.update(experiment_id="Bad Slug!"), "experiment_id"),
        (lambda d: d.update(experiment_id="x" * 65), "experiment_id"),
        (lambda d: d.update(clones_per_baseline=0), "clones_per_baseline"),
        (lambda d: d.update(cycle_limit=0), "cycle_limit"),
        (lambda d: d.update(max_clone_retries=-1), "max_clone_retries"),
        (lambda d: d.update(seed=-1), "seed"),
        (lambda d: d.update(seed=2 ** 64), "seed"),
        (lambda d: d["llm"].update(temperature=2.5), "temperature"),
        (lambda d: d["llm"].update(endpoint="other"), "endpoint"),
        (lambda d: d.update(baselines=[]), "baselines"),
        (lambda d: d.update(max_wall_time_per_clone="fast"), "max_wall_time_per_clone"),
        (lambda d: d.update(schema_version=99), "schema_version"),
    ],
)
def test_validation_errors_name_the_field(mutate, field):
    data = base_manifest_dict()
    mutate(data)
    with pytest.raises(ManifestError, match=field):
        manifest_from_dict(data)


def test_duplicate_baseline_ids_rejected():
    data = base_manifest_dict()
    data["baselines"][1]["baseline_id"] = "A"
    with pytest.raises(ManifestError, match="baseline_id"):
        manifest_from_dict(data)


def test_planning_must_not_merge():
    data = base_manifest_dict()
    data["agents"][0]["tool_allowlist"] = ["read_issue", "merge"]
    with pytest.raises(ManifestError, match="planning"):
        manifest_from_dict(data)


def test_unknown_tool_rejected():
    data = base_manifest_dict()
    data["agents"][1]["tool_allowlist"] = ["write_file", "format_disk"]
    with pytest.raises(ManifestError, match="format_disk"):
        manifest_from_dict(data)


def test_defect_profile_loads():
    data = base_manifest_dict()
    data["baselines"][1]["defect_profile"] = {
        "defects": ["passive_voice"],
        "intensity": 0.5,
        "seed": 3,
    }
    manifest = manifest_from_dict(data)
    profile = manifest.baselines[1].defect_profile
    assert profile is not None and profile.defects == ("passive_voice",)


def test_duration_forms():
    data = base_manifest_dict()
    data["max_wall_time_per_clone"] = 90
    data["max_pipeline_wait"] = "1.5m"
    manifest = manifest_from_dict(data)
    assert manifest.max_wall_time_per_clone == 90.0
    assert manifest.max_pipeline_wait == 90.0


def test_rates_are_decimal():
    manifest = manifest_from_dict(base_manifest_dict())
    assert manifest.llm.in_rate == Decimal("0.27")
    assert manifest.llm.out_rate == Decimal("1.10")


def test_malformed_document_is_a_parse_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("schema_version: [unclosed", encoding="utf-8")
    with pytest.raises(ManifestError, match="malformed"):
        load_manifest(path)


def test_unreadable_path(tmp_path):
    with pytest.raises(ManifestError, match="cannot read"):
        load_manifest(tmp_path / "missing.yaml")


def _random_manifest_dict(rng: random.Random) -> dict:
    data = base_manifest_dict()
    data["experiment_id"] = "".join(rng.choice("abc123-") for _ in range(rng.randint(1, 20))).strip("-") or "x"
    data["clones_per_baseline"] = rng.randint(1, 12)
    data["cycle_limit"] = rng.randint(1, 5)
    data["max_clone_retries"] = rng.randint(0, 3)
    data["concurrency_limit"] = rng.randint(1, 4)
    data["seed"] = rng.randint(0, 2 ** 64 - 1)
    data["max_wall_time_per_clone"] = rng.choice([30, 90.5, "45s", "3m", "2h"])
    data["llm"]["temperature"] = rng.choice([0.0, 0.2, 1.0, 2.0])
    data["llm"]["in_rate"] = str(rng.randint(0, 500) / 100)
    return data


def test_save_load_round_trip_randomized(tmp_path):
    rng = random.Random(7)
    for i in range(25):
        manifest = manifest_from_dict(_random_manifest_dict(rng))
        path = tmp_path / f"m{i}.yaml"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest


def test_manifest_dict_round_trip():
    manifest = manifest_from_dict(base_manifest_dict())
    assert manifest_from_dict(manifest_to_dict(manifest)) == manifest


def test_fixture_manifests_load(fixtures_dir):
    for name in (
        "battleships.yaml",
        "battleships-full-scale.yaml",
        "battleships-red.yaml",
        "battleships-flaky.yaml",
    ):
        manifest = load_manifest(fixtures_dir / "manifests" / name)
        assert [a.role for a in manifest.agents] == list(AGENT_ROLES)


def test_fixture_agents_satisfy_role_tool_invariants(fixtures_dir):
    manifest = load_manifest(fixtures_dir / "manifests" / "battleships.yaml")
    assert "merge" in manifest.agent("review").tool_allowlist
    assert "merge" not in manifest.agent("planning").tool_allowlist


def test_extra_unknown_field_is_ignored():
    data = base_manifest_dict()
    data["future_field"] = {"anything": 1}
    manifest = manifest_from_dict(copy.deepcopy(data))
    assert yaml.safe_dump(manifest_to_dict(manifest))  # still serializable
