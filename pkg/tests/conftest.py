from __future__ import annotations

from pathlib import Path

import pytest

from sesl.defects import DefectProfile
from sesl.gateway.types import RequirementIssue

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURES = REPO_ROOT / "fixtures"

SYNONYMS = {"ship": ["vessel", "boat"], "grid": ["board", "matrix"]}
JARGON = {"save": "persist to non-volatile storage", "show": "render"}
ALL_DEFECTS = (
    "complex_sentence_structure",
    "incorrect_legal_binding",
    "inconsistent_terminology",
    "passive_voice",
    "missing_coherence",
    "technical_density",
)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def corpus_text() -> str:
    return (FIXTURES / "corpus" / "clean_requirements.txt").read_text(encoding="utf-8")


@pytest.fixture()
def corpus_issue(corpus_text) -> RequirementIssue:
    return RequirementIssue(
        issue_id=1,
        title="Corpus",
        user_story="As a player, I want the rules enforced so that the match stays fair.",
        description=corpus_text,
        acceptance_criteria=["The system shall show the summary after the match."],
        labels={"fixture"},
    )


@pytest.fixture()
def six_defect_profile() -> DefectProfile:
    return DefectProfile(
        defects=ALL_DEFECTS,
        synonym_map={k: list(v) for k, v in SYNONYMS.items()},
        jargon_map=dict(JARGON),
        intensity=1.0,
        seed=7,
    )
