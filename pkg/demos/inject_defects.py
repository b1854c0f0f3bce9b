"""Defect injection demo: mangle one battleships requirement and measure it.

Applies all six quality defects to a clean issue, shows the text before and
after, proves the edit log replays byte-exactly, and prints how each
heuristic detector moves.

    python demos/inject_defects.py
"""

from pathlib import Path

import yaml

from sesl.defects import DefectProfile, detect, inject, load_term_map, replay
from sesl.gateway.types import RequirementIssue

ROOT = Path(__file__).resolve().parent.parent

issues = yaml.safe_load((ROOT / "fixtures" / "baselines" / "battleships" / "issues.yaml").read_text())
issue = RequirementIssue.from_dict(issues[1])  # "Place ships on the grid"

synonyms = load_term_map(ROOT / "fixtures" / "maps" / "synonyms.txt")
jargon = {term: phrases[0] for term, phrases in load_term_map(ROOT / "fixtures" / "maps" / "jargon.txt").items()}
profile = DefectProfile(
    defects=(
        "complex_sentence_structure",
        "incorrect_legal_binding",
        "inconsistent_terminology",
        "passive_voice",
        "missing_coherence",
        "technical_density",
    ),
    synonym_map=synonyms,
    jargon_map=jargon,
    intensity=1.0,
    seed=7,
)

defective, log = inject(issue, profile)

print("--- clean description ---")
print(issue.description)
print("\n--- defective description ---")
print(defective.description)
print(f"\n{len(log.edits)} edits logged; replay reproduces the defective issue:",
      replay(issue, log) == defective)

clean_scores = detect(issue, glossary=synonyms, jargon_lexicon=list(jargon.values()))
bad_scores = detect(defective, glossary=synonyms, jargon_lexicon=list(jargon.values()))
print("\ndetector            clean -> defective")
for kind in clean_scores:
    print(f"{kind:32s} {clean_scores[kind]:.2f} -> {bad_scores[kind]:.2f}")
