"""Rule-based injection and detection of requirements-quality defects.

Six defect kinds are supported: complex sentence structure, incorrect legal
binding, inconsistent terminology, passive voice, missing coherence, and
technical density. All transforms are deterministic: site selection is driven
by a generator seeded from (profile.seed, issue_id, kind, field), so the same
issue and profile always produce byte-identical output. Every applied edit is
logged with its character offset, which makes the log mechanically replayable.

English prose only. Sentence splitting is intentionally simple (punctuation
followed by whitespace and a capital, with a small abbreviation stop-list).
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field, replace

from sesl.gateway.types import RequirementIssue

DEFECT_KINDS = (
    "complex_sentence_structure",
    "incorrect_legal_binding",
    "inconsistent_terminology",
    "passive_voice",
    "missing_coherence",
    "technical_density",
)

_MODALS = ("shall", "should", "will", "must", "may", "can")
_CONNECTIVES = ("therefore", "thus", "hence", "consequently", "furthermore", "moreover", "then")
_PRONOUNS = ("it", "this", "they", "them", "these", "those")

# Words that may legitimately follow a one-word noun phrase; used to decide
# whether "the <noun>" is a complete reference or part of a longer phrase.
# Curated for requirements prose; unknown following words keep the phrase
# un-pronounized, which only costs a site.
_NP_BOUNDARY_WORDS = frozenset(
    _MODALS
    + ("is", "are", "was", "were", "has", "have", "had", "and", "or", "to", "of",
       "on", "in", "at", "by", "with", "for", "from", "as", "before", "after",
       "when", "while", "until", "between", "contains", "remains", "stays",
       "becomes", "keeps", "stores", "strikes", "lands", "ends", "sinks",
       "loses", "rejects", "accepts", "forbid", "forbids", "alternates",
       "occupies", "reports", "shows", "updates", "marks", "declares")
)

_ABBREVIATIONS = frozenset(("e.g.", "i.e.", "etc.", "cf.", "vs.", "approx.", "no.", "fig."))

_IRREGULAR_PARTICIPLES = {
    "show": "shown", "send": "sent", "keep": "kept", "make": "made",
    "give": "given", "take": "taken", "set": "set", "put": "put",
    "run": "run", "hit": "hit", "draw": "drawn", "build": "built",
    "write": "written", "read": "read", "hold": "held", "choose": "chosen",
    "begin": "begun", "win": "won", "lose": "lost", "leave": "left",
    "shut": "shut", "let": "let", "deal": "dealt", "reset": "reset",
    "see": "seen", "do": "done", "know": "known", "get": "gotten",
    "tell": "told", "find": "found", "bring": "brought", "forbid": "forbidden",
}

_DOUBLE_FINAL = frozenset(("submit", "permit", "refer", "occur", "stop", "plan", "log", "map", "drop", "grab"))


class DefectError(ValueError):
    """Invalid defect profile or transform failure."""


@dataclass(frozen=True)
class DefectProfile:
    """Which defects to inject and how aggressively.

    defects is an ordered set: transforms run in exactly this order.
    intensity is the fraction of eligible sites transformed, in (0, 1].
    """

    defects: tuple[str, ...]
    synonym_map: dict[str, list[str]] = field(default_factory=dict)
    jargon_map: dict[str, str] = field(default_factory=dict)
    intensity: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not self.defects:
            raise DefectError("defect profile must select at least one defect")
        unknown = [d for d in self.defects if d not in DEFECT_KINDS]
        if unknown:
            raise DefectError(f"unknown defect kinds: {unknown}")
        if len(set(self.defects)) != len(self.defects):
            raise DefectError("defect kinds must be unique")
        if not (0.0 < self.intensity <= 1.0):
            raise DefectError(f"intensity must be in (0, 1], got {self.intensity}")
        if "inconsistent_terminology" in self.defects and not self.synonym_map:
            raise DefectError("inconsistent_terminology selected but synonym_map is empty")
        if "technical_density" in self.defects and not self.jargon_map:
            raise DefectError("technical_density selected but jargon_map is empty")
        for term, synonyms in self.synonym_map.items():
            if not synonyms or not all(synonyms):
                raise DefectError(f"synonym_map entry {term!r} needs non-empty synonyms")

    def to_dict(self) -> dict:
        return {
            "defects": list(self.defects),
            "synonym_map": {k: list(v) for k, v in self.synonym_map.items()},
            "jargon_map": dict(self.jargon_map),
            "intensity": self.intensity,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DefectProfile":
        profile = cls(
            defects=tuple(d.get("defects", ())),
            synonym_map={k: list(v) for k, v in (d.get("synonym_map") or {}).items()},
            jargon_map=dict(d.get("jargon_map") or {}),
            intensity=float(d.get("intensity", 1.0)),
            seed=int(d.get("seed", 0)),
        )
        profile.validate()
        return profile


@dataclass
class DefectEdit:
    """One applied (or skipped) text edit.

    offset is the character offset in the field text at the moment the edit
    is applied, so replaying edits in log order is a plain string splice.
    """

    kind: str
    field: str
    site_index: int
    offset: int
    before: str
    after: str
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "field": self.field,
            "site_index": self.site_index,
            "offset": self.offset,
            "before": self.before,
            "after": self.after,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DefectEdit":
        return cls(
            kind=d["kind"],
            field=d["field"],
            site_index=int(d["site_index"]),
            offset=int(d["offset"]),
            before=d["before"],
            after=d["after"],
            skipped=bool(d.get("skipped", False)),
        )


@dataclass
class DefectLog:
    issue_id: int
    edits: list[DefectEdit] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"issue_id": self.issue_id, "edits": [e.to_dict() for e in self.edits]}

    @classmethod
    def from_dict(cls, d: dict) -> "DefectLog":
        return cls(issue_id=int(d["issue_id"]), edits=[DefectEdit.from_dict(e) for e in d["edits"]])


@dataclass
class _Splice:
    start: int
    end: int
    replacement: str


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _choose_sites(rng: random.Random, n_sites: int, intensity: float) -> list[int]:
    k = min(_round_half_up(intensity * n_sites), n_sites)
    if k <= 0:
        return []
    return sorted(rng.sample(range(n_sites), k))


def split_sentence_spans(text: str) -> list[tuple[int, int]]:
    """Return (start, end) spans of sentences, splitting on .!? followed by
    whitespace and a capital letter, skipping known abbreviations."""
    spans: list[tuple[int, int]] = []
    start = 0
    for match in re.finditer(r"[.!?](\s+)(?=[A-Z])", text):
        preceding = text[: match.start() + 1]
        last_word = re.search(r"(\S+)$", preceding)
        if last_word and last_word.group(1).lower() in _ABBREVIATIONS:
            continue
        spans.append((start, match.start() + 1))
        start = match.end()
    if start < len(text):
        spans.append((start, len(text)))
    # Trim surrounding whitespace so spans cover the sentence text only.
    trimmed = []
    for s, e in spans:
        while s < e and text[s].isspace():
            s += 1
        while e > s and text[e - 1].isspace():
            e -= 1
        if s < e:
            trimmed.append((s, e))
    return trimmed


def split_sentences(text: str) -> list[str]:
    return [text[s:e] for s, e in split_sentence_spans(text)]


def _past_participle(verb: str) -> str:
    if verb in _IRREGULAR_PARTICIPLES:
        return _IRREGULAR_PARTICIPLES[verb]
    if verb.endswith("e"):
        return verb + "d"
    if verb.endswith("y") and len(verb) > 1 and verb[-2] not in "aeiou":
        return verb[:-1] + "ied"
    if verb in _DOUBLE_FINAL:
        return verb + verb[-1] + "ed"
    return verb + "ed"


_ACTIVE_SENTENCE_RE = re.compile(
    r"^(?P<subj>(?:[Tt]he|[Aa]n?|[Ee]ach|[Ee]very)\s+[A-Za-z][A-Za-z -]*?)\s+"
    r"(?P<modal>shall|should|will|must|may|can)\s+"
    r"(?P<verb>[a-z]+)\s+"
    r"(?P<obj>(?:the|a|an|each|every|all|its|any|one|two|three)\s+[A-Za-z0-9][^.!?;:]*?)\s*"
    r"(?P<punct>[.!?])?$"
)


def _transform_passive_voice(text: str, rng: random.Random, profile: DefectProfile) -> list[_Splice]:
    sites: list[tuple[int, int, re.Match]] = []
    for s, e in split_sentence_spans(text):
        match = _ACTIVE_SENTENCE_RE.match(text[s:e])
        if match and match.group("verb") not in ("be", "been", "being"):
            sites.append((s, e, match))
    chosen = _choose_sites(rng, len(sites), profile.intensity)
    splices = []
    for idx in chosen:
        s, e, match = sites[idx]
        subj, modal, verb, obj = match.group("subj"), match.group("modal"), match.group("verb"), match.group("obj")
        punct = match.group("punct") or ""
        rewritten = (
            f"{obj[0].upper()}{obj[1:]} {modal} be {_past_participle(verb)} "
            f"by {subj[0].lower()}{subj[1:]}{punct}"
        )
        splices.append(_Splice(s, e, rewritten))
    return splices


def _transform_legal_binding(text: str, rng: random.Random, profile: DefectProfile) -> list[_Splice]:
    sites = list(re.finditer(r"\b[Ss]hall\b", text))
    chosen = _choose_sites(rng, len(sites), profile.intensity)
    splices = []
    for order, idx in enumerate(chosen):
        match = sites[idx]
        weaker = "should" if order % 2 == 0 else "will"
        if match.group(0)[0].isupper():
            weaker = weaker.capitalize()
        splices.append(_Splice(match.start(), match.end(), weaker))
    return splices


def _transform_terminology(text: str, rng: random.Random, profile: DefectProfile) -> list[_Splice]:
    splices = []
    for term, synonyms in profile.synonym_map.items():
        occurrences = list(re.finditer(rf"\b{re.escape(term)}\b", text, flags=re.IGNORECASE))
        eligible = occurrences[1:]  # keep the first occurrence canonical
        chosen = _choose_sites(rng, len(eligible), profile.intensity)
        for order, idx in enumerate(chosen):
            match = eligible[idx]
            synonym = synonyms[order % len(synonyms)]
            if match.group(0)[0].isupper():
                synonym = synonym[0].upper() + synonym[1:]
            splices.append(_Splice(match.start(), match.end(), synonym))
    return splices


def _transform_complex_structure(text: str, rng: random.Random, profile: DefectProfile) -> list[_Splice]:
    spans = split_sentence_spans(text)
    pairs = []
    for i in range(0, len(spans) - 1, 2):
        separator = text[spans[i][1]:spans[i + 1][0]]
        if "\n" not in separator:  # only merge within a paragraph
            pairs.append((spans[i], spans[i + 1]))
    chosen = _choose_sites(rng, len(pairs), profile.intensity)
    splices = []
    for idx in chosen:
        (s1, e1), (s2, e2) = pairs[idx]
        first = text[s1:e1].rstrip(".!?")
        second = text[s2:e2]
        second = second[0].lower() + second[1:]
        connective = rng.choice([", which means that ", ", whereas "])
        splices.append(_Splice(s1, e2, f"{first}{connective}{second}"))
    return splices


def _sentence_initial(text: str, offset: int) -> bool:
    i = offset - 1
    while i >= 0 and text[i].isspace():
        i -= 1
    return i < 0 or text[i] in ".!?"


def _transform_missing_coherence(text: str, rng: random.Random, profile: DefectProfile) -> list[_Splice]:
    splices: list[_Splice] = []
    occupied: list[tuple[int, int]] = []

    # Delete connective adverbs; a following word absorbs the capitalization
    # when the connective opened the sentence.
    connective_re = re.compile(
        r"\b(" + "|".join(_CONNECTIVES) + r")\b(,?\s+)([A-Za-z])",
        flags=re.IGNORECASE,
    )
    connective_sites = list(connective_re.finditer(text))
    chosen = _choose_sites(rng, len(connective_sites), profile.intensity)
    for idx in chosen:
        match = connective_sites[idx]
        next_letter = match.group(3)
        if _sentence_initial(text, match.start()) and match.group(1)[0].isupper():
            next_letter = next_letter.upper()
        splices.append(_Splice(match.start(), match.end(), next_letter))
        occupied.append((match.start(), match.end()))

    # Replace repeated noun references with pronouns. A reference is
    # "the <w1> <w2>" when both words repeat together, otherwise "the <w1>"
    # only when the next word clearly ends the phrase.
    np_sites: list[tuple[int, int]] = []
    seen: set[str] = set()
    for match in re.finditer(r"\b([Tt]he)\s+([a-z]+)(?:\s+([a-z]+))?", text):
        w1, w2 = match.group(2), match.group(3)
        if w2 and w2 not in _NP_BOUNDARY_WORDS:
            key = f"the {w1} {w2}"
            span = (match.start(), match.end())
        else:
            next_word = re.match(r"\s+([a-z]+)", text[match.end(2):])
            if next_word and next_word.group(1) not in _NP_BOUNDARY_WORDS:
                continue
            key = f"the {w1}"
            span = (match.start(), match.end(2))
        if key in seen:
            np_sites.append(span)
        else:
            seen.add(key)
    np_sites = [
        (s, e) for s, e in np_sites
        if not any(s < oe and os_ < e for os_, oe in occupied)
    ]
    chosen = _choose_sites(rng, len(np_sites), profile.intensity)
    for order, idx in enumerate(chosen):
        s, e = np_sites[idx]
        pronoun = "it" if order % 2 == 0 else "this"
        if text[s].isupper():
            pronoun = pronoun.capitalize()
        splices.append(_Splice(s, e, pronoun))
    return splices


def _transform_technical_density(text: str, rng: random.Random, profile: DefectProfile) -> list[_Splice]:
    sites: list[tuple[int, int, str]] = []
    for term, jargon in profile.jargon_map.items():
        for match in re.finditer(rf"\b{re.escape(term)}\b", text, flags=re.IGNORECASE):
            replacement = jargon
            if replacement and match.group(0)[0].isupper():
                replacement = jargon[0].upper() + jargon[1:]
            sites.append((match.start(), match.end(), replacement))
    sites.sort(key=lambda site: site[0])
    chosen = _choose_sites(rng, len(sites), profile.intensity)
    return [_Splice(sites[i][0], sites[i][1], sites[i][2]) for i in chosen]


_TRANSFORMS = {
    "passive_voice": _transform_passive_voice,
    "incorrect_legal_binding": _transform_legal_binding,
    "inconsistent_terminology": _transform_terminology,
    "complex_sentence_structure": _transform_complex_structure,
    "missing_coherence": _transform_missing_coherence,
    "technical_density": _transform_technical_density,
}


def _issue_fields(issue: RequirementIssue) -> list[tuple[str, str]]:
    fields = [("description", issue.description), ("user_story", issue.user_story)]
    for i, criterion in enumerate(issue.acceptance_criteria):
        fields.append((f"acceptance_criteria[{i}]", criterion))
    return fields


def _apply_splices(kind: str, field_name: str, text: str, splices: list[_Splice]) -> tuple[str, list[DefectEdit]]:
    splices = sorted(splices, key=lambda sp: sp.start)
    for a, b in zip(splices, splices[1:]):
        if b.start < a.end:
            raise DefectError(f"{kind} produced overlapping edits in {field_name}")
    edits = []
    pieces = []
    cursor = 0
    shift = 0
    for site_index, splice in enumerate(splices):
        pieces.append(text[cursor:splice.start])
        pieces.append(splice.replacement)
        edits.append(DefectEdit(
            kind=kind,
            field=field_name,
            site_index=site_index,
            offset=splice.start + shift,
            before=text[splice.start:splice.end],
            after=splice.replacement,
        ))
        shift += len(splice.replacement) - (splice.end - splice.start)
        cursor = splice.end
    pieces.append(text[cursor:])
    return "".join(pieces), edits


def _word_count(texts: list[str]) -> int:
    return sum(len(t.split()) for t in texts)


def inject(issue: RequirementIssue, profile: DefectProfile) -> tuple[RequirementIssue, DefectLog]:
    """Apply the profile's defects to the issue text (title untouched).

    Returns the defective issue and a replayable log of every edit. Raises
    DefectError if the profile is invalid or a transform balloons the word
    count by 40% or more.
    """
    profile.validate()
    log = DefectLog(issue_id=issue.issue_id)
    texts = {name: value for name, value in _issue_fields(issue)}
    original_words = _word_count(list(texts.values()))

    for kind in profile.defects:
        transform = _TRANSFORMS[kind]
        for field_name in list(texts):
            rng = random.Random(f"{profile.seed}:{issue.issue_id}:{kind}:{field_name}")
            current = texts[field_name]
            splices = transform(current, rng, profile)
            new_text, edits = _apply_splices(kind, field_name, current, splices)
            if edits and not new_text.strip():
                # Reject a transform that would empty the field; keep the
                # original text and log the sites as skipped.
                for edit in edits:
                    edit.skipped = True
                log.edits.extend(edits)
                continue
            texts[field_name] = new_text
            log.edits.extend(edits)

    new_words = _word_count(list(texts.values()))
    if original_words and abs(new_words - original_words) / original_words >= 0.4:
        raise DefectError(
            f"injection changed word count by "
            f"{abs(new_words - original_words) / original_words:.0%} (limit 40%)"
        )

    n_criteria = len(issue.acceptance_criteria)
    defective = replace(
        issue,
        description=texts["description"],
        user_story=texts["user_story"],
        acceptance_criteria=[texts[f"acceptance_criteria[{i}]"] for i in range(n_criteria)],
        labels=set(issue.labels),
    )
    return defective, log


def replay(issue: RequirementIssue, log: DefectLog) -> RequirementIssue:
    """Re-apply a defect log to the clean issue; reproduces the defective
    issue byte-exactly or raises DefectError on any mismatch."""
    texts = {name: value for name, value in _issue_fields(issue)}
    for edit in log.edits:
        if edit.skipped:
            continue
        if edit.field not in texts:
            raise DefectError(f"log references unknown field {edit.field!r}")
        text = texts[edit.field]
        found = text[edit.offset:edit.offset + len(edit.before)]
        if found != edit.before:
            raise DefectError(
                f"replay mismatch in {edit.field} at offset {edit.offset}: "
                f"expected {edit.before!r}, found {found!r}"
            )
        texts[edit.field] = text[:edit.offset] + edit.after + text[edit.offset + len(edit.before):]
    n_criteria = len(issue.acceptance_criteria)
    return replace(
        issue,
        description=texts["description"],
        user_story=texts["user_story"],
        acceptance_criteria=[texts[f"acceptance_criteria[{i}]"] for i in range(n_criteria)],
        labels=set(issue.labels),
    )


# --- detectors ---------------------------------------------------------------

_BE_FORMS = ("is", "are", "was", "were", "be", "been", "being")
_PARTICIPLE_WORDS = frozenset(_IRREGULAR_PARTICIPLES.values())


def _looks_like_participle(word: str) -> bool:
    return word.endswith("ed") or word in _PARTICIPLE_WORDS


def _has_passive(sentence: str) -> bool:
    tokens = re.findall(r"[A-Za-z]+", sentence.lower())
    for i, token in enumerate(tokens[:-1]):
        if token in _BE_FORMS and _looks_like_participle(tokens[i + 1]):
            return True
    return False


def issue_text(issue: RequirementIssue) -> str:
    """The injectable surface of an issue: everything except the title."""
    return "\n".join([issue.user_story, issue.description, *issue.acceptance_criteria])


def detect(
    issue: RequirementIssue,
    *,
    glossary: dict[str, list[str]] | None = None,
    jargon_lexicon: list[str] | None = None,
) -> dict[str, float]:
    """Heuristic per-defect scores in [0, 1]; higher means more defective.

    glossary (term -> variants) feeds the terminology detector and
    jargon_lexicon the density detector; without them those scores are 0.
    Scores are comparative proxies, meaningful relative to a clean baseline.
    """
    text = issue_text(issue)
    sentences = split_sentences(text)
    if not sentences:
        return {kind: 0.0 for kind in DEFECT_KINDS}
    n = len(sentences)
    words = re.findall(r"[A-Za-z]+", text.lower())

    passive = sum(1 for s in sentences if _has_passive(s)) / n

    mean_len = sum(len(s.split()) for s in sentences) / n
    complexity = min(1.0, mean_len / 40.0)

    modal_counts = {m: len(re.findall(rf"\b{m}\b", text, flags=re.IGNORECASE)) for m in _MODALS}
    total_modals = sum(modal_counts.values())
    legal = 1.0 - max(modal_counts.values()) / total_modals if total_modals else 0.0

    terminology = 0.0
    if glossary:
        groups_present = 0
        groups_varied = 0
        for term, variants in glossary.items():
            present = [
                w for w in [term, *variants]
                if re.search(rf"\b{re.escape(w)}\b", text, flags=re.IGNORECASE)
            ]
            if present:
                groups_present += 1
                if len(present) >= 2:
                    groups_varied += 1
        terminology = groups_varied / groups_present if groups_present else 0.0

    pronoun_count = sum(1 for w in words if w in _PRONOUNS)
    connective_count = sum(1 for w in words if w in _CONNECTIVES)
    coherence = 0.5 * min(1.0, pronoun_count / n) + 0.5 * (1.0 - min(1.0, connective_count / n))

    density = 0.0
    if jargon_lexicon:
        hits = sum(
            len(re.findall(rf"\b{re.escape(phrase)}\b", text, flags=re.IGNORECASE))
            for phrase in jargon_lexicon
        )
        density = min(1.0, hits / n)

    return {
        "complex_sentence_structure": complexity,
        "incorrect_legal_binding": legal,
        "inconsistent_terminology": terminology,
        "passive_voice": passive,
        "missing_coherence": coherence,
        "technical_density": density,
    }


def load_term_map(path: str) -> dict[str, list[str]]:
    """Load a plain-text term map: one `term: replacement[, replacement...]`
    per line, # comments and blank lines ignored."""
    mapping: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            term, _, rest = line.partition(":")
            values = [v.strip() for v in rest.split(",") if v.strip()]
            if not term.strip() or not values:
                raise DefectError(f"malformed term map line: {line!r}")
            mapping[term.strip()] = values
    return mapping
