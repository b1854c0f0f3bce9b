"""Playbook files: scripted agent behavior for deterministic runs.

Line-oriented format; `#` comments and blank lines are ignored:

    step <baseline_id> <clone_index|*> <role> <issue_id|-|*> <cycle|*>
      call <tool_name> <json-object-args>
      report <json-string>

A step header opens a block of actions. `-` is the issue id of the planning
phase (which has no requirement). `*` matches any clone index, issue id, or
cycle; exact values win over wildcards. Every block must end with a report.
Looking up a (baseline, clone, role, issue, cycle) combination that no block
matches is a hard error: the playbook must cover everything the run needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class PlaybookError(ValueError):
    """Malformed playbook file."""


class PlaybookMiss(LookupError):
    """No playbook entry matches the requested agent step."""


@dataclass(frozen=True)
class PlaybookAction:
    kind: str  # "call" | "report"
    tool: str = ""
    arguments: dict = field(default_factory=dict)
    text: str = ""


@dataclass
class PlaybookEntry:
    baseline_id: str
    clone_index: int | None  # None = wildcard
    role: str
    issue_id: int | None | str  # int, None for planning ("-"), or "*"
    cycle: int | None  # None = wildcard
    actions: list[PlaybookAction] = field(default_factory=list)

    def matches(self, baseline_id: str, clone_index: int, role: str, issue_id: int | None, cycle: int) -> bool:
        if self.baseline_id != baseline_id or self.role != role:
            return False
        if self.clone_index is not None and self.clone_index != clone_index:
            return False
        if self.issue_id != "*" and self.issue_id != issue_id:
            return False
        if self.cycle is not None and self.cycle != cycle:
            return False
        return True

    def specificity(self) -> int:
        return sum((self.clone_index is not None, self.issue_id != "*", self.cycle is not None))


@dataclass
class Playbook:
    entries: list[PlaybookEntry]

    def lookup(
        self, baseline_id: str, clone_index: int, role: str, issue_id: int | None, cycle: int
    ) -> list[PlaybookAction]:
        candidates = [
            e for e in self.entries if e.matches(baseline_id, clone_index, role, issue_id, cycle)
        ]
        if not candidates:
            raise PlaybookMiss(
                f"no playbook entry for baseline={baseline_id} clone={clone_index} "
                f"role={role} issue={issue_id} cycle={cycle}"
            )
        best = max(candidates, key=lambda e: e.specificity())
        return list(best.actions)


def _parse_header(parts: list[str], lineno: int) -> PlaybookEntry:
    if len(parts) != 5:
        raise PlaybookError(f"line {lineno}: step header needs 5 fields, got {len(parts)}")
    baseline_id, clone_raw, role, issue_raw, cycle_raw = parts
    clone_index = None if clone_raw == "*" else int(clone_raw)
    if issue_raw == "*":
        issue_id: int | None | str = "*"
    elif issue_raw == "-":
        issue_id = None
    else:
        issue_id = int(issue_raw)
    cycle = None if cycle_raw == "*" else int(cycle_raw)
    return PlaybookEntry(baseline_id, clone_index, role, issue_id, cycle)


def parse_playbook(text: str) -> Playbook:
    entries: list[PlaybookEntry] = []
    current: PlaybookEntry | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("step "):
            if current is not None:
                _validate_entry(current)
            current = _parse_header(line[5:].split(), lineno)
            entries.append(current)
            continue
        if current is None:
            raise PlaybookError(f"line {lineno}: action before any step header")
        if line.startswith("call "):
            rest = line[5:].strip()
            tool, _, args_raw = rest.partition(" ")
            if not tool:
                raise PlaybookError(f"line {lineno}: call needs a tool name")
            arguments = {}
            if args_raw.strip():
                try:
                    arguments = json.loads(args_raw)
                except json.JSONDecodeError as exc:
                    raise PlaybookError(f"line {lineno}: bad call arguments: {exc}") from exc
                if not isinstance(arguments, dict):
                    raise PlaybookError(f"line {lineno}: call arguments must be a JSON object")
            current.actions.append(PlaybookAction(kind="call", tool=tool, arguments=arguments))
        elif line.startswith("report "):
            try:
                text_value = json.loads(line[7:].strip())
            except json.JSONDecodeError as exc:
                raise PlaybookError(f"line {lineno}: report needs a JSON string: {exc}") from exc
            if not isinstance(text_value, str):
                raise PlaybookError(f"line {lineno}: report needs a JSON string")
            current.actions.append(PlaybookAction(kind="report", text=text_value))
        else:
            raise PlaybookError(f"line {lineno}: expected 'call' or 'report', got {line!r}")
    if current is not None:
        _validate_entry(current)
    return Playbook(entries=entries)


def _validate_entry(entry: PlaybookEntry) -> None:
    if not entry.actions or entry.actions[-1].kind != "report":
        raise PlaybookError(
            f"step {entry.baseline_id}/{entry.role} (issue {entry.issue_id}, cycle {entry.cycle}) "
            "must end with a report action"
        )


def load_playbook(path: str | Path) -> Playbook:
    return parse_playbook(Path(path).read_text(encoding="utf-8"))
