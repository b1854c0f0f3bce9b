"""Append-only experiment ledger: one JSON record per line.

Record types: experiment_start (embeds the manifest snapshot and planned
clones), clone_replicated (dry runs only), clone_run (one per executed
clone), experiment_end. Serialization is canonical (sorted keys, fixed
separators) so identical data gives identical bytes; `normalize_records`
zeroes every timestamp and duration field for byte-comparison of
deterministic runs.

The ledger is the sole input to analysis; a crashed run resumes by skipping
clones that already have a clone_run record.
"""

from __future__ import annotations

import json
from pathlib import Path


class LedgerError(ValueError):
    """Missing or corrupt ledger; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"{message} (line {line_no})"
        super().__init__(message)
        self.line_no = line_no


_TIME_KEYS = frozenset(("started_at", "finished_at", "wall_time"))
_TIME_LIST_KEYS = frozenset(("attempt_wall_times",))


def encode_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class LedgerWriter:
    """Single-writer append-only JSONL file, flushed per record."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a" if append else "x", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(encode_record(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "LedgerWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_ledger(path: str | Path, tolerate_partial_tail: bool = False) -> list[dict]:
    """Parse a ledger file. A corrupt line raises LedgerError naming it;
    with tolerate_partial_tail a truncated FINAL line (a crash artifact) is
    dropped instead."""
    path = Path(path)
    if not path.exists():
        raise LedgerError(f"ledger not found: {path}")
    records = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            if tolerate_partial_tail and line_no == len(lines):
                break
            raise LedgerError(f"corrupt ledger record: {exc.msg}", line_no=line_no) from exc
        if not isinstance(record, dict) or "type" not in record:
            raise LedgerError("ledger record is not an object with a 'type' field", line_no=line_no)
        records.append(record)
    return records


def _normalize(value):
    if isinstance(value, dict):
        out = {}
        for key, inner in value.items():
            if key in _TIME_KEYS and isinstance(inner, (int, float)):
                out[key] = 0
            elif key in _TIME_LIST_KEYS and isinstance(inner, list):
                out[key] = [0 for _ in inner]
            else:
                out[key] = _normalize(inner)
        return out
    if isinstance(value, list):
        return [_normalize(v) for v in value]
    return value


def normalize_records(records: list[dict]) -> list[dict]:
    """Copy of the records with all timestamps and durations zeroed."""
    return [_normalize(r) for r in records]


def normalized_ledger_bytes(path: str | Path) -> bytes:
    """Canonical bytes of the timestamp-normalized ledger, for run-to-run
    byte comparison of deterministic experiments."""
    records = normalize_records(read_ledger(path))
    return ("\n".join(encode_record(r) for r in records) + "\n").encode("utf-8")
