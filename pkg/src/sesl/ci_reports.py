"""Parsers for CI feedback artifacts: JUnit-style test reports and line coverage reports.

Both parsers are pure and tolerant: missing optional attributes count as 0,
and counts are reconciled so the returned summaries always satisfy their
invariants even on inconsistent input.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field


class ReportParseError(ValueError):
    """The artifact is not well-formed XML."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class NoCoverageData(ValueError):
    """The coverage report carries no line counter anywhere."""


@dataclass
class TestSummary:
    tests: int = 0
    failures: int = 0
    errors: int = 0
    skipped: int = 0
    failing_case_names: list[str] = field(default_factory=list)

    @property
    def all_green(self) -> bool:
        # Zero tests is not green: an empty report must not count as passing.
        return self.tests >= 1 and self.failures == 0 and self.errors == 0

    def to_dict(self) -> dict:
        return {
            "tests": self.tests,
            "failures": self.failures,
            "errors": self.errors,
            "skipped": self.skipped,
            "failing_case_names": list(self.failing_case_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestSummary":
        return cls(
            tests=int(d.get("tests", 0)),
            failures=int(d.get("failures", 0)),
            errors=int(d.get("errors", 0)),
            skipped=int(d.get("skipped", 0)),
            failing_case_names=list(d.get("failing_case_names", [])),
        )


@dataclass
class CoverageSummary:
    lines_covered: int
    lines_total: int

    @property
    def ratio(self) -> float:
        if self.lines_total == 0:
            return 0.0
        return self.lines_covered / self.lines_total

    def to_dict(self) -> dict:
        return {"lines_covered": self.lines_covered, "lines_total": self.lines_total}

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageSummary":
        return cls(lines_covered=int(d["lines_covered"]), lines_total=int(d["lines_total"]))


def _parse_xml(text: str) -> ET.Element:
    try:
        return ET.fromstring(text)
    except ET.ParseError as exc:
        line, column = exc.position
        offset = _byte_offset(text, line, column)
        raise ReportParseError(f"malformed XML: {exc}", byte_offset=offset) from exc


def _byte_offset(text: str, line: int, column: int) -> int:
    lines = text.splitlines(keepends=True)
    prefix = "".join(lines[: line - 1])
    return len(prefix.encode("utf-8")) + column


def _int_attr(element: ET.Element, name: str) -> int:
    raw = element.get(name)
    if raw is None:
        return 0
    try:
        value = int(raw.strip())
    except ValueError:
        return 0
    return max(value, 0)


def parse_junit(text: str) -> TestSummary:
    """Sum test counts across every <testsuite> element in a JUnit XML report.

    Declared counts are trusted but reconciled upward so that
    failures + errors + skipped never exceeds tests.
    """
    root = _parse_xml(text)
    if root.tag == "testsuite":
        suites = [root]
    else:
        suites = list(root.iter("testsuite"))

    summary = TestSummary()
    for suite in suites:
        summary.tests += _int_attr(suite, "tests")
        summary.failures += _int_attr(suite, "failures")
        summary.errors += _int_attr(suite, "errors")
        summary.skipped += _int_attr(suite, "skipped")
        for case in suite.findall("testcase"):
            if case.find("failure") is not None or case.find("error") is not None:
                name = case.get("name") or "<unnamed>"
                classname = case.get("classname")
                summary.failing_case_names.append(f"{classname}.{name}" if classname else name)

    summary.tests = max(summary.tests, summary.failures + summary.errors + summary.skipped)
    return summary


def _counter_values(counter: ET.Element) -> tuple[int, int]:
    return _int_attr(counter, "missed"), _int_attr(counter, "covered")


def parse_jacoco(text: str) -> CoverageSummary:
    """Read line coverage from a JaCoCo-style XML report.

    Prefers the report-level LINE counter; an absent or empty (0/0) one falls
    through to the sum of package-level LINE counters. With no line counter
    anywhere, raises NoCoverageData.
    """
    root = _parse_xml(text)

    for counter in root.findall("counter"):
        if counter.get("type") == "LINE":
            missed, covered = _counter_values(counter)
            if missed + covered > 0:
                return CoverageSummary(lines_covered=covered, lines_total=missed + covered)

    package_counters = [
        counter
        for package in root.findall("package")
        for counter in package.findall("counter")
        if counter.get("type") == "LINE"
    ]
    if package_counters:
        missed_total = 0
        covered_total = 0
        for counter in package_counters:
            missed, covered = _counter_values(counter)
            missed_total += missed
            covered_total += covered
        return CoverageSummary(lines_covered=covered_total, lines_total=missed_total + covered_total)

    raise NoCoverageData("no coverage data: no LINE counter found in report")
