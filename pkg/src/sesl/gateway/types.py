"""Shared domain types for the DevOps gateway."""

from __future__ import annotations

from dataclasses import dataclass, field

from sesl.ci_reports import CoverageSummary, TestSummary

PIPELINE_STATUSES = ("success", "failed", "stuck", "error")
JOB_STATUSES = ("success", "failed", "timeout", "error")
MR_STATES = ("open", "merged", "closed")


class GatewayError(Exception):
    """Base class for gateway failures."""


class NotFoundError(GatewayError):
    pass


class NameCollisionError(GatewayError):
    pass


class EmptyCommitError(GatewayError):
    pass


class PlatformError(GatewayError):
    """Transport or platform-side failure; retryable where marked."""

    def __init__(self, message: str, status: int | None = None, retryable: bool = False):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


@dataclass(frozen=True)
class ProjectRef:
    backend_kind: str  # "live" | "fake"
    locator: str

    def __post_init__(self):
        if not self.locator:
            raise ValueError("project locator must be non-empty")


@dataclass
class RequirementIssue:
    issue_id: int
    title: str
    user_story: str = ""
    description: str = ""
    acceptance_criteria: list[str] = field(default_factory=list)
    labels: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.issue_id <= 0:
            raise ValueError("issue_id must be positive")
        if not self.title:
            raise ValueError("issue title must be non-empty")

    def to_dict(self) -> dict:
        return {
            "issue_id": self.issue_id,
            "title": self.title,
            "user_story": self.user_story,
            "description": self.description,
            "acceptance_criteria": list(self.acceptance_criteria),
            "labels": sorted(self.labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RequirementIssue":
        return cls(
            issue_id=int(d["issue_id"]),
            title=d["title"],
            user_story=d.get("user_story", ""),
            description=d.get("description", ""),
            acceptance_criteria=list(d.get("acceptance_criteria", [])),
            labels=set(d.get("labels", [])),
        )


@dataclass(frozen=True)
class FileChange:
    """A single path write (content set) or deletion (content None)."""

    path: str
    content: str | None


@dataclass
class JobResult:
    name: str
    status: str
    log: str = ""

    def __post_init__(self):
        if self.status not in JOB_STATUSES:
            raise ValueError(f"invalid job status {self.status!r}")


@dataclass
class PipelineResult:
    pipeline_id: int
    commit_ref: str
    overall_status: str
    jobs: list[JobResult] = field(default_factory=list)
    test_summary: TestSummary | None = None
    coverage: CoverageSummary | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.overall_status not in PIPELINE_STATUSES:
            raise ValueError(f"invalid pipeline status {self.overall_status!r}")


@dataclass
class MergeRequestRef:
    mr_id: int
    source_branch: str
    state: str = "open"

    def __post_init__(self):
        if self.state not in MR_STATES:
            raise ValueError(f"invalid merge request state {self.state!r}")


@dataclass
class MergeAttempt:
    """Outcome of a merge call; refusals are data, not faults."""

    merged: bool
    mr: MergeRequestRef
    reason: str = ""
    conflict_paths: list[str] = field(default_factory=list)
    merge_commit: str | None = None
