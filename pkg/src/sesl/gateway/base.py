"""Abstract gateway contract shared by the live and fake backends.

Callers must not be able to distinguish backends except through
ProjectRef.backend_kind: every operation has identical semantics on both.
Operations on the same project are externally serialized by the orchestrator;
the gateway itself is safe for concurrent use across different projects.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Sequence

from sesl.gateway.types import (
    FileChange,
    MergeAttempt,
    MergeRequestRef,
    PipelineResult,
    ProjectRef,
    RequirementIssue,
)


class DevOpsGateway(ABC):
    backend_kind: str

    @abstractmethod
    def replicate_project(self, baseline: ProjectRef, clone_names: Sequence[str]) -> list[ProjectRef]:
        """Create one independent copy of the baseline per clone name.

        Each clone receives the baseline's default-branch file tree, its
        issues renumbered from 1 in original order (with an
        `origin-issue:<id>` provenance label), and its pipeline definition.
        """

    @abstractmethod
    def get_default_branch(self, project: ProjectRef) -> str:
        """Name of the project's default branch."""

    @abstractmethod
    def create_branch(self, project: ProjectRef, branch: str) -> None:
        """Create a branch from the default branch head."""

    @abstractmethod
    def get_branch_head(self, project: ProjectRef, branch: str) -> str:
        """Commit id at the tip of the branch."""

    @abstractmethod
    def apply_commit(
        self, project: ProjectRef, branch: str, changes: Sequence[FileChange], message: str
    ) -> str:
        """Record a commit on the branch (created from the default branch
        head if absent) and trigger a pipeline. Empty change lists are
        rejected."""

    @abstractmethod
    def await_pipeline(self, project: ProjectRef, commit_id: str, timeout: float) -> PipelineResult:
        """Block until the commit's pipeline terminates or the timeout
        elapses; a timeout yields overall_status="stuck" with partial job
        data. Stuck and error are data, not faults."""

    @abstractmethod
    def open_merge_request(self, project: ProjectRef, source_branch: str, title: str) -> MergeRequestRef:
        pass

    @abstractmethod
    def merge(self, project: ProjectRef, mr: MergeRequestRef) -> MergeAttempt:
        """Merge the source branch into the default branch if and only if the
        source head's pipeline succeeded (merge-if-green). Red pipelines and
        conflicts come back as typed refusals."""

    @abstractmethod
    def read_tree(self, project: ProjectRef, ref: str | None = None) -> list[str]:
        """Sorted file paths at the ref (default branch head when None)."""

    @abstractmethod
    def read_file(self, project: ProjectRef, path: str, ref: str | None = None) -> str:
        pass

    @abstractmethod
    def read_issues(self, project: ProjectRef) -> list[RequirementIssue]:
        """All issues in issue-id order."""

    @abstractmethod
    def update_issue(self, project: ProjectRef, issue: RequirementIssue) -> None:
        """Replace the stored issue with the same issue_id."""
