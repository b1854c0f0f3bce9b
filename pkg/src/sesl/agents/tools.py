"""The fixed tool surface agents use to act on a clone.

Tool names are pinned so playbooks and prompts stay portable across
backends. Writes are staged locally and only reach the platform when
run_pipeline commits them; this keeps one commit (and one pipeline) per
pipeline request instead of one per file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from sesl.gateway.base import DevOpsGateway
from sesl.gateway.types import (
    FileChange,
    GatewayError,
    MergeAttempt,
    MergeRequestRef,
    PipelineResult,
    ProjectRef,
    RequirementIssue,
)

TOOL_NAMES = (
    "read_file",
    "write_file",
    "delete_file",
    "list_tree",
    "read_issue",
    "read_reports",
    "run_pipeline",
    "read_job_log",
    "open_merge_request",
    "merge",
)

# Per-job log excerpt budget; logs keep their tail because compiler and test
# failures print last.
JOB_LOG_EXCERPT_CHARS = 2000

TOOL_DEFS: dict[str, dict] = {
    "read_file": {
        "description": "Read a file from the working branch.",
        "parameters": {"path": "string"},
    },
    "write_file": {
        "description": "Stage a file write; committed on the next run_pipeline.",
        "parameters": {"path": "string", "content": "string"},
    },
    "delete_file": {
        "description": "Stage a file deletion; committed on the next run_pipeline.",
        "parameters": {"path": "string"},
    },
    "list_tree": {
        "description": "List all files on the working branch, including staged changes.",
        "parameters": {},
    },
    "read_issue": {
        "description": "Read the requirement issue under work (or a specific issue by id).",
        "parameters": {"issue_id": "integer (optional)"},
    },
    "read_reports": {
        "description": "Read the markdown reports earlier agent steps stored in the repository.",
        "parameters": {},
    },
    "run_pipeline": {
        "description": "Commit staged changes (if any) and wait for the CI pipeline result.",
        "parameters": {},
    },
    "read_job_log": {
        "description": "Read the tail of a job log from the most recent pipeline.",
        "parameters": {"job": "string"},
    },
    "open_merge_request": {
        "description": "Open a merge request for the working branch.",
        "parameters": {"title": "string"},
    },
    "merge": {
        "description": "Merge the open merge request if its pipeline is green.",
        "parameters": {},
    },
}


def tail_truncate(text: str, max_chars: int) -> str:
    """Keep at most max_chars from the end of text, never splitting a line."""
    if len(text) <= max_chars:
        return text
    tail = text[-max_chars:]
    cut = tail.find("\n")
    if cut == -1 or cut == len(tail) - 1:
        return tail
    return tail[cut + 1:]


def format_pipeline(result: PipelineResult) -> str:
    lines = [f"pipeline #{result.pipeline_id}: {result.overall_status}"]
    for job in result.jobs:
        lines.append(f"  job {job.name}: {job.status}")
    if result.test_summary is not None:
        ts = result.test_summary
        lines.append(f"  tests: {ts.tests} total, {ts.failures} failed, {ts.errors} errors, {ts.skipped} skipped")
        if ts.failing_case_names:
            lines.append(f"  failing: {', '.join(ts.failing_case_names)}")
    if result.coverage is not None:
        lines.append(
            f"  line coverage: {result.coverage.lines_covered}/{result.coverage.lines_total}"
            f" ({result.coverage.ratio:.1%})"
        )
    return "\n".join(lines)


def format_issue(issue: RequirementIssue) -> str:
    parts = [f"# Issue {issue.issue_id}: {issue.title}", "", issue.user_story, "", issue.description]
    if issue.acceptance_criteria:
        parts.append("")
        parts.append("Acceptance criteria:")
        parts.extend(f"{i}. {c}" for i, c in enumerate(issue.acceptance_criteria, start=1))
    return "\n".join(parts)


@dataclass
class ToolEvent:
    name: str
    arguments: dict
    result: str
    allowed: bool = True


@dataclass
class ToolExecutor:
    """Mediates one agent step's tool calls against the gateway.

    One executor per requirement; it accumulates the pipelines observed and
    merge attempts made so the orchestrator can derive outcomes.
    """

    gateway: DevOpsGateway
    project: ProjectRef
    branch: str
    role: str
    cycle: int
    max_pipeline_wait: float
    requirement: RequirementIssue | None = None
    staged: dict[str, str | None] = field(default_factory=dict)
    pipelines_seen: list[PipelineResult] = field(default_factory=list)
    merge_attempts: list[MergeAttempt] = field(default_factory=list)
    current_mr: MergeRequestRef | None = None

    def execute(self, name: str, arguments: dict) -> str:
        handler = getattr(self, f"_tool_{name}", None)
        if name not in TOOL_NAMES or handler is None:
            return f"refused: unknown tool {name!r}"
        try:
            return handler(arguments)
        except GatewayError as exc:
            return f"error: {exc}"
        except (KeyError, TypeError, ValueError) as exc:
            return f"error: bad arguments for {name}: {exc}"

    # -- handlers -------------------------------------------------------------

    def _tool_read_file(self, args: dict) -> str:
        path = str(args["path"])
        if path in self.staged:
            content = self.staged[path]
            return content if content is not None else f"error: path {path!r} staged for deletion"
        return self.gateway.read_file(self.project, path, ref=self.branch)

    def _tool_write_file(self, args: dict) -> str:
        path = str(args["path"])
        self.staged[path] = str(args["content"])
        return f"staged write {path} ({len(self.staged[path])} chars)"

    def _tool_delete_file(self, args: dict) -> str:
        path = str(args["path"])
        self.staged[path] = None
        return f"staged deletion {path}"

    def _tool_list_tree(self, args: dict) -> str:
        paths = set(self.gateway.read_tree(self.project, ref=self.branch))
        listed = []
        for path in sorted(paths | set(self.staged)):
            if path in self.staged:
                suffix = " (staged deletion)" if self.staged[path] is None else " (staged)"
            else:
                suffix = ""
            listed.append(path + suffix)
        return "\n".join(listed) if listed else "(empty tree)"

    def _tool_read_issue(self, args: dict) -> str:
        issue_id = args.get("issue_id")
        if issue_id is None:
            if self.requirement is not None:
                return format_issue(self.requirement)
            issues = self.gateway.read_issues(self.project)
            return "\n\n".join(format_issue(i) for i in issues) if issues else "(no issues)"
        for issue in self.gateway.read_issues(self.project):
            if issue.issue_id == int(issue_id):
                return format_issue(issue)
        return f"error: issue {issue_id} not found"

    def _tool_read_reports(self, args: dict) -> str:
        paths = [p for p in self.gateway.read_tree(self.project, ref=self.branch) if p.startswith("reports/")]
        if not paths:
            return "(no reports yet)"
        chunks = []
        for path in paths:
            chunks.append(f"--- {path} ---\n{self.gateway.read_file(self.project, path, ref=self.branch)}")
        return "\n".join(chunks)

    def _tool_run_pipeline(self, args: dict) -> str:
        if self.staged:
            changes = [FileChange(path, content) for path, content in sorted(self.staged.items())]
            message = f"[sesl] {self.role} changes"
            if self.requirement is not None:
                message += f" req {self.requirement.issue_id} cycle {self.cycle}"
            commit_id = self.gateway.apply_commit(self.project, self.branch, changes, message)
            self.staged.clear()
        else:
            commit_id = self.gateway.get_branch_head(self.project, self.branch)
        result = self.gateway.await_pipeline(self.project, commit_id, self.max_pipeline_wait)
        self.pipelines_seen.append(result)
        return format_pipeline(result)

    def _tool_read_job_log(self, args: dict) -> str:
        if not self.pipelines_seen:
            return "error: no pipeline has run in this requirement yet"
        job_name = str(args["job"])
        last = self.pipelines_seen[-1]
        for job in last.jobs:
            if job.name == job_name:
                return tail_truncate(job.log, JOB_LOG_EXCERPT_CHARS)
        return f"error: job {job_name!r} not found in pipeline #{last.pipeline_id}"

    def _tool_open_merge_request(self, args: dict) -> str:
        title = str(args.get("title") or f"Implement {self.branch}")
        self.current_mr = self.gateway.open_merge_request(self.project, self.branch, title)
        return f"opened merge request !{self.current_mr.mr_id} for {self.branch}"

    def _tool_merge(self, args: dict) -> str:
        if self.current_mr is None:
            return "refused: no open merge request (call open_merge_request first)"
        attempt = self.gateway.merge(self.project, self.current_mr)
        self.merge_attempts.append(attempt)
        if attempt.merged:
            self.current_mr = attempt.mr
            return f"merged !{attempt.mr.mr_id} into default branch"
        detail = f" ({', '.join(attempt.conflict_paths)})" if attempt.conflict_paths else ""
        return f"refused: {attempt.reason}{detail}"

    # -- derived state ----------------------------------------------------------

    @property
    def merged(self) -> bool:
        return any(a.merged for a in self.merge_attempts)

    @staticmethod
    def describe_call(name: str, arguments: dict) -> str:
        return f"{name} {json.dumps(arguments, sort_keys=True)}"
