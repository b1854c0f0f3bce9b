"""Deterministic assembly of the context an agent step sees.

Ordering is fixed: system prompt, role instructions, requirement, planning
documents, prior reports oldest-first, and the latest pipeline excerpt last.
When the estimated size exceeds the token budget, planning documents and
prior reports are evicted oldest-first; the requirement text is never
evicted. Job logs are tail-truncated to a per-job character budget at a line
boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from sesl.agents.tools import JOB_LOG_EXCERPT_CHARS, format_issue, tail_truncate
from sesl.gateway.types import PipelineResult, RequirementIssue

DEFAULT_TOKEN_BUDGET = 32768

ROLE_INSTRUCTIONS = {
    "planning": (
        "You are the planning agent. Study the project issues, then document design "
        "decisions and architectural considerations as files in the repository. "
        "Finish with a markdown report summarizing the plan."
    ),
    "coding": (
        "You are the coding agent. Implement the requirement so the build job passes; "
        "watch the pipeline's build job output. Finish with a markdown report of what "
        "you changed."
    ),
    "testing": (
        "You are the testing agent. Author tests for the requirement, run the pipeline, "
        "and state whether a red pipeline is caused by the production code or by your "
        "tests. Your markdown report MUST contain a line "
        "`failure-cause: production|test|none`."
    ),
    "review": (
        "You are the review agent. Inspect the previous reports and the pipeline. Fix "
        "remaining problems if needed, rerun the pipeline, and if it is green open a "
        "merge request and merge it. Finish with a markdown report."
    ),
}


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


@dataclass
class PipelineExcerpt:
    pipeline_id: int
    overall_status: str
    jobs: list[tuple[str, str, str]]  # (name, status, log tail)
    tests_line: str = ""
    coverage_line: str = ""

    def render(self) -> str:
        lines = [f"## Latest pipeline #{self.pipeline_id}: {self.overall_status}"]
        for name, status, log in self.jobs:
            lines.append(f"### job {name}: {status}")
            if log:
                lines.append("```")
                lines.append(log)
                lines.append("```")
        if self.tests_line:
            lines.append(self.tests_line)
        if self.coverage_line:
            lines.append(self.coverage_line)
        return "\n".join(lines)


@dataclass
class AgentContext:
    role: str
    system_prompt: str
    branch: str
    cycle: int
    requirement: RequirementIssue | None
    issues_overview: str = ""
    planning_docs: list[tuple[str, str]] = field(default_factory=list)
    prior_reports: list[tuple[str, int, str]] = field(default_factory=list)  # (role, cycle, markdown)
    latest_pipeline: PipelineExcerpt | None = None
    token_budget: int = DEFAULT_TOKEN_BUDGET

    def render(self) -> str:
        """The user-message body, in the documented deterministic order."""
        parts = [ROLE_INSTRUCTIONS.get(self.role, f"You are the {self.role} agent.")]
        parts.append(f"Working branch: {self.branch} (cycle {self.cycle})")
        if self.requirement is not None:
            parts.append(format_issue(self.requirement))
        if self.issues_overview:
            parts.append("## Project issues\n" + self.issues_overview)
        for name, text in self.planning_docs:
            parts.append(f"## Planning document: {name}\n{text}")
        for role, cycle, text in self.prior_reports:
            parts.append(f"## Report from {role} (cycle {cycle})\n{text}")
        if self.latest_pipeline is not None:
            parts.append(self.latest_pipeline.render())
        return "\n\n".join(parts)


def make_pipeline_excerpt(
    result: PipelineResult,
    include_test_jobs: bool = True,
    per_job_chars: int = JOB_LOG_EXCERPT_CHARS,
) -> PipelineExcerpt:
    """Condense a pipeline result for agent consumption. Jobs whose name
    contains "test" count as test jobs and can be filtered out (the coding
    agent's first cycle only watches the build)."""
    jobs = []
    for job in result.jobs:
        if not include_test_jobs and "test" in job.name.lower():
            continue
        jobs.append((job.name, job.status, tail_truncate(job.log, per_job_chars)))
    excerpt = PipelineExcerpt(
        pipeline_id=result.pipeline_id,
        overall_status=result.overall_status,
        jobs=jobs,
    )
    if include_test_jobs and result.test_summary is not None:
        ts = result.test_summary
        excerpt.tests_line = (
            f"tests: {ts.tests} total, {ts.failures} failed, {ts.errors} errors, {ts.skipped} skipped"
        )
    if include_test_jobs and result.coverage is not None:
        excerpt.coverage_line = (
            f"line coverage: {result.coverage.lines_covered}/{result.coverage.lines_total}"
        )
    return excerpt


def assemble_context(
    role: str,
    system_prompt: str,
    branch: str,
    cycle: int,
    requirement: RequirementIssue | None,
    planning_docs: list[tuple[str, str]] | None = None,
    prior_reports: list[tuple[str, int, str]] | None = None,
    latest_pipeline: PipelineResult | None = None,
    issues_overview: str = "",
    include_test_jobs: bool = True,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
) -> AgentContext:
    context = AgentContext(
        role=role,
        system_prompt=system_prompt,
        branch=branch,
        cycle=cycle,
        requirement=requirement,
        issues_overview=issues_overview,
        planning_docs=list(planning_docs or []),
        prior_reports=list(prior_reports or []),
        latest_pipeline=make_pipeline_excerpt(latest_pipeline, include_test_jobs)
        if latest_pipeline is not None
        else None,
        token_budget=token_budget,
    )
    # Evict oldest documents first until the rendered context fits the
    # budget; planning docs predate all reports, so they go first.
    while estimate_tokens(context.system_prompt) + estimate_tokens(context.render()) > token_budget:
        if context.planning_docs:
            context.planning_docs.pop(0)
        elif context.prior_reports:
            context.prior_reports.pop(0)
        else:
            break
    return context
