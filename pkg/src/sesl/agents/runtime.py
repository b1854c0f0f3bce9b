"""One agent step: backend loop, tool mediation, and report persistence.

A step loops until the backend returns a report or the tool budget runs out
(then a flagged report is synthesized). Tool calls outside the role's
allowlist never reach the gateway: the refusal text is fed back to the agent
as the tool result and the loop continues. Every step yields exactly one
report and one token ledger entry.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

from sesl.agents.backends import StepMeta
from sesl.agents.context import AgentContext
from sesl.agents.tools import ToolEvent, ToolExecutor
from sesl.gateway.base import DevOpsGateway
from sesl.gateway.types import FileChange, ProjectRef, RequirementIssue

FORCED_REPORT_BUDGET = "tool budget exhausted"
FORCED_REPORT_EMPTY = "(agent returned an empty report)"
FORCED_REPORT_NO_ACTION = "(agent returned neither tool calls nor a report)"


@dataclass
class AgentAction:
    tool_calls: list[tuple[str, dict]] = field(default_factory=list)
    report: str | None = None
    stop: bool = False


@dataclass
class TokenLedgerEntry:
    clone: str
    role: str
    cycle: int
    input_tokens: int
    output_tokens: int
    wall_time: float
    model: str
    issue_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "clone": self.clone,
            "role": self.role,
            "cycle": self.cycle,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "wall_time": self.wall_time,
            "model": self.model,
            "issue_id": self.issue_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenLedgerEntry":
        return cls(
            clone=d["clone"],
            role=d["role"],
            cycle=int(d["cycle"]),
            input_tokens=int(d["input_tokens"]),
            output_tokens=int(d["output_tokens"]),
            wall_time=float(d["wall_time"]),
            model=d["model"],
            issue_id=d.get("issue_id"),
        )


@dataclass
class StepTrace:
    context_digest: str
    events: list[ToolEvent] = field(default_factory=list)
    actions: list[AgentAction] = field(default_factory=list)
    report: str = ""
    forced: bool = False

    def digestible(self) -> list[tuple]:
        """The (context digest, tool call, result) view used for determinism checks."""
        return [
            (self.context_digest, ToolExecutor.describe_call(e.name, e.arguments), e.result)
            for e in self.events
        ]


@dataclass
class StepResult:
    trace: StepTrace
    ledger: TokenLedgerEntry


def run_agent_step(
    context: AgentContext,
    backend,
    meta: StepMeta,
    executor: ToolExecutor,
    allowlist: frozenset[str] | set[str],
    max_tool_calls: int,
    clock=time.monotonic,
) -> StepResult:
    started = clock()
    rendered = context.render()
    digest = hashlib.sha256((context.system_prompt + "\x00" + rendered).encode()).hexdigest()
    trace = StepTrace(context_digest=digest)

    messages = [
        {"role": "system", "content": context.system_prompt},
        {"role": "user", "content": rendered},
    ]
    session = backend.open_step(meta)
    input_tokens = 0
    output_tokens = 0
    calls_used = 0

    while True:
        reply = session.next(messages)
        input_tokens += reply.input_tokens
        output_tokens += reply.output_tokens

        if reply.report is not None:
            report = reply.report
            if not report.strip():
                report = FORCED_REPORT_EMPTY
                trace.forced = True
            trace.actions.append(AgentAction(report=report, stop=True))
            trace.report = report
            break

        if not reply.tool_calls:
            trace.report = FORCED_REPORT_NO_ACTION
            trace.forced = True
            trace.actions.append(AgentAction(report=trace.report, stop=True))
            break

        action = AgentAction(tool_calls=list(reply.tool_calls))
        trace.actions.append(action)
        budget_hit = False
        for name, arguments in reply.tool_calls:
            if calls_used >= max_tool_calls:
                budget_hit = True
                break
            calls_used += 1
            if name in allowlist:
                result = executor.execute(name, arguments)
                allowed = True
            else:
                result = f"refused: tool {name!r} not allowed for role {meta.role}"
                allowed = False
            trace.events.append(ToolEvent(name=name, arguments=arguments, result=result, allowed=allowed))
            messages.append({"role": "tool", "content": f"{name} -> {result}"})
        if budget_hit:
            trace.report = FORCED_REPORT_BUDGET
            trace.forced = True
            trace.actions.append(AgentAction(report=trace.report, stop=True))
            break

    ledger = TokenLedgerEntry(
        clone=meta.clone_name,
        role=meta.role,
        cycle=meta.cycle,
        input_tokens=input_tokens,
        output_tokens=output_tokens,
        wall_time=clock() - started,
        model=meta.model,
        issue_id=meta.issue_id,
    )
    return StepResult(trace=trace, ledger=ledger)


def report_path(requirement: RequirementIssue | None, cycle: int, role: str, doc_name: str = "planning-report") -> str:
    if requirement is None:
        return f"reports/planning/{doc_name}.md"
    return f"reports/req-{requirement.issue_id}/cycle-{cycle}-{role}.md"


def persist_report(
    gateway: DevOpsGateway,
    project: ProjectRef,
    branch: str,
    role: str,
    markdown: str,
    requirement: RequirementIssue | None = None,
    cycle: int = 1,
    doc_name: str = "planning-report",
) -> str:
    """Commit the step's markdown report to the clone and return its path."""
    if not markdown.strip():
        raise ValueError("report must not be empty")
    path = report_path(requirement, cycle, role, doc_name)
    if requirement is None:
        message = f"[sesl] {role} report"
    else:
        message = f"[sesl] {role} report req {requirement.issue_id} cycle {cycle}"
    gateway.apply_commit(project, branch, [FileChange(path, markdown)], message)
    return path
