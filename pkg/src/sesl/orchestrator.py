"""Experiment lifecycle: replication, injection, agent cycles, retries, ledger.

The simulation is a deterministic state machine over two event kinds: agent
step completions and pipeline terminations (all stochasticity lives behind
the LLM backend). Per clone attempt the planning step runs once on the
default branch, then requirements are processed sequentially in issue-id
order, each on its own `req-<id>` branch and through at most cycle_limit
coding->testing->review cycles, stopping early on merge. Any stuck pipeline
abandons the attempt and re-runs the whole clone from a fresh replica while
retries remain. Every fault becomes ledger data; the experiment never aborts
because one clone failed.
"""

from __future__ import annotations

import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from sesl.agents.backends import BackendError, StepMeta
from sesl.agents.context import DEFAULT_TOKEN_BUDGET, assemble_context
from sesl.agents.playbook import PlaybookMiss
from sesl.agents.runtime import TokenLedgerEntry, persist_report, run_agent_step
from sesl.agents.tools import ToolExecutor
from sesl.defects import inject
from sesl.gateway.base import DevOpsGateway
from sesl.gateway.types import GatewayError, NameCollisionError, ProjectRef, RequirementIssue
from sesl.ledger import LedgerError, LedgerWriter, read_ledger
from sesl.manifest import BaselineSpec, ExperimentManifest, manifest_to_dict, planned_clone_ids

CLONE_STATUSES = ("completed", "aborted_time", "aborted_stuck", "retried_then_completed", "failed")
FAILURE_CLASSES = ("none", "production", "test", "infrastructure")
CYCLE_ROLES = ("coding", "testing", "review")

_FAILURE_CLAIM_RE = re.compile(r"^failure-cause:\s*(production|test|none)\s*$", re.IGNORECASE | re.MULTILINE)


@dataclass
class RequirementOutcome:
    issue_id: int
    cycles_used: int
    merged: bool
    all_tests_passed: bool
    line_coverage: float | None
    failure_class: str
    pipeline_events: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "issue_id": self.issue_id,
            "cycles_used": self.cycles_used,
            "merged": self.merged,
            "all_tests_passed": self.all_tests_passed,
            "line_coverage": self.line_coverage,
            "failure_class": self.failure_class,
            "pipeline_events": [[pid, status] for pid, status in self.pipeline_events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RequirementOutcome":
        return cls(
            issue_id=int(d["issue_id"]),
            cycles_used=int(d["cycles_used"]),
            merged=bool(d["merged"]),
            all_tests_passed=bool(d["all_tests_passed"]),
            line_coverage=d.get("line_coverage"),
            failure_class=d["failure_class"],
            pipeline_events=[(int(p), s) for p, s in d.get("pipeline_events", [])],
        )


@dataclass
class CloneRun:
    clone_name: str
    baseline_id: str
    status: str
    attempt: int
    outcomes: list[RequirementOutcome]
    wall_time: float
    token_ledger: list[TokenLedgerEntry] = field(default_factory=list)
    attempt_wall_times: list[float] = field(default_factory=list)
    project_locator: str = ""
    started_at: float = 0.0
    finished_at: float = 0.0
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "type": "clone_run",
            "clone_name": self.clone_name,
            "baseline_id": self.baseline_id,
            "status": self.status,
            "attempt": self.attempt,
            "outcomes": [o.to_dict() for o in self.outcomes],
            "wall_time": self.wall_time,
            "token_ledger": [t.to_dict() for t in self.token_ledger],
            "attempt_wall_times": list(self.attempt_wall_times),
            "project_locator": self.project_locator,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CloneRun":
        return cls(
            clone_name=d["clone_name"],
            baseline_id=d["baseline_id"],
            status=d["status"],
            attempt=int(d["attempt"]),
            outcomes=[RequirementOutcome.from_dict(o) for o in d.get("outcomes", [])],
            wall_time=float(d.get("wall_time", 0.0)),
            token_ledger=[TokenLedgerEntry.from_dict(t) for t in d.get("token_ledger", [])],
            attempt_wall_times=[float(v) for v in d.get("attempt_wall_times", [])],
            project_locator=d.get("project_locator", ""),
            started_at=float(d.get("started_at", 0.0)),
            finished_at=float(d.get("finished_at", 0.0)),
            error=d.get("error", ""),
        )


class _CloneStuck(Exception):
    """A pipeline wait hit the stuck bound; abandon this attempt."""

    def __init__(self, outcomes: list[RequirementOutcome]):
        super().__init__("stuck pipeline")
        self.outcomes = outcomes


class _Interrupted(Exception):
    def __init__(self, outcomes: list[RequirementOutcome]):
        super().__init__("interrupted by shutdown signal")
        self.outcomes = outcomes


def parse_failure_claim(report: str) -> str | None:
    """Last `failure-cause: production|test|none` line in a testing report."""
    matches = _FAILURE_CLAIM_RE.findall(report or "")
    return matches[-1].lower() if matches else None


def fallback_failure_class(executor: ToolExecutor, merged: bool) -> str:
    """Rule-based failure class when the testing agent made no claim."""
    pipelines = executor.pipelines_seen
    if not pipelines:
        return "none" if merged else "infrastructure"
    last = pipelines[-1]
    if last.overall_status in ("stuck", "error"):
        return "infrastructure"
    if last.overall_status == "success":
        return "none"
    build_failed = any(j.status != "success" and "test" not in j.name.lower() for j in last.jobs)
    return "production" if build_failed else "test"


class ExperimentRunner:
    """Drives one experiment against a gateway and an LLM backend.

    The ledger writer is the single serialization point; clones may run
    concurrently up to the manifest's concurrency_limit.
    """

    def __init__(
        self,
        manifest: ExperimentManifest,
        gateway: DevOpsGateway,
        backend,
        baseline_refs: dict[str, ProjectRef],
        out_dir: str | Path,
        progress=None,
        clock=time.monotonic,
        wall_clock=time.time,
        stop_event: threading.Event | None = None,
        token_budget: int = DEFAULT_TOKEN_BUDGET,
    ):
        missing = [b.baseline_id for b in manifest.baselines if b.baseline_id not in baseline_refs]
        if missing:
            raise ValueError(f"no project ref for baselines {missing}")
        self.manifest = manifest
        self.gateway = gateway
        self.backend = backend
        self.baseline_refs = baseline_refs
        self.out_dir = Path(out_dir)
        self.progress = progress or (lambda *args: None)
        self.clock = clock
        self.wall_clock = wall_clock
        self.stop_event = stop_event or threading.Event()
        self.token_budget = token_budget
        self._lock = threading.Lock()

    @property
    def ledger_path(self) -> Path:
        return self.out_dir / "ledger.jsonl"

    # -- experiment ------------------------------------------------------------

    def run(self, resume: bool = False, dry_run: bool = False) -> list[CloneRun]:
        completed: set[str] = set()
        appending = False
        if resume and self.ledger_path.exists():
            records = read_ledger(self.ledger_path, tolerate_partial_tail=True)
            starts = [r for r in records if r.get("type") == "experiment_start"]
            if starts and starts[0].get("experiment_id") != self.manifest.experiment_id:
                raise LedgerError(
                    f"ledger belongs to experiment {starts[0].get('experiment_id')!r}, "
                    f"not {self.manifest.experiment_id!r}"
                )
            completed = {r["clone_name"] for r in records if r.get("type") == "clone_run"}
            appending = True
        elif self.ledger_path.exists():
            raise LedgerError(
                f"ledger already exists at {self.ledger_path}; use resume or force a fresh run"
            )

        planned = planned_clone_ids(self.manifest)
        baselines = {b.baseline_id: b for b in self.manifest.baselines}
        pending = [
            (baselines[baseline_id], index, name)
            for baseline_id, index, name in planned
            if name not in completed
        ]

        with LedgerWriter(self.ledger_path, append=appending) as writer:
            if not appending:
                writer.write(
                    {
                        "type": "experiment_start",
                        "experiment_id": self.manifest.experiment_id,
                        "schema_version": 1,
                        "manifest": manifest_to_dict(self.manifest),
                        "planned_clones": [name for _, _, name in planned],
                        "started_at": self.wall_clock(),
                    }
                )

            # Replication and defect injection happen for every pending clone
            # before any agent runs; a replication failure aborts here.
            prepared = []
            for spec, index, name in pending:
                project = self._replicate_and_inject(spec, name, resume)
                prepared.append((spec, index, name, project))
                if dry_run:
                    writer.write(
                        {
                            "type": "clone_replicated",
                            "clone_name": name,
                            "baseline_id": spec.baseline_id,
                            "project_locator": project.locator,
                            "issues": len(self.gateway.read_issues(project)),
                            "defects_injected": spec.defect_profile is not None,
                        }
                    )

            runs: list[CloneRun] = []
            if not dry_run:
                def execute(item):
                    spec, index, name, project = item
                    if self.stop_event.is_set():
                        return None
                    run = self._run_clone(spec, index, name, project)
                    with self._lock:
                        writer.write(run.to_dict())
                        runs.append(run)
                    return run

                if self.manifest.concurrency_limit > 1:
                    with ThreadPoolExecutor(max_workers=self.manifest.concurrency_limit) as pool:
                        list(pool.map(execute, prepared))
                else:
                    for item in prepared:
                        execute(item)

            ok = sum(1 for r in runs if r.status in ("completed", "retried_then_completed"))
            writer.write(
                {
                    "type": "experiment_end",
                    "completed": ok,
                    "failed": len(runs) - ok,
                    "dry_run": dry_run,
                    "finished_at": self.wall_clock(),
                }
            )
        return runs

    # -- clone -------------------------------------------------------------------

    def _replicate_and_inject(self, spec: BaselineSpec, project_name: str, resume: bool = False) -> ProjectRef:
        baseline_ref = self.baseline_refs[spec.baseline_id]
        try:
            [project] = self.gateway.replicate_project(baseline_ref, [project_name])
        except NameCollisionError:
            if not resume:
                raise
            # Crashed run already created this clone; reuse it.
            project = ProjectRef(backend_kind=baseline_ref.backend_kind, locator=project_name)
        if spec.defect_profile is not None:
            logs = []
            for issue in self.gateway.read_issues(project):
                defective, log = inject(issue, spec.defect_profile)
                self.gateway.update_issue(project, defective)
                logs.append(log.to_dict())
            log_dir = self.out_dir / "defect_logs"
            log_dir.mkdir(parents=True, exist_ok=True)
            (log_dir / f"{project_name}.json").write_text(
                json.dumps(logs, indent=2, sort_keys=True), encoding="utf-8"
            )
        return project

    def _run_clone(self, spec: BaselineSpec, clone_index: int, clone_name: str, project: ProjectRef) -> CloneRun:
        max_attempts = 1 + self.manifest.max_clone_retries
        attempt_wall_times: list[float] = []
        token_entries: list[TokenLedgerEntry] = []
        started_at = self.wall_clock()
        issue_ids = [i.issue_id for i in self.gateway.read_issues(project)]

        attempt = 1
        while True:
            t0 = self.clock()
            try:
                outcomes, timed_out = self._run_attempt(
                    spec, clone_index, clone_name, project, token_entries
                )
                wall = self.clock() - t0
                attempt_wall_times.append(wall)
                if timed_out:
                    status = "aborted_time"
                elif attempt > 1:
                    status = "retried_then_completed"
                else:
                    status = "completed"
                return self._finish_run(
                    clone_name, spec, status, attempt, outcomes, issue_ids,
                    wall, attempt_wall_times, token_entries, project, started_at,
                )
            except _CloneStuck as stuck:
                wall = self.clock() - t0
                attempt_wall_times.append(wall)
                if attempt >= max_attempts:
                    return self._finish_run(
                        clone_name, spec, "aborted_stuck", attempt, stuck.outcomes, issue_ids,
                        wall, attempt_wall_times, token_entries, project, started_at,
                    )
                attempt += 1
                project = self._replicate_and_inject(spec, f"{clone_name}-a{attempt}")
            except _Interrupted as interrupted:
                wall = self.clock() - t0
                attempt_wall_times.append(wall)
                return self._finish_run(
                    clone_name, spec, "failed", attempt, interrupted.outcomes, issue_ids,
                    wall, attempt_wall_times, token_entries, project, started_at,
                )
            except (PlaybookMiss, BackendError, GatewayError) as exc:
                wall = self.clock() - t0
                attempt_wall_times.append(wall)
                run = self._finish_run(
                    clone_name, spec, "failed", attempt, [], issue_ids,
                    wall, attempt_wall_times, token_entries, project, started_at,
                )
                run.error = str(exc)
                return run

    def _finish_run(
        self, clone_name, spec, status, attempt, outcomes, issue_ids,
        wall, attempt_wall_times, token_entries, project, started_at,
    ) -> CloneRun:
        covered = {o.issue_id for o in outcomes}
        outcomes = list(outcomes) + [
            RequirementOutcome(
                issue_id=issue_id,
                cycles_used=0,
                merged=False,
                all_tests_passed=False,
                line_coverage=None,
                failure_class="infrastructure",
            )
            for issue_id in issue_ids
            if issue_id not in covered
        ]
        outcomes.sort(key=lambda o: o.issue_id)
        return CloneRun(
            clone_name=clone_name,
            baseline_id=spec.baseline_id,
            status=status,
            attempt=attempt,
            outcomes=outcomes,
            wall_time=wall,
            token_ledger=list(token_entries),
            attempt_wall_times=list(attempt_wall_times),
            project_locator=project.locator,
            started_at=started_at,
            finished_at=self.wall_clock(),
        )

    # -- attempt -----------------------------------------------------------------

    def _run_attempt(
        self,
        spec: BaselineSpec,
        clone_index: int,
        clone_name: str,
        project: ProjectRef,
        token_entries: list[TokenLedgerEntry],
    ) -> tuple[list[RequirementOutcome], bool]:
        t0 = self.clock()
        deadline = t0 + self.manifest.max_wall_time_per_clone
        issues = self.gateway.read_issues(project)
        default_branch = self.gateway.get_default_branch(project)

        # Planning runs exactly once per attempt, on the default branch.
        planning_docs = self._run_planning(spec, clone_index, clone_name, project, default_branch, token_entries)

        outcomes: list[RequirementOutcome] = []
        timed_out = False
        for issue in issues:
            if self.stop_event.is_set():
                raise _Interrupted(outcomes)
            if self.clock() > deadline:
                timed_out = True
                break
            outcome = self._run_requirement(
                spec, clone_index, clone_name, project, issue, planning_docs, token_entries, deadline
            )
            outcomes.append(outcome)
        return outcomes, timed_out

    def _run_planning(
        self, spec, clone_index, clone_name, project, default_branch, token_entries
    ) -> list[tuple[str, str]]:
        agent = self.manifest.agent("planning")
        issues = self.gateway.read_issues(project)
        overview = "\n".join(f"- issue {i.issue_id}: {i.title} -- {i.user_story}" for i in issues)
        executor = ToolExecutor(
            gateway=self.gateway,
            project=project,
            branch=default_branch,
            role="planning",
            cycle=1,
            max_pipeline_wait=self.manifest.max_pipeline_wait,
            requirement=None,
        )
        context = assemble_context(
            role="planning",
            system_prompt=agent.system_prompt,
            branch=default_branch,
            cycle=1,
            requirement=None,
            issues_overview=overview,
            token_budget=self.token_budget,
        )
        meta = StepMeta(
            baseline_id=spec.baseline_id,
            clone_index=clone_index,
            clone_name=clone_name,
            role="planning",
            issue_id=None,
            cycle=1,
            model=self.manifest.llm.model,
        )
        step = run_agent_step(
            context, self.backend, meta, executor, agent.tool_allowlist,
            agent.max_tool_calls_per_step, clock=self.clock,
        )
        token_entries.append(step.ledger)
        persist_report(self.gateway, project, default_branch, "planning", step.trace.report)
        self.progress(clone_name, None, "planning", 1, self._last_status(executor))
        if any(p.overall_status == "stuck" for p in executor.pipelines_seen):
            raise _CloneStuck([])

        docs = []
        for path in self.gateway.read_tree(project, ref=default_branch):
            if path.startswith("reports/planning/") or path.startswith("docs/"):
                docs.append((path, self.gateway.read_file(project, path, ref=default_branch)))
        return docs

    # -- requirement ----------------------------------------------------------------

    def _run_requirement(
        self,
        spec: BaselineSpec,
        clone_index: int,
        clone_name: str,
        project: ProjectRef,
        issue: RequirementIssue,
        planning_docs: list[tuple[str, str]],
        token_entries: list[TokenLedgerEntry],
        deadline: float,
    ) -> RequirementOutcome:
        branch = f"req-{issue.issue_id}"
        self.gateway.create_branch(project, branch)
        executor = ToolExecutor(
            gateway=self.gateway,
            project=project,
            branch=branch,
            role="coding",
            cycle=1,
            max_pipeline_wait=self.manifest.max_pipeline_wait,
            requirement=issue,
        )
        prior_reports: list[tuple[str, int, str]] = []
        last_testing_report: str | None = None
        merged = False
        cycles_used = 0
        hit_deadline = False

        for cycle in range(1, self.manifest.cycle_limit + 1):
            if self.clock() > deadline:
                hit_deadline = True
                break
            cycles_used = cycle
            for role in CYCLE_ROLES:
                agent = self.manifest.agent(role)
                executor.role = role
                executor.cycle = cycle
                last_pipeline = executor.pipelines_seen[-1] if executor.pipelines_seen else None
                context = assemble_context(
                    role=role,
                    system_prompt=agent.system_prompt,
                    branch=branch,
                    cycle=cycle,
                    requirement=issue,
                    planning_docs=planning_docs,
                    prior_reports=prior_reports,
                    latest_pipeline=last_pipeline,
                    include_test_jobs=not (role == "coding" and cycle == 1),
                    token_budget=self.token_budget,
                )
                meta = StepMeta(
                    baseline_id=spec.baseline_id,
                    clone_index=clone_index,
                    clone_name=clone_name,
                    role=role,
                    issue_id=issue.issue_id,
                    cycle=cycle,
                    model=self.manifest.llm.model,
                )
                step = run_agent_step(
                    context, self.backend, meta, executor, agent.tool_allowlist,
                    agent.max_tool_calls_per_step, clock=self.clock,
                )
                token_entries.append(step.ledger)
                persist_report(
                    self.gateway, project, branch, role, step.trace.report,
                    requirement=issue, cycle=cycle,
                )
                prior_reports.append((role, cycle, step.trace.report))
                if role == "testing":
                    last_testing_report = step.trace.report
                self.progress(clone_name, issue.issue_id, role, cycle, self._last_status(executor))
                if any(p.overall_status == "stuck" for p in executor.pipelines_seen):
                    raise _CloneStuck([self._outcome(issue, cycle, executor, False, last_testing_report, stuck=True)])
                if executor.merged:
                    merged = True
                    break
            if merged:
                break

        outcome = self._outcome(issue, cycles_used, executor, merged, last_testing_report, stuck=False)
        if hit_deadline and not merged:
            outcome.failure_class = "infrastructure"
        return outcome

    def _outcome(
        self,
        issue: RequirementIssue,
        cycles_used: int,
        executor: ToolExecutor,
        merged: bool,
        last_testing_report: str | None,
        stuck: bool,
    ) -> RequirementOutcome:
        last = executor.pipelines_seen[-1] if executor.pipelines_seen else None
        all_tests_passed = bool(last and last.test_summary and last.test_summary.all_green)
        line_coverage = last.coverage.ratio if last is not None and last.coverage is not None else None
        if stuck:
            failure_class = "infrastructure"
        else:
            failure_class = parse_failure_claim(last_testing_report or "") or fallback_failure_class(executor, merged)
        return RequirementOutcome(
            issue_id=issue.issue_id,
            cycles_used=cycles_used,
            merged=merged,
            all_tests_passed=all_tests_passed,
            line_coverage=line_coverage,
            failure_class=failure_class,
            pipeline_events=[(p.pipeline_id, p.overall_status) for p in executor.pipelines_seen],
        )

    @staticmethod
    def _last_status(executor: ToolExecutor) -> str:
        return executor.pipelines_seen[-1].overall_status if executor.pipelines_seen else "-"
