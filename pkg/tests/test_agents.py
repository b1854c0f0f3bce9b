"""Agent runtime: context assembly, step loop, tool mediation, report persistence."""

from __future__ import annotations

import math

import pytest

from sesl.agents.backends import ScriptedBackend, StepMeta, synthetic_tokens
from sesl.agents.context import assemble_context, estimate_tokens, make_pipeline_excerpt
from sesl.agents.playbook import parse_playbook
from sesl.agents.runtime import (
    FORCED_REPORT_BUDGET,
    persist_report,
    run_agent_step,
)
from sesl.agents.tools import ToolExecutor, tail_truncate
from sesl.ci_reports import CoverageSummary, TestSummary
from sesl.gateway.fake import DESCRIPTOR_PATH, FakePlatform
from sesl.gateway.types import JobResult, PipelineResult, RequirementIssue

PIPELINE = "src src/\ncheck build: exists src/app.py\ncheck unit-tests: run-tests tests\n"
TREE = {DESCRIPTOR_PATH: PIPELINE, "src/app.py": "def main():\n    return 1\n"}


def make_issue(issue_id=1) -> RequirementIssue:
    return RequirementIssue(
        issue_id=issue_id,
        title="Set up the grid",
        user_story="As a player, I want a grid.",
        description="The system shall create the grid.",
        acceptance_criteria=["One hundred cells.", "All water.", "Bounds checked."],
    )


def make_executor(platform=None, branch="req-1", requirement=None):
    from sesl.gateway.types import ProjectRef

    platform = platform or FakePlatform()
    if "proj" not in platform.project_names():
        platform.seed_project("proj", dict(TREE), [make_issue()])
    ref = ProjectRef("fake", "proj")
    if branch != "main":
        platform.create_branch(ref, branch)
    return ToolExecutor(
        gateway=platform,
        project=ref,
        branch=branch,
        role="coding",
        cycle=1,
        max_pipeline_wait=10.0,
        requirement=requirement or make_issue(),
    ), platform, ref


def meta_for(role="coding", issue_id=1, cycle=1) -> StepMeta:
    return StepMeta(
        baseline_id="A", clone_index=1, clone_name="bs-A-c01",
        role=role, issue_id=issue_id, cycle=cycle, model="scripted-playbook-v1",
    )


# -- context assembly -----------------------------------------------------------


def test_cycle1_context_is_prompt_requirement_planning_only():
    context = assemble_context(
        role="coding", system_prompt="SYS", branch="req-1", cycle=1,
        requirement=make_issue(),
        planning_docs=[("docs/plan.md", "the plan")],
    )
    rendered = context.render()
    assert "Set up the grid" in rendered
    assert "the plan" in rendered
    assert "Report from" not in rendered
    assert "Latest pipeline" not in rendered
    # Deterministic ordering: requirement before planning docs.
    assert rendered.index("Set up the grid") < rendered.index("the plan")


def test_prior_reports_render_oldest_first_and_pipeline_last():
    result = PipelineResult(
        pipeline_id=4, commit_ref="c", overall_status="failed",
        jobs=[JobResult("build", "failed", "boom")],
    )
    context = assemble_context(
        role="review", system_prompt="SYS", branch="req-1", cycle=2,
        requirement=make_issue(),
        prior_reports=[("coding", 1, "first report"), ("testing", 1, "second report")],
        latest_pipeline=result,
    )
    rendered = context.render()
    assert rendered.index("first report") < rendered.index("second report")
    assert rendered.index("second report") < rendered.index("Latest pipeline")


def test_eviction_drops_oldest_reports_first():
    reports = [("coding", c, f"report {c} " + "x" * 400) for c in range(1, 6)]
    context = assemble_context(
        role="review", system_prompt="S", branch="b", cycle=3,
        requirement=make_issue(),
        prior_reports=reports,
        token_budget=400,
    )
    kept = [cycle for _, cycle, _ in context.prior_reports]
    assert kept == sorted(kept)
    assert len(kept) < 5
    assert kept and kept[-1] == 5  # newest survives
    assert context.requirement is not None  # requirement never evicted
    assert estimate_tokens(context.render()) <= 400


def test_eviction_never_drops_requirement_even_when_over_budget():
    context = assemble_context(
        role="coding", system_prompt="S", branch="b", cycle=1,
        requirement=make_issue(),
        token_budget=1,
    )
    assert context.requirement is not None
    assert "Set up the grid" in context.render()


def test_job_log_excerpt_keeps_tail():
    log = "\n".join(f"line {i} of the build output" for i in range(500)) + "\nCOMPILE ERROR at end"
    assert len(log) > 10000
    result = PipelineResult(
        pipeline_id=1, commit_ref="c", overall_status="failed",
        jobs=[JobResult("build", "failed", log)],
    )
    excerpt = make_pipeline_excerpt(result, include_test_jobs=True, per_job_chars=2000)
    job_log = excerpt.jobs[0][2]
    assert len(job_log) <= 2000
    assert job_log.endswith("COMPILE ERROR at end")
    assert not job_log.startswith("line 0")
    # Truncation lands on a line boundary.
    assert job_log.startswith("line ")


def test_coding_cycle1_excerpt_hides_test_jobs():
    result = PipelineResult(
        pipeline_id=1, commit_ref="c", overall_status="failed",
        jobs=[JobResult("build", "success", "ok"), JobResult("unit-tests", "failed", "bad")],
        test_summary=TestSummary(tests=3, failures=1),
        coverage=CoverageSummary(lines_covered=1, lines_total=2),
    )
    hidden = make_pipeline_excerpt(result, include_test_jobs=False)
    assert [name for name, _, _ in hidden.jobs] == ["build"]
    assert hidden.tests_line == "" and hidden.coverage_line == ""
    shown = make_pipeline_excerpt(result, include_test_jobs=True)
    assert [name for name, _, _ in shown.jobs] == ["build", "unit-tests"]
    assert "3 total" in shown.tests_line


def test_tail_truncate_noop_for_short_text():
    assert tail_truncate("short", 100) == "short"


# -- the step loop -----------------------------------------------------------------


def scripted(text: str) -> ScriptedBackend:
    return ScriptedBackend(parse_playbook(text))


def test_scripted_happy_path_executes_calls_and_reports():
    backend = scripted(
        'step A * coding 1 1\n'
        '  call write_file {"path": "src/feature.py", "content": "x = 1\\n"}\n'
        '  call run_pipeline\n'
        '  report "done"\n'
    )
    executor, platform, ref = make_executor()
    context = assemble_context(role="coding", system_prompt="S", branch="req-1", cycle=1,
                               requirement=make_issue())
    result = run_agent_step(context, backend, meta_for(), executor,
                            allowlist=frozenset({"write_file", "run_pipeline"}), max_tool_calls=25)
    assert result.trace.report == "done"
    assert not result.trace.forced
    assert [e.name for e in result.trace.events] == ["write_file", "run_pipeline"]
    assert len(executor.pipelines_seen) == 1
    assert "src/feature.py" in platform.read_tree(ref, ref="req-1")


def test_disallowed_tool_is_refused_and_loop_continues():
    backend = scripted(
        'step A * planning - 1\n'
        '  call merge {}\n'
        '  report "tried to merge"\n'
    )
    executor, _, _ = make_executor(branch="main", requirement=None)
    context = assemble_context(role="planning", system_prompt="S", branch="main", cycle=1,
                               requirement=None)
    result = run_agent_step(context, backend, meta_for(role="planning", issue_id=None), executor,
                            allowlist=frozenset({"read_issue"}), max_tool_calls=25)
    assert result.trace.report == "tried to merge"
    event = result.trace.events[0]
    assert not event.allowed
    assert "not allowed" in event.result
    assert executor.merge_attempts == []  # never reached the gateway


def test_tool_budget_forces_flagged_report():
    backend = scripted(
        'step A * coding 1 1\n'
        + "".join(f'  call read_file {{"path": "f{i}"}}\n' for i in range(5))
        + '  report "never reached"\n'
    )
    executor, _, _ = make_executor()
    context = assemble_context(role="coding", system_prompt="S", branch="req-1", cycle=1,
                               requirement=make_issue())
    result = run_agent_step(context, backend, meta_for(), executor,
                            allowlist=frozenset({"read_file"}), max_tool_calls=2)
    assert result.trace.report == FORCED_REPORT_BUDGET
    assert result.trace.forced
    assert len(result.trace.events) == 2


def test_empty_report_is_flagged():
    backend = scripted('step A * coding 1 1\n  report "   "\n')
    executor, _, _ = make_executor()
    context = assemble_context(role="coding", system_prompt="S", branch="req-1", cycle=1,
                               requirement=make_issue())
    result = run_agent_step(context, backend, meta_for(), executor,
                            allowlist=frozenset(), max_tool_calls=5)
    assert result.trace.forced
    assert result.trace.report.strip()


def test_synthetic_token_accounting_matches_hand_computation():
    playbook_text = 'step A * coding 1 1\n  report "four char"\n'
    backend = scripted(playbook_text)
    executor, _, _ = make_executor()
    context = assemble_context(role="coding", system_prompt="SYS!", branch="req-1", cycle=1,
                               requirement=make_issue())
    result = run_agent_step(context, backend, meta_for(), executor,
                            allowlist=frozenset(), max_tool_calls=5)
    expected_input = synthetic_tokens(len("SYS!") + len(context.render()))
    assert result.ledger.input_tokens == expected_input
    assert result.ledger.output_tokens == math.ceil(len("four char") / 4)
    assert result.ledger.model == "scripted-playbook-v1"
    assert result.ledger.clone == "bs-A-c01"


def test_trace_is_deterministic_across_runs():
    playbook_text = (
        'step A * coding 1 1\n'
        '  call list_tree\n'
        '  call read_file {"path": "src/app.py"}\n'
        '  report "inspected"\n'
    )

    def run_once():
        backend = scripted(playbook_text)
        executor, _, _ = make_executor(FakePlatform())
        context = assemble_context(role="coding", system_prompt="S", branch="req-1", cycle=1,
                                   requirement=make_issue())
        result = run_agent_step(context, backend, meta_for(), executor,
                                allowlist=frozenset({"list_tree", "read_file"}), max_tool_calls=9)
        return result.trace.digestible()

    assert run_once() == run_once()


def test_openai_backend_drives_the_same_loop():
    """The live chat backend speaks the same turn protocol as the scripted one."""
    import json as jsonlib

    from sesl.agents.backends import OpenAiChatBackend

    responses = [
        {
            "choices": [{"message": {"tool_calls": [
                {"function": {"name": "write_file",
                              "arguments": jsonlib.dumps({"path": "src/x.py", "content": "x = 1\n"})}},
                {"function": {"name": "run_pipeline", "arguments": "{}"}},
            ]}}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 30},
        },
        {
            "choices": [{"message": {"content": "implemented and verified"}}],
            "usage": {"prompt_tokens": 200, "completion_tokens": 12},
        },
    ]

    class FakeHttpSession:
        def __init__(self):
            self.payloads = []

        def post(self, url, json=None, headers=None, timeout=None):
            self.payloads.append((url, json, headers))

            class R:
                status_code = 200

                def __init__(self, body):
                    self._body = body

                def json(self):
                    return self._body

            return R(responses[len(self.payloads) - 1])

    http = FakeHttpSession()
    backend = OpenAiChatBackend(
        model="live-model", temperature=0.2,
        base_url="https://llm.example/v1", api_key="k", session=http,
    )
    executor, platform, ref = make_executor()
    context = assemble_context(role="coding", system_prompt="S", branch="req-1", cycle=1,
                               requirement=make_issue())
    result = run_agent_step(context, backend, meta_for(), executor,
                            allowlist=frozenset({"write_file", "run_pipeline"}), max_tool_calls=10)
    assert result.trace.report == "implemented and verified"
    assert [e.name for e in result.trace.events] == ["write_file", "run_pipeline"]
    assert result.ledger.input_tokens == 320 and result.ledger.output_tokens == 42
    url, payload, headers = http.payloads[0]
    assert url == "https://llm.example/v1/chat/completions"
    assert payload["model"] == "live-model" and payload["temperature"] == 0.2
    assert any(t["function"]["name"] == "merge" for t in payload["tools"])
    assert headers["Authorization"] == "Bearer k"
    # Tool results fed back as messages on the second turn.
    assert any(m["role"] == "tool" for m in http.payloads[1][1]["messages"])


def test_openai_backend_retries_then_fails():
    import requests as requests_lib

    from sesl.agents.backends import BackendError, OpenAiChatBackend

    class DownSession:
        def __init__(self):
            self.attempts = 0

        def post(self, *a, **kw):
            self.attempts += 1
            raise requests_lib.ConnectionError("boom")

    session = DownSession()
    backend = OpenAiChatBackend(model="m", temperature=0.0, base_url="https://x/v1",
                                api_key="k", session=session, max_retries=2, sleep=lambda s: None)
    with pytest.raises(BackendError, match="unreachable"):
        backend.request_completion([{"role": "user", "content": "hi"}])
    assert session.attempts == 3


# -- tools ---------------------------------------------------------------------------


def test_run_pipeline_without_staged_changes_awaits_head():
    executor, platform, ref = make_executor()
    out1 = executor.execute("run_pipeline", {})
    assert "success" in out1
    assert len(executor.pipelines_seen) == 1


def test_read_file_sees_staged_overlay():
    executor, _, _ = make_executor()
    executor.execute("write_file", {"path": "src/new.py", "content": "fresh"})
    assert executor.execute("read_file", {"path": "src/new.py"}) == "fresh"
    listing = executor.execute("list_tree", {})
    assert "src/new.py (staged)" in listing


def test_delete_then_read_reports_deletion():
    executor, _, _ = make_executor()
    executor.execute("delete_file", {"path": "src/app.py"})
    out = executor.execute("read_file", {"path": "src/app.py"})
    assert "staged for deletion" in out


def test_read_issue_formats_requirement():
    executor, _, _ = make_executor()
    out = executor.execute("read_issue", {})
    assert "Set up the grid" in out and "Acceptance criteria" in out


def test_read_job_log_requires_pipeline():
    executor, _, _ = make_executor()
    assert "no pipeline" in executor.execute("read_job_log", {"job": "build"})
    executor.execute("run_pipeline", {})
    assert "error" not in executor.execute("read_job_log", {"job": "build"})
    assert "not found" in executor.execute("read_job_log", {"job": "ghost"})


def test_merge_requires_open_mr():
    executor, _, _ = make_executor()
    assert "no open merge request" in executor.execute("merge", {})
    executor.execute("run_pipeline", {})
    executor.execute("open_merge_request", {"title": "Feature"})
    assert executor.execute("merge", {}) .startswith("merged")
    assert executor.merged


def test_unknown_tool_refused():
    executor, _, _ = make_executor()
    assert executor.execute("rm_rf", {}).startswith("refused")


def test_bad_arguments_are_tool_errors_not_crashes():
    executor, _, _ = make_executor()
    out = executor.execute("read_file", {})
    assert out.startswith("error:")


# -- report persistence ------------------------------------------------------------


def test_persist_report_paths():
    executor, platform, ref = make_executor()
    issue = RequirementIssue(issue_id=3, title="Fire shots")
    platform.create_branch(ref, "req-3")
    path = persist_report(platform, ref, "req-3", "testing", "# report", requirement=issue, cycle=2)
    assert path == "reports/req-3/cycle-2-testing.md"
    assert platform.read_file(ref, path, ref="req-3") == "# report"


def test_persist_planning_report_on_default_branch():
    executor, platform, ref = make_executor(branch="main")
    path = persist_report(platform, ref, "main", "planning", "# plan")
    assert path == "reports/planning/planning-report.md"
    assert platform.read_file(ref, path) == "# plan"


def test_persist_report_replaces_content_via_new_commit():
    executor, platform, ref = make_executor()
    issue = make_issue(issue_id=1)
    persist_report(platform, ref, "req-1", "coding", "v1", requirement=issue, cycle=1)
    persist_report(platform, ref, "req-1", "coding", "v2", requirement=issue, cycle=1)
    assert platform.read_file(ref, "reports/req-1/cycle-1-coding.md", ref="req-1") == "v2"


def test_persist_report_rejects_empty():
    executor, platform, ref = make_executor()
    with pytest.raises(ValueError):
        persist_report(platform, ref, "req-1", "coding", "  ", requirement=make_issue(), cycle=1)
