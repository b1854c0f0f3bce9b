"""Experiment lifecycle: clone loop, cycles, retries, resume, determinism."""

from __future__ import annotations

import threading

import pytest

from sesl.agents.backends import ScriptedBackend
from sesl.agents.playbook import load_playbook
from sesl.defects import DefectLog, replay
from sesl.gateway.fake import FakePlatform
from sesl.gateway.types import JobResult, PipelineResult
from sesl.ledger import LedgerError, normalized_ledger_bytes, read_ledger
from sesl.manifest import load_manifest, manifest_from_dict, manifest_to_dict
from sesl.orchestrator import (
    ExperimentRunner,
    fallback_failure_class,
    parse_failure_claim,
)


class StepClock:
    """Monotonic test clock; tests can jump it forward to trip time guards."""

    def __init__(self, dt: float = 0.001):
        self.now = 0.0
        self.dt = dt

    def __call__(self) -> float:
        self.now += self.dt
        return self.now


def build_runner(fixtures_dir, tmp_path, manifest_name, playbook_name, *,
                 manifest_mutate=None, progress=None, clock=None, stop_event=None):
    manifest = load_manifest(fixtures_dir / "manifests" / manifest_name)
    if manifest_mutate:
        data = manifest_to_dict(manifest)
        manifest_mutate(data)
        manifest = manifest_from_dict(data)
    platform = FakePlatform(merge_eval_timeout=manifest.max_pipeline_wait)
    refs = {}
    for baseline in manifest.baselines:
        path = (fixtures_dir / "manifests" / baseline.project_ref).resolve()
        key = f"baseline-{baseline.baseline_id}"
        refs[baseline.baseline_id] = platform.load_baseline_dir(path, locator=key)
    backend = ScriptedBackend(load_playbook(fixtures_dir / "playbooks" / playbook_name))
    runner = ExperimentRunner(
        manifest, platform, backend, refs, tmp_path / "out",
        progress=progress,
        clock=clock or StepClock(),
        wall_clock=lambda: 0.0,
        stop_event=stop_event,
    )
    return runner, platform, manifest


def test_all_green_experiment_completes_every_clone(fixtures_dir, tmp_path):
    steps = []
    runner, platform, manifest = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        progress=lambda *a: steps.append(a),
    )
    runs = runner.run()
    assert [r.clone_name for r in runs] == [
        "battleships-demo-A-c01", "battleships-demo-A-c02",
        "battleships-demo-B-c01", "battleships-demo-B-c02",
    ]
    for run in runs:
        assert run.status == "completed"
        assert run.attempt == 1
        assert len(run.outcomes) == 5
        for outcome in run.outcomes:
            assert outcome.merged
            assert outcome.cycles_used == 1
            assert outcome.all_tests_passed
            assert outcome.failure_class == "none"
            assert outcome.line_coverage is not None and 0.0 < outcome.line_coverage <= 1.0
            assert outcome.pipeline_events[-1][1] == "success"
    records = read_ledger(runner.ledger_path)
    assert [r["type"] for r in records].count("clone_run") == 4
    assert records[0]["type"] == "experiment_start"
    assert records[-1]["type"] == "experiment_end"


def test_every_step_persists_exactly_one_report(fixtures_dir, tmp_path):
    from sesl.gateway.types import ProjectRef

    runner, platform, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
    )
    runner.run()
    clone = ProjectRef("fake", "battleships-demo-A-c01")
    assert platform.read_file(clone, "reports/planning/planning-report.md")
    for issue_id in range(1, 6):
        branch = f"req-{issue_id}"
        tree = platform.read_tree(clone, ref=branch)
        for role in ("coding", "testing", "review"):
            assert f"reports/req-{issue_id}/cycle-1-{role}.md" in tree
    # Reports committed before the merge reach the default branch; the
    # review report lands after the merge and stays on its branch.
    default_tree = platform.read_tree(clone)
    assert "reports/req-1/cycle-1-coding.md" in default_tree
    assert "reports/req-1/cycle-1-testing.md" in default_tree
    assert "reports/req-1/cycle-1-review.md" not in default_tree
    testing_report = platform.read_file(clone, "reports/req-1/cycle-1-testing.md", ref="req-1")
    assert "failure-cause:" in testing_report


def test_planning_runs_once_and_cycle_order_is_fixed(fixtures_dir, tmp_path):
    steps = []
    runner, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        progress=lambda clone, issue, role, cycle, status: steps.append((clone, issue, role, cycle)),
    )
    runner.run()
    for clone in {s[0] for s in steps}:
        clone_steps = [s for s in steps if s[0] == clone]
        assert [s[2] for s in clone_steps if s[1] is None] == ["planning"]
        for issue_id in (1, 2, 3, 4, 5):
            roles = [s[2] for s in clone_steps if s[1] == issue_id]
            assert roles == ["coding", "testing", "review"]


def test_defective_clone_issues_match_defect_log_replay(fixtures_dir, tmp_path):
    import json

    from sesl.gateway.types import ProjectRef

    runner, platform, manifest = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
    )
    runner.run()
    a_issues = platform.read_issues(ProjectRef("fake", "battleships-demo-A-c01"))
    b_issues = platform.read_issues(ProjectRef("fake", "battleships-demo-B-c01"))
    log_path = runner.out_dir / "defect_logs" / "battleships-demo-B-c01.json"
    logs = [DefectLog.from_dict(d) for d in json.loads(log_path.read_text())]
    assert len(logs) == 5
    for clean, defective, log in zip(a_issues, b_issues, logs):
        replayed = replay(clean, log)
        assert replayed.description == defective.description
        assert replayed.user_story == defective.user_story
        assert replayed.acceptance_criteria == defective.acceptance_criteria
    # Defects actually changed something.
    assert any(a.description != b.description for a, b in zip(a_issues, b_issues))


def test_ledger_is_deterministic_across_runs(fixtures_dir, tmp_path):
    runner1, _, _ = build_runner(fixtures_dir, tmp_path / "r1", "battleships.yaml", "all_green.playbook")
    runner1.run()
    runner2, _, _ = build_runner(fixtures_dir, tmp_path / "r2", "battleships.yaml", "all_green.playbook")
    runner2.run()
    assert normalized_ledger_bytes(runner1.ledger_path) == normalized_ledger_bytes(runner2.ledger_path)


def test_refuses_existing_ledger_without_resume(fixtures_dir, tmp_path):
    runner, _, _ = build_runner(fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook")
    runner.run()
    runner2, _, _ = build_runner(fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook")
    with pytest.raises(LedgerError, match="already exists"):
        runner2.run()


def test_resume_runs_only_missing_clones(fixtures_dir, tmp_path):
    runner, _, _ = build_runner(fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook")
    runner.run()
    # Simulate a crash after 3 of 4 clones: drop the last clone_run record.
    lines = runner.ledger_path.read_text().splitlines()
    clone_lines = [i for i, l in enumerate(lines) if '"type":"clone_run"' in l]
    kept = [l for i, l in enumerate(lines) if i not in (clone_lines[-1], len(lines) - 1)]
    runner.ledger_path.write_text("\n".join(kept) + "\n")

    executed = []
    runner2, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        progress=lambda clone, *a: executed.append(clone),
    )
    runs = runner2.run(resume=True)
    assert len(runs) == 1
    assert runs[0].clone_name == "battleships-demo-B-c02"
    assert set(executed) == {"battleships-demo-B-c02"}
    records = read_ledger(runner.ledger_path)
    names = [r["clone_name"] for r in records if r["type"] == "clone_run"]
    assert sorted(names) == [
        "battleships-demo-A-c01", "battleships-demo-A-c02",
        "battleships-demo-B-c01", "battleships-demo-B-c02",
    ]


def test_resume_reuses_clones_that_already_exist_on_the_platform(fixtures_dir, tmp_path):
    """A crashed live run leaves replicated projects behind; resume must
    reuse them instead of failing on the name collision."""
    runner, platform, manifest = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
    )
    runner.run()
    lines = runner.ledger_path.read_text().splitlines()
    clone_lines = [i for i, l in enumerate(lines) if '"type":"clone_run"' in l]
    kept = [l for i, l in enumerate(lines) if i not in (clone_lines[-1], len(lines) - 1)]
    runner.ledger_path.write_text("\n".join(kept) + "\n")

    # Same platform: the pending clone's project already exists.
    backend = ScriptedBackend(load_playbook(fixtures_dir / "playbooks" / "all_green.playbook"))
    refs = {b.baseline_id: platform._projects  # not used; rebuild refs properly below
            for b in manifest.baselines}
    from sesl.gateway.types import ProjectRef

    refs = {b.baseline_id: ProjectRef("fake", f"baseline-{b.baseline_id}") for b in manifest.baselines}
    runner2 = ExperimentRunner(manifest, platform, backend, refs, runner.out_dir,
                               clock=StepClock(), wall_clock=lambda: 0.0)
    runs = runner2.run(resume=True)
    assert len(runs) == 1
    assert runs[0].status == "failed"  # branches already exist on the reused clone
    # The reused project is the original one, not a new replica.
    assert runs[0].project_locator == "battleships-demo-B-c02"


def test_resume_rejects_foreign_ledger(fixtures_dir, tmp_path):
    runner, _, _ = build_runner(fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook")
    runner.run()
    runner2, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        manifest_mutate=lambda d: d.update(experiment_id="other-exp"),
    )
    with pytest.raises(LedgerError, match="belongs to experiment"):
        runner2.run(resume=True)


def test_dry_run_replicates_and_injects_only(fixtures_dir, tmp_path):
    from sesl.gateway.types import ProjectRef

    steps = []
    runner, platform, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        progress=lambda *a: steps.append(a),
    )
    runs = runner.run(dry_run=True)
    assert runs == [] and steps == []
    records = read_ledger(runner.ledger_path)
    kinds = [r["type"] for r in records]
    assert kinds.count("clone_replicated") == 4
    assert kinds.count("clone_run") == 0
    # Clones exist, and B clones carry injected issues.
    b_issue = platform.read_issues(ProjectRef("fake", "battleships-demo-B-c01"))[0]
    a_issue = platform.read_issues(ProjectRef("fake", "battleships-demo-A-c01"))[0]
    assert a_issue.description != b_issue.description


def test_always_red_hits_cycle_cap(fixtures_dir, tmp_path):
    steps = []
    runner, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships-red.yaml", "always_red.playbook",
        progress=lambda clone, issue, role, cycle, status: steps.append((issue, role, cycle)),
    )
    [run] = runner.run()
    assert run.status == "completed"
    for outcome in run.outcomes:
        assert outcome.cycles_used == 3
        assert not outcome.merged
        assert not outcome.all_tests_passed
        assert outcome.failure_class == "production"  # claimed by the testing report
    coding_cycles = {cycle for issue, role, cycle in steps if role == "coding"}
    assert coding_cycles == {1, 2, 3}  # no fourth coding step anywhere


def test_stuck_pipeline_triggers_retry(fixtures_dir, tmp_path):
    runner, platform, _ = build_runner(
        fixtures_dir, tmp_path, "battleships-flaky.yaml", "flaky_retry.playbook",
    )
    [run] = runner.run()
    assert run.status == "retried_then_completed"
    assert run.attempt == 2
    assert len(run.attempt_wall_times) == 2
    assert all(o.merged for o in run.outcomes)
    # The fresh replica got a distinct project; both exist on the platform.
    assert "battleships-flaky-A-c01" in platform.project_names()
    assert "battleships-flaky-A-c01-a2" in platform.project_names()


def test_stuck_without_retries_aborts(fixtures_dir, tmp_path):
    runner, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships-flaky.yaml", "flaky_retry.playbook",
        manifest_mutate=lambda d: d.update(max_clone_retries=0),
    )
    [run] = runner.run()
    assert run.status == "aborted_stuck"
    assert run.attempt == 1
    assert len(run.outcomes) == 1  # every issue covered exactly once
    assert run.outcomes[0].failure_class == "infrastructure"
    assert not run.outcomes[0].merged


def test_wall_time_guard_marks_remaining_requirements(fixtures_dir, tmp_path):
    clock = StepClock()

    def trip_after_requirement_2(clone, issue, role, cycle, status):
        if issue == 2 and role == "review":
            clock.now += 10_000.0

    runner, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        manifest_mutate=lambda d: d.update(clones_per_baseline=1,
                                           baselines=[d["baselines"][0]]),
        progress=trip_after_requirement_2,
        clock=clock,
    )
    [run] = runner.run()
    assert run.status == "aborted_time"
    by_issue = {o.issue_id: o for o in run.outcomes}
    assert len(by_issue) == 5
    assert by_issue[1].merged and by_issue[2].merged
    for issue_id in (3, 4, 5):
        outcome = by_issue[issue_id]
        assert outcome.cycles_used == 0
        assert not outcome.merged
        assert outcome.failure_class == "infrastructure"


def test_playbook_miss_fails_that_clone_only(fixtures_dir, tmp_path):
    # Drop baseline B's steps from the playbook: B clones fail, A clones pass.
    text = (fixtures_dir / "playbooks" / "all_green.playbook").read_text()
    cut = text.index("step B")
    partial = tmp_path / "partial.playbook"
    partial.write_text(text[:cut])

    manifest = load_manifest(fixtures_dir / "manifests" / "battleships.yaml")
    platform = FakePlatform()
    refs = {
        b.baseline_id: platform.load_baseline_dir(
            (fixtures_dir / "manifests" / b.project_ref).resolve(),
            locator=f"baseline-{b.baseline_id}",
        )
        for b in manifest.baselines
    }
    backend = ScriptedBackend(load_playbook(partial))
    runner = ExperimentRunner(manifest, platform, backend, refs, tmp_path / "out",
                              clock=StepClock(), wall_clock=lambda: 0.0)
    runs = runner.run()
    by_name = {r.clone_name: r for r in runs}
    assert by_name["battleships-demo-A-c01"].status == "completed"
    assert by_name["battleships-demo-B-c01"].status == "failed"
    assert "no playbook entry" in by_name["battleships-demo-B-c01"].error
    assert len(by_name["battleships-demo-B-c01"].outcomes) == 5  # infra-filled


def test_stop_event_fails_current_clone_and_skips_rest(fixtures_dir, tmp_path):
    stop = threading.Event()

    def stop_during_first_clone(clone, issue, role, cycle, status):
        if issue == 2 and role == "coding":
            stop.set()

    runner, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        progress=stop_during_first_clone, stop_event=stop,
    )
    runs = runner.run()
    assert len(runs) == 1
    assert runs[0].status == "failed"
    assert len(runs[0].outcomes) == 5
    records = read_ledger(runner.ledger_path)
    assert [r["type"] for r in records].count("clone_run") == 1  # rest skipped, resumable


def test_token_ledger_covers_all_steps(fixtures_dir, tmp_path):
    runner, _, manifest = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
    )
    runs = runner.run()
    for run in runs:
        # planning + 5 requirements x 3 roles
        assert len(run.token_ledger) == 1 + 15
        assert all(e.input_tokens > 0 and e.output_tokens > 0 for e in run.token_ledger)
        assert {e.model for e in run.token_ledger} == {manifest.llm.model}


def test_concurrent_clones_produce_complete_ledger(fixtures_dir, tmp_path):
    runner, _, _ = build_runner(
        fixtures_dir, tmp_path, "battleships.yaml", "all_green.playbook",
        manifest_mutate=lambda d: d.update(concurrency_limit=3),
    )
    runs = runner.run()
    assert len(runs) == 4
    assert all(r.status == "completed" for r in runs)
    records = read_ledger(runner.ledger_path)
    names = sorted(r["clone_name"] for r in records if r["type"] == "clone_run")
    assert names == [
        "battleships-demo-A-c01", "battleships-demo-A-c02",
        "battleships-demo-B-c01", "battleships-demo-B-c02",
    ]
    for run in runs:
        assert [o.issue_id for o in run.outcomes] == [1, 2, 3, 4, 5]


def test_parse_failure_claim():
    assert parse_failure_claim("ok\n\nfailure-cause: production\n") == "production"
    assert parse_failure_claim("failure-cause: test") == "test"
    assert parse_failure_claim("Failure-Cause: NONE") == "none"
    assert parse_failure_claim("first\nfailure-cause: test\nfailure-cause: none\n") == "none"
    assert parse_failure_claim("no claim here") is None
    assert parse_failure_claim("failure-cause: gremlins") is None


def _executor_with_pipeline(status, jobs):
    from sesl.agents.tools import ToolExecutor

    executor = ToolExecutor(
        gateway=None, project=None, branch="b", role="testing", cycle=1, max_pipeline_wait=1.0,
    )
    executor.pipelines_seen.append(
        PipelineResult(pipeline_id=1, commit_ref="c", overall_status=status, jobs=jobs)
    )
    return executor


def test_fallback_failure_class_rules():
    build_failed = _executor_with_pipeline("failed", [JobResult("build", "failed", "")])
    assert fallback_failure_class(build_failed, merged=False) == "production"
    tests_failed = _executor_with_pipeline(
        "failed", [JobResult("build", "success", ""), JobResult("unit-tests", "failed", "")]
    )
    assert fallback_failure_class(tests_failed, merged=False) == "test"
    stuck = _executor_with_pipeline("stuck", [])
    assert fallback_failure_class(stuck, merged=False) == "infrastructure"
    green = _executor_with_pipeline("success", [JobResult("build", "success", "")])
    assert fallback_failure_class(green, merged=True) == "none"
