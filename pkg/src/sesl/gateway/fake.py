"""In-process fake DevOps platform with a deterministic pipeline evaluator.

Pipelines are described by a `.sesl-pipeline` file at the repo root, one
check per line:

    check <name>: exists <path>
    check <name>: contains <path> <token...>
    check <name>: line-count <path> >= <n>
    check <name>: run-tests <dir>
    check <name>: always-hang
    check <name>: hang-times <n>
    src <prefix>                      # coverage source prefix, default src/

Each check is one pipeline job. `run-tests` executes declarative test files
(`*.tests` under the given directory, one `test <name>: <predicate>` per
line) and synthesizes JUnit and JaCoCo XML from the results, so the CI
feedback parsers see the same formats as in live mode. Line coverage counts
a source line as covered when a passing `contains` test matched it.

`always-hang` simulates a stuck pipeline; `hang-times <n>` hangs the first n
evaluations per platform instance, modelling a transient infrastructure
flake that a clone retry gets past. Waits are simulated, never slept.

Given the same operation sequence, all returned ids, statuses, and trees are
byte-identical across runs.
"""

from __future__ import annotations

import difflib
import hashlib
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import quoteattr

import yaml

from sesl.ci_reports import parse_jacoco, parse_junit
from sesl.gateway.base import DevOpsGateway
from sesl.gateway.types import (
    EmptyCommitError,
    FileChange,
    GatewayError,
    JobResult,
    MergeAttempt,
    MergeRequestRef,
    NameCollisionError,
    NotFoundError,
    PipelineResult,
    ProjectRef,
    RequirementIssue,
)

DESCRIPTOR_PATH = ".sesl-pipeline"
DEFAULT_BRANCH = "main"

_ORIGIN_LABEL_PREFIX = "origin-issue:"


class PipelineSpecError(ValueError):
    """Malformed pipeline descriptor or test file line."""


@dataclass(frozen=True)
class PipelineCheck:
    name: str
    kind: str  # exists | contains | line-count | run-tests | always-hang | hang-times
    path: str = ""
    token: str = ""
    threshold: int = 0


@dataclass(frozen=True)
class PipelineSpec:
    checks: tuple[PipelineCheck, ...]
    src_prefixes: tuple[str, ...] = ("src/",)


def parse_pipeline_spec(text: str) -> PipelineSpec:
    checks = []
    prefixes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("src "):
            prefixes.append(line[4:].strip())
            continue
        if not line.startswith("check "):
            raise PipelineSpecError(f"line {lineno}: expected 'check <name>: <predicate>'")
        head, sep, predicate = line[6:].partition(":")
        name = head.strip()
        predicate = predicate.strip()
        if not sep or not name or not predicate:
            raise PipelineSpecError(f"line {lineno}: expected 'check <name>: <predicate>'")
        checks.append(_parse_predicate(name, predicate, lineno))
    return PipelineSpec(checks=tuple(checks), src_prefixes=tuple(prefixes) or ("src/",))


def _parse_predicate(name: str, predicate: str, lineno: int) -> PipelineCheck:
    parts = predicate.split()
    op = parts[0]
    if op == "exists" and len(parts) == 2:
        return PipelineCheck(name, "exists", path=parts[1])
    if op == "contains" and len(parts) >= 3:
        return PipelineCheck(name, "contains", path=parts[1], token=" ".join(parts[2:]))
    if op == "line-count" and len(parts) == 4 and parts[2] == ">=":
        return PipelineCheck(name, "line-count", path=parts[1], threshold=int(parts[3]))
    if op == "run-tests" and len(parts) == 2:
        return PipelineCheck(name, "run-tests", path=parts[1].rstrip("/"))
    if op == "always-hang" and len(parts) == 1:
        return PipelineCheck(name, "always-hang")
    if op == "hang-times" and len(parts) == 2:
        return PipelineCheck(name, "hang-times", threshold=int(parts[1]))
    raise PipelineSpecError(f"line {lineno}: unrecognized predicate {predicate!r}")


def _evaluate_predicate(check: PipelineCheck, tree: dict[str, str]) -> tuple[bool, str]:
    if check.kind == "exists":
        if check.path in tree:
            return True, f"exists {check.path} -> ok"
        return False, f"exists {check.path} -> FAIL: no such path"
    if check.kind == "contains":
        content = tree.get(check.path)
        if content is None:
            return False, f"contains {check.path} -> FAIL: no such path"
        if check.token in content:
            return True, f"contains {check.path} {check.token!r} -> ok"
        return False, f"contains {check.path} -> FAIL: token {check.token!r} not found"
    if check.kind == "line-count":
        content = tree.get(check.path)
        if content is None:
            return False, f"line-count {check.path} -> FAIL: no such path"
        count = len(content.splitlines())
        if count >= check.threshold:
            return True, f"line-count {check.path} = {count} >= {check.threshold} -> ok"
        return False, f"line-count {check.path} = {count} -> FAIL: need >= {check.threshold}"
    raise PipelineSpecError(f"predicate {check.kind} is not evaluable")


@dataclass
class _TestCase:
    name: str
    passed: bool
    message: str = ""
    error: bool = False
    covered: dict[str, set[int]] = field(default_factory=dict)


def _run_declarative_tests(test_dir: str, tree: dict[str, str]) -> list[_TestCase]:
    cases: list[_TestCase] = []
    prefix = test_dir + "/"
    for path in sorted(tree):
        if not path.startswith(prefix) or not path.endswith(".tests"):
            continue
        for lineno, raw in enumerate(tree[path].splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not line.startswith("test "):
                cases.append(_TestCase(f"{path}:{lineno}", False, "malformed test line", error=True))
                continue
            head, sep, predicate = line[5:].partition(":")
            name = head.strip()
            if not sep or not name or not predicate.strip():
                cases.append(_TestCase(f"{path}:{lineno}", False, "malformed test line", error=True))
                continue
            try:
                check = _parse_predicate(name, predicate.strip(), lineno)
            except (PipelineSpecError, ValueError):
                cases.append(_TestCase(name, False, "malformed test predicate", error=True))
                continue
            if check.kind not in ("exists", "contains", "line-count"):
                cases.append(_TestCase(name, False, f"predicate {check.kind} not allowed in tests", error=True))
                continue
            passed, message = _evaluate_predicate(check, tree)
            case = _TestCase(name, passed, "" if passed else message)
            if passed and check.kind == "contains":
                content = tree.get(check.path, "")
                hits = {
                    i for i, text_line in enumerate(content.splitlines(), start=1)
                    if check.token in text_line
                }
                if hits:
                    case.covered[check.path] = hits
            cases.append(case)
    return cases


def _synthesize_junit(cases: list[_TestCase]) -> str:
    failures = sum(1 for c in cases if not c.passed and not c.error)
    errors = sum(1 for c in cases if c.error)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<testsuites><testsuite name="sesl-fake" tests="{len(cases)}" '
        f'failures="{failures}" errors="{errors}" skipped="0">',
    ]
    for case in cases:
        lines.append(f"<testcase name={quoteattr(case.name)}>")
        if case.error:
            lines.append(f"<error message={quoteattr(case.message)}/>")
        elif not case.passed:
            lines.append(f"<failure message={quoteattr(case.message)}/>")
        lines.append("</testcase>")
    lines.append("</testsuite></testsuites>")
    return "\n".join(lines)


def _synthesize_jacoco(cases: list[_TestCase], tree: dict[str, str], prefixes: tuple[str, ...]) -> str:
    source_files = [p for p in sorted(tree) if any(p.startswith(pre) for pre in prefixes)]
    total = sum(len(tree[p].splitlines()) for p in source_files)
    covered_lines: dict[str, set[int]] = {}
    for case in cases:
        for path, hit_lines in case.covered.items():
            if any(path.startswith(pre) for pre in prefixes):
                covered_lines.setdefault(path, set()).update(hit_lines)
    covered = sum(len(v) for v in covered_lines.values())
    missed = max(total - covered, 0)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<report name="sesl-fake"><counter type="LINE" missed="{missed}" covered="{covered}"/></report>'
    )


@dataclass
class _Commit:
    commit_id: str
    branch: str
    parent: str | None
    message: str
    tree: dict[str, str]


@dataclass
class _Pipeline:
    pipeline_id: int
    commit_id: str
    result: PipelineResult | None = None
    junit_xml: str | None = None
    jacoco_xml: str | None = None


@dataclass
class _MergeRequest:
    mr_id: int
    source_branch: str
    title: str
    state: str = "open"


@dataclass
class _Project:
    locator: str
    default_branch: str = DEFAULT_BRANCH
    branches: dict[str, str] = field(default_factory=dict)
    branch_bases: dict[str, str] = field(default_factory=dict)
    commits: dict[str, _Commit] = field(default_factory=dict)
    issues: list[RequirementIssue] = field(default_factory=list)
    merge_requests: dict[int, _MergeRequest] = field(default_factory=dict)
    pipelines_by_commit: dict[str, _Pipeline] = field(default_factory=dict)
    mr_seq: int = 0
    commit_seq: int = 0


class FakePlatform(DevOpsGateway):
    """Deterministic in-memory DevOps platform implementing the gateway."""

    backend_kind = "fake"

    def __init__(self, merge_eval_timeout: float = 60.0):
        self._projects: dict[str, _Project] = {}
        self._pipeline_seq = 0
        self._hang_budgets: dict[str, int] = {}
        self._merge_eval_timeout = merge_eval_timeout
        self._lock = threading.RLock()

    # -- project setup -------------------------------------------------------

    def seed_project(
        self,
        locator: str,
        tree: dict[str, str],
        issues: Sequence[RequirementIssue] = (),
    ) -> ProjectRef:
        """Register a project with an initial tree and issues (test/setup aid)."""
        with self._lock:
            if locator in self._projects:
                raise NameCollisionError(f"project {locator!r} already exists")
            project = _Project(locator=locator)
            self._projects[locator] = project
            self._record_commit(project, project.default_branch, dict(tree), "initial import", parent=None)
            project.issues = [replace(i, acceptance_criteria=list(i.acceptance_criteria), labels=set(i.labels)) for i in issues]
            return ProjectRef(backend_kind="fake", locator=locator)

    def load_baseline_dir(self, path: str | Path, locator: str | None = None) -> ProjectRef:
        """Load a baseline project from a directory with `repo/` (the file
        tree) and `issues.yaml` (list of requirement issues)."""
        base = Path(path)
        repo_dir = base / "repo"
        if not repo_dir.is_dir():
            raise NotFoundError(f"baseline directory {base} has no repo/ subdirectory")
        tree: dict[str, str] = {}
        for file_path in sorted(repo_dir.rglob("*")):
            if file_path.is_file():
                tree[file_path.relative_to(repo_dir).as_posix()] = file_path.read_text(encoding="utf-8")
        issues = []
        issues_file = base / "issues.yaml"
        if issues_file.exists():
            raw = yaml.safe_load(issues_file.read_text(encoding="utf-8")) or []
            issues = [RequirementIssue.from_dict(d) for d in raw]
        return self.seed_project(locator or base.name, tree, issues)

    # -- gateway operations ---------------------------------------------------

    def replicate_project(self, baseline: ProjectRef, clone_names: Sequence[str]) -> list[ProjectRef]:
        if not clone_names:
            return []
        if len(set(clone_names)) != len(clone_names):
            raise NameCollisionError("clone names must be unique")
        with self._lock:
            source = self._project(baseline)
            for name in clone_names:
                if name in self._projects:
                    raise NameCollisionError(f"project {name!r} already exists")
            tree = dict(source.commits[source.branches[source.default_branch]].tree)
            refs = []
            for name in clone_names:
                clone = _Project(locator=name)
                self._projects[name] = clone
                self._record_commit(clone, clone.default_branch, dict(tree),
                                    f"replicated from {source.locator}", parent=None)
                clone.issues = [
                    replace(
                        issue,
                        issue_id=new_id,
                        acceptance_criteria=list(issue.acceptance_criteria),
                        labels={l for l in issue.labels if not l.startswith(_ORIGIN_LABEL_PREFIX)}
                        | {f"{_ORIGIN_LABEL_PREFIX}{issue.issue_id}"},
                    )
                    for new_id, issue in enumerate(source.issues, start=1)
                ]
                refs.append(ProjectRef(backend_kind="fake", locator=name))
            return refs

    def get_default_branch(self, project: ProjectRef) -> str:
        with self._lock:
            return self._project(project).default_branch

    def create_branch(self, project: ProjectRef, branch: str) -> None:
        with self._lock:
            p = self._project(project)
            if branch in p.branches:
                raise NameCollisionError(f"branch {branch!r} already exists")
            head = p.branches[p.default_branch]
            p.branches[branch] = head
            p.branch_bases[branch] = head

    def get_branch_head(self, project: ProjectRef, branch: str) -> str:
        with self._lock:
            p = self._project(project)
            if branch not in p.branches:
                raise NotFoundError(f"branch {branch!r} not found")
            return p.branches[branch]

    def apply_commit(
        self, project: ProjectRef, branch: str, changes: Sequence[FileChange], message: str
    ) -> str:
        if not changes:
            raise EmptyCommitError("empty commit rejected")
        with self._lock:
            p = self._project(project)
            if branch not in p.branches:
                head = p.branches[p.default_branch]
                p.branches[branch] = head
                p.branch_bases[branch] = head
            parent = p.branches[branch]
            tree = dict(p.commits[parent].tree)
            seen_paths = set()
            for change in changes:
                self._validate_path(change.path)
                if change.path in seen_paths:
                    raise GatewayError(f"duplicate path in commit: {change.path}")
                seen_paths.add(change.path)
                if change.content is None:
                    if change.path not in tree:
                        raise NotFoundError(f"cannot delete missing path {change.path}")
                    del tree[change.path]
                else:
                    tree[change.path] = change.content
            return self._record_commit(p, branch, tree, message, parent=parent)

    def await_pipeline(self, project: ProjectRef, commit_id: str, timeout: float) -> PipelineResult:
        with self._lock:
            p = self._project(project)
            if commit_id not in p.commits:
                raise NotFoundError(f"commit {commit_id!r} not found")
            pipeline = p.pipelines_by_commit[commit_id]
            if pipeline.result is None:
                self._evaluate_pipeline(p, pipeline, timeout)
            return pipeline.result

    def open_merge_request(self, project: ProjectRef, source_branch: str, title: str) -> MergeRequestRef:
        with self._lock:
            p = self._project(project)
            if source_branch not in p.branches:
                raise NotFoundError(f"branch {source_branch!r} not found")
            p.mr_seq += 1
            mr = _MergeRequest(mr_id=p.mr_seq, source_branch=source_branch, title=title)
            p.merge_requests[mr.mr_id] = mr
            return MergeRequestRef(mr_id=mr.mr_id, source_branch=source_branch, state="open")

    def merge(self, project: ProjectRef, mr: MergeRequestRef) -> MergeAttempt:
        with self._lock:
            p = self._project(project)
            stored = p.merge_requests.get(mr.mr_id)
            if stored is None:
                raise NotFoundError(f"merge request !{mr.mr_id} not found")
            ref = MergeRequestRef(mr_id=stored.mr_id, source_branch=stored.source_branch, state=stored.state)
            if stored.state != "open":
                return MergeAttempt(merged=False, mr=ref, reason="merge request not open")

            head = p.branches[stored.source_branch]
            pipeline = p.pipelines_by_commit.get(head)
            if pipeline is not None and pipeline.result is None:
                self._evaluate_pipeline(p, pipeline, self._merge_eval_timeout)
            if pipeline is None or pipeline.result.overall_status != "success":
                return MergeAttempt(merged=False, mr=ref, reason="pipeline not green")

            base_commit = p.branch_bases.get(stored.source_branch)
            base_tree = p.commits[base_commit].tree if base_commit else {}
            ours_tree = p.commits[p.branches[p.default_branch]].tree
            theirs_tree = p.commits[head].tree
            merged_tree, conflicts = _merge_trees(base_tree, ours_tree, theirs_tree)
            if conflicts:
                return MergeAttempt(merged=False, mr=ref, reason="merge conflict", conflict_paths=conflicts)

            merge_commit = self._record_commit(
                p, p.default_branch, merged_tree,
                f"Merge branch '{stored.source_branch}'",
                parent=p.branches[p.default_branch],
            )
            stored.state = "merged"
            return MergeAttempt(
                merged=True,
                mr=MergeRequestRef(mr_id=stored.mr_id, source_branch=stored.source_branch, state="merged"),
                merge_commit=merge_commit,
            )

    def read_tree(self, project: ProjectRef, ref: str | None = None) -> list[str]:
        with self._lock:
            return sorted(self._tree_at(self._project(project), ref))

    def read_file(self, project: ProjectRef, path: str, ref: str | None = None) -> str:
        with self._lock:
            tree = self._tree_at(self._project(project), ref)
            if path not in tree:
                raise NotFoundError(f"path {path!r} not found")
            return tree[path]

    def read_issues(self, project: ProjectRef) -> list[RequirementIssue]:
        with self._lock:
            p = self._project(project)
            return [
                replace(i, acceptance_criteria=list(i.acceptance_criteria), labels=set(i.labels))
                for i in sorted(p.issues, key=lambda i: i.issue_id)
            ]

    def update_issue(self, project: ProjectRef, issue: RequirementIssue) -> None:
        with self._lock:
            p = self._project(project)
            for i, existing in enumerate(p.issues):
                if existing.issue_id == issue.issue_id:
                    p.issues[i] = replace(
                        issue,
                        acceptance_criteria=list(issue.acceptance_criteria),
                        labels=set(issue.labels),
                    )
                    return
            raise NotFoundError(f"issue {issue.issue_id} not found")

    # -- test/debug helpers ----------------------------------------------------

    def project_names(self) -> list[str]:
        with self._lock:
            return sorted(self._projects)

    def pipeline_artifacts(self, project: ProjectRef, commit_id: str) -> tuple[str | None, str | None]:
        with self._lock:
            pipeline = self._project(project).pipelines_by_commit.get(commit_id)
            if pipeline is None:
                raise NotFoundError(f"no pipeline for commit {commit_id!r}")
            return pipeline.junit_xml, pipeline.jacoco_xml

    # -- internals --------------------------------------------------------------

    def _project(self, ref: ProjectRef) -> _Project:
        project = self._projects.get(ref.locator)
        if project is None:
            raise NotFoundError(f"project {ref.locator!r} not found")
        return project

    @staticmethod
    def _validate_path(path: str) -> None:
        if not path or path.startswith("/") or path.endswith("/") or ".." in path.split("/"):
            raise GatewayError(f"invalid path {path!r}")

    def _tree_at(self, project: _Project, ref: str | None) -> dict[str, str]:
        if ref is None:
            ref = project.default_branch
        commit_id = project.branches.get(ref, ref)
        commit = project.commits.get(commit_id)
        if commit is None:
            raise NotFoundError(f"ref {ref!r} not found")
        return commit.tree

    def _record_commit(
        self, project: _Project, branch: str, tree: dict[str, str], message: str, parent: str | None
    ) -> str:
        project.commit_seq += 1
        digest = hashlib.sha1()
        digest.update(f"{project.locator}:{branch}:{project.commit_seq}:{message}".encode())
        for path in sorted(tree):
            digest.update(path.encode())
            digest.update(hashlib.sha1(tree[path].encode()).digest())
        commit_id = digest.hexdigest()[:12]
        project.commits[commit_id] = _Commit(commit_id, branch, parent, message, tree)
        project.branches[branch] = commit_id
        self._pipeline_seq += 1
        project.pipelines_by_commit[commit_id] = _Pipeline(self._pipeline_seq, commit_id)
        return commit_id

    def _evaluate_pipeline(self, project: _Project, pipeline: _Pipeline, timeout: float) -> None:
        tree = project.commits[pipeline.commit_id].tree
        descriptor = tree.get(DESCRIPTOR_PATH)
        if descriptor is None:
            pipeline.result = PipelineResult(
                pipeline_id=pipeline.pipeline_id,
                commit_ref=pipeline.commit_id,
                overall_status="error",
                jobs=[JobResult("pipeline-config", "error", f"missing {DESCRIPTOR_PATH}")],
                wall_time=0.0,
            )
            return
        try:
            spec = parse_pipeline_spec(descriptor)
        except (PipelineSpecError, ValueError) as exc:
            pipeline.result = PipelineResult(
                pipeline_id=pipeline.pipeline_id,
                commit_ref=pipeline.commit_id,
                overall_status="error",
                jobs=[JobResult("pipeline-config", "error", f"bad {DESCRIPTOR_PATH}: {exc}")],
                wall_time=0.0,
            )
            return

        jobs: list[JobResult] = []
        test_summary = None
        coverage = None
        stuck = False
        for check in spec.checks:
            if check.kind == "always-hang" or (check.kind == "hang-times" and self._consume_hang(check)):
                jobs.append(JobResult(check.name, "timeout", "no output before timeout"))
                stuck = True
                break  # later jobs never start: partial job data only
            if check.kind == "hang-times":
                jobs.append(JobResult(check.name, "success", "transient hang cleared"))
                continue
            if check.kind == "run-tests":
                cases = _run_declarative_tests(check.path, tree)
                junit_xml = _synthesize_junit(cases)
                jacoco_xml = _synthesize_jacoco(cases, tree, spec.src_prefixes)
                pipeline.junit_xml = junit_xml
                pipeline.jacoco_xml = jacoco_xml
                test_summary = parse_junit(junit_xml)
                coverage = parse_jacoco(jacoco_xml)
                ok = test_summary.failures == 0 and test_summary.errors == 0
                log_lines = [
                    f"{'PASS' if c.passed else 'FAIL'} {c.name}" + (f": {c.message}" if c.message else "")
                    for c in cases
                ]
                log_lines.append(
                    f"{test_summary.tests} tests, {test_summary.failures} failed, "
                    f"{test_summary.errors} errors; line coverage "
                    f"{coverage.lines_covered}/{coverage.lines_total}"
                )
                jobs.append(JobResult(check.name, "success" if ok else "failed", "\n".join(log_lines)))
                continue
            ok, log = _evaluate_predicate(check, tree)
            jobs.append(JobResult(check.name, "success" if ok else "failed", log))

        if stuck:
            overall = "stuck"
            wall_time = float(timeout)
        else:
            overall = "success" if all(j.status == "success" for j in jobs) else "failed"
            wall_time = float(len(jobs))
        pipeline.result = PipelineResult(
            pipeline_id=pipeline.pipeline_id,
            commit_ref=pipeline.commit_id,
            overall_status=overall,
            jobs=jobs,
            test_summary=test_summary,
            coverage=coverage,
            wall_time=wall_time,
        )

    def _consume_hang(self, check: PipelineCheck) -> bool:
        remaining = self._hang_budgets.setdefault(check.name, check.threshold)
        if remaining > 0:
            self._hang_budgets[check.name] = remaining - 1
            return True
        return False


# -- three-way merge -----------------------------------------------------------


def _merge_trees(
    base: dict[str, str], ours: dict[str, str], theirs: dict[str, str]
) -> tuple[dict[str, str], list[str]]:
    merged = dict(ours)
    conflicts = []
    for path in sorted(set(base) | set(ours) | set(theirs)):
        b, o, t = base.get(path), ours.get(path), theirs.get(path)
        if o == t or b == t:
            continue  # agree, or only ours changed
        if b == o:  # only theirs changed (edit or delete)
            if t is None:
                merged.pop(path, None)
            else:
                merged[path] = t
            continue
        if o is None or t is None:
            conflicts.append(path)  # delete vs edit
            continue
        merged_text, conflict = _merge_file(b or "", o, t)
        if conflict:
            conflicts.append(path)
        else:
            merged[path] = merged_text
    return merged, conflicts


def _side_edits(base_lines: list[str], side_lines: list[str]) -> list[tuple[int, int, list[str]]]:
    matcher = difflib.SequenceMatcher(a=base_lines, b=side_lines, autojunk=False)
    return [
        (i1, i2, side_lines[j1:j2])
        for tag, i1, i2, j1, j2 in matcher.get_opcodes()
        if tag != "equal"
    ]


def _edits_conflict(a: tuple[int, int, list[str]], b: tuple[int, int, list[str]]) -> bool:
    a1, a2, _ = a
    b1, b2, _ = b
    if a1 == a2 and b1 == b2:
        return a1 == b1  # two inserts at the same point are ambiguous
    return a1 < b2 and b1 < a2


def _merge_file(base: str, ours: str, theirs: str) -> tuple[str, bool]:
    base_lines = base.splitlines(keepends=True)
    our_edits = _side_edits(base_lines, ours.splitlines(keepends=True))
    their_edits = _side_edits(base_lines, theirs.splitlines(keepends=True))
    for a in our_edits:
        for b in their_edits:
            if _edits_conflict(a, b):
                return "", True
    merged = list(base_lines)
    for i1, i2, replacement in sorted(our_edits + their_edits, key=lambda e: e[0], reverse=True):
        merged[i1:i2] = replacement
    return "".join(merged), False


def tree_digest(gateway: DevOpsGateway, project: ProjectRef, ref: str | None = None) -> str:
    """Content hash of a project tree; equal digests mean identical trees."""
    digest = hashlib.sha256()
    for path in gateway.read_tree(project, ref):
        digest.update(path.encode())
        digest.update(b"\0")
        digest.update(gateway.read_file(project, path, ref).encode())
        digest.update(b"\0")
    return digest.hexdigest()
