"""GitLab REST (API v4) implementation of the DevOps gateway.

Replication creates a blank project and pushes a mirror of the baseline's
default branch through the commits API, then copies issues one by one (a
platform fork would link the projects and pollute metrics). Issues carry the
requirement structure inside the description body using fixed section
headers, so the same RequirementIssue round-trips through the platform.

Pipeline waits poll at a fixed interval with seed-derived jitter, bounded by
the caller's timeout; transient transport errors are retried with backoff.
Authentication comes from the GITLAB_TOKEN environment variable only.
"""

from __future__ import annotations

import os
import random
import re
import time
from typing import Sequence
from urllib.parse import quote

import requests

from sesl.ci_reports import CoverageSummary, NoCoverageData, ReportParseError, TestSummary, parse_jacoco
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
    PlatformError,
    ProjectRef,
    RequirementIssue,
)


def _rejected(path: str, response) -> PlatformError:
    detail = ""
    try:
        detail = str(response.json().get("message", ""))[:200]
    except ValueError:
        pass
    return PlatformError(
        f"{path}: HTTP {response.status_code} {detail}".strip(),
        status=response.status_code,
        retryable=response.status_code in (429,),
    )

GITLAB_URL_ENV = "SESL_GITLAB_URL"
GITLAB_TOKEN_ENV = "GITLAB_TOKEN"

_USER_STORY_HEADER = "## User story"
_DESCRIPTION_HEADER = "## Description"
_CRITERIA_HEADER = "## Acceptance criteria"

# Default artifact path for line coverage, relative to the job that produced it.
JACOCO_ARTIFACT_PATH = "target/site/jacoco/jacoco.xml"


def encode_issue_body(issue: RequirementIssue) -> str:
    criteria = "\n".join(f"1. {c}" for c in issue.acceptance_criteria)
    return (
        f"{_USER_STORY_HEADER}\n{issue.user_story}\n\n"
        f"{_DESCRIPTION_HEADER}\n{issue.description}\n\n"
        f"{_CRITERIA_HEADER}\n{criteria}\n"
    )


def decode_issue_body(body: str) -> tuple[str, str, list[str]]:
    def section(header: str) -> str:
        match = re.search(rf"^{re.escape(header)}\n(.*?)(?=^## |\Z)", body, re.DOTALL | re.MULTILINE)
        return match.group(1).strip() if match else ""

    user_story = section(_USER_STORY_HEADER)
    description = section(_DESCRIPTION_HEADER)
    criteria_block = section(_CRITERIA_HEADER)
    criteria = [
        re.sub(r"^\s*(?:\d+\.|[-*])\s*", "", line).strip()
        for line in criteria_block.splitlines()
        if line.strip()
    ]
    if not user_story and not description and not criteria:
        return "", body.strip(), []
    return user_story, description, criteria


class GitLabGateway(DevOpsGateway):
    backend_kind = "live"

    def __init__(
        self,
        base_url: str | None = None,
        token: str | None = None,
        session: requests.Session | None = None,
        poll_interval: float = 5.0,
        seed: int = 0,
        max_retries: int = 3,
        request_timeout: float = 60.0,
        sleep=time.sleep,
        clock=time.monotonic,
    ):
        base_url = base_url or os.environ.get(GITLAB_URL_ENV, "")
        if not base_url:
            raise GatewayError(f"GitLab URL missing: set {GITLAB_URL_ENV} or pass base_url")
        self.base_url = base_url.rstrip("/")
        self.token = token if token is not None else os.environ.get(GITLAB_TOKEN_ENV, "")
        self.session = session or requests.Session()
        self.poll_interval = poll_interval
        self.max_retries = max_retries
        self.request_timeout = request_timeout
        self._sleep = sleep
        self._clock = clock
        self._jitter = random.Random(seed)
        self._default_branches: dict[str, str] = {}

    # -- HTTP plumbing ----------------------------------------------------------

    def _request(self, method: str, path: str, *, params=None, json_body=None, raw=False):
        url = f"{self.base_url}/api/v4/{path.lstrip('/')}"
        headers = {}
        if self.token:
            headers["Private-Token"] = self.token
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(min(2.0 ** attempt, 30.0))
            try:
                response = self.session.request(
                    method, url, params=params, json=json_body, headers=headers,
                    timeout=self.request_timeout,
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if response.status_code >= 500:
                last_error = f"HTTP {response.status_code}"
                continue
            return response
        raise PlatformError(
            f"{url}: unreachable after {self.max_retries + 1} attempts ({last_error})", retryable=True
        )

    def _json(self, method: str, path: str, *, params=None, json_body=None, ok=(200, 201)):
        response = self._request(method, path, params=params, json_body=json_body)
        if response.status_code == 404:
            raise NotFoundError(f"{path}: not found")
        if response.status_code not in ok:
            raise _rejected(path, response)
        try:
            return response.json()
        except ValueError as exc:
            raise GatewayError(f"{path}: non-JSON response") from exc

    def _paginated(self, path: str, params: dict) -> list:
        items = []
        page = 1
        while True:
            batch = self._json("GET", path, params={**params, "per_page": 100, "page": page})
            if not isinstance(batch, list):
                raise GatewayError(f"{path}: expected a list")
            items.extend(batch)
            if len(batch) < 100:
                return items
            page += 1

    @staticmethod
    def _encode_project(locator: str) -> str:
        return quote(locator, safe="")

    # -- gateway operations ---------------------------------------------------------

    def get_default_branch(self, project: ProjectRef) -> str:
        if project.locator not in self._default_branches:
            info = self._json("GET", f"projects/{self._encode_project(project.locator)}")
            self._default_branches[project.locator] = info.get("default_branch") or "main"
        return self._default_branches[project.locator]

    def replicate_project(self, baseline: ProjectRef, clone_names: Sequence[str]) -> list[ProjectRef]:
        if not clone_names:
            return []
        if len(set(clone_names)) != len(clone_names):
            raise NameCollisionError("clone names must be unique")
        default_branch = self.get_default_branch(baseline)
        tree_paths = self.read_tree(baseline)
        files = {path: self.read_file(baseline, path) for path in tree_paths}
        issues = self.read_issues(baseline)

        refs = []
        for name in clone_names:
            try:
                created = self._json(
                    "POST", "projects",
                    json_body={
                        "name": name,
                        "path": name,
                        "default_branch": default_branch,
                        "initialize_with_readme": False,
                        "visibility": "private",
                    },
                    ok=(201,),
                )
            except PlatformError as exc:
                if exc.status == 400:
                    raise NameCollisionError(f"project {name!r} could not be created: {exc}") from exc
                raise
            locator = created.get("path_with_namespace") or str(created["id"])
            clone_ref = ProjectRef(backend_kind="live", locator=locator)
            self._default_branches[locator] = default_branch
            actions = [
                {"action": "create", "file_path": path, "content": content}
                for path, content in sorted(files.items())
            ]
            self._json(
                "POST", f"projects/{self._encode_project(locator)}/repository/commits",
                json_body={
                    "branch": default_branch,
                    "commit_message": f"replicated from {baseline.locator}",
                    "actions": actions,
                },
                ok=(201,),
            )
            for new_id, issue in enumerate(issues, start=1):
                labels = {l for l in issue.labels if not l.startswith("origin-issue:")}
                labels.add(f"origin-issue:{issue.issue_id}")
                self._json(
                    "POST", f"projects/{self._encode_project(locator)}/issues",
                    json_body={
                        "title": issue.title,
                        "description": encode_issue_body(issue),
                        "labels": ",".join(sorted(labels)),
                    },
                    ok=(201,),
                )
            refs.append(clone_ref)
        return refs

    def create_branch(self, project: ProjectRef, branch: str) -> None:
        self._json(
            "POST", f"projects/{self._encode_project(project.locator)}/repository/branches",
            params={"branch": branch, "ref": self.get_default_branch(project)},
            ok=(201,),
        )

    def get_branch_head(self, project: ProjectRef, branch: str) -> str:
        info = self._json(
            "GET", f"projects/{self._encode_project(project.locator)}/repository/branches/{quote(branch, safe='')}"
        )
        return info["commit"]["id"]

    def apply_commit(
        self, project: ProjectRef, branch: str, changes: Sequence[FileChange], message: str
    ) -> str:
        if not changes:
            raise EmptyCommitError("empty commit rejected")
        project_id = self._encode_project(project.locator)
        try:
            existing = set(self.read_tree(project, ref=branch))
            start_branch = None
        except NotFoundError:
            existing = set(self.read_tree(project))
            start_branch = self.get_default_branch(project)
        actions = []
        for change in changes:
            if change.content is None:
                if change.path not in existing:
                    raise NotFoundError(f"cannot delete missing path {change.path}")
                actions.append({"action": "delete", "file_path": change.path})
            else:
                action = "update" if change.path in existing else "create"
                actions.append({"action": action, "file_path": change.path, "content": change.content})
        body = {"branch": branch, "commit_message": message, "actions": actions}
        if start_branch:
            body["start_branch"] = start_branch
        commit = self._json("POST", f"projects/{project_id}/repository/commits", json_body=body, ok=(201,))
        return commit["id"]

    def await_pipeline(self, project: ProjectRef, commit_id: str, timeout: float) -> PipelineResult:
        project_id = self._encode_project(project.locator)
        deadline = self._clock() + timeout
        pipeline = None
        while self._clock() < deadline:
            pipelines = self._json("GET", f"projects/{project_id}/pipelines", params={"sha": commit_id})
            pipeline = pipelines[0] if pipelines else None
            if pipeline and pipeline.get("status") in ("success", "failed", "canceled", "skipped"):
                break
            self._sleep(self.poll_interval + self._jitter.uniform(0, self.poll_interval / 4))
        if pipeline is None:
            return PipelineResult(
                pipeline_id=0, commit_ref=commit_id, overall_status="stuck",
                jobs=[], wall_time=timeout,
            )
        status = pipeline.get("status")
        jobs = self._fetch_jobs(project_id, pipeline["id"])
        if status == "success":
            overall = "success"
        elif status == "failed":
            overall = "failed"
        elif status in ("canceled", "skipped"):
            overall = "error"
        else:
            overall = "stuck"  # still pending/running at the deadline
        test_summary = self._fetch_test_summary(project_id, pipeline["id"])
        coverage = self._fetch_coverage(project_id, jobs)
        return PipelineResult(
            pipeline_id=int(pipeline["id"]),
            commit_ref=commit_id,
            overall_status=overall,
            jobs=[j for j, _ in jobs],
            test_summary=test_summary,
            coverage=coverage,
            wall_time=float(pipeline.get("duration") or 0.0),
        )

    def _fetch_jobs(self, project_id: str, pipeline_id: int) -> list[tuple[JobResult, int]]:
        raw_jobs = self._json("GET", f"projects/{project_id}/pipelines/{pipeline_id}/jobs")
        results = []
        for job in raw_jobs:
            status_map = {"success": "success", "failed": "failed", "canceled": "error", "skipped": "error"}
            status = status_map.get(job.get("status"), "timeout")
            trace = ""
            response = self._request("GET", f"projects/{project_id}/jobs/{job['id']}/trace")
            if response.status_code == 200:
                trace = response.text
            results.append((JobResult(name=job.get("name", "job"), status=status, log=trace), int(job["id"])))
        return results

    def _fetch_test_summary(self, project_id: str, pipeline_id: int) -> TestSummary | None:
        response = self._request("GET", f"projects/{project_id}/pipelines/{pipeline_id}/test_report")
        if response.status_code != 200:
            return None
        try:
            report = response.json()
        except ValueError:
            return None
        total = report.get("total_count", 0)
        if not total:
            return None
        failing = [
            case.get("name", "<unnamed>")
            for suite in report.get("test_suites", [])
            for case in suite.get("test_cases", [])
            if case.get("status") in ("failed", "error")
        ]
        return TestSummary(
            tests=int(total),
            failures=int(report.get("failed_count", 0)),
            errors=int(report.get("error_count", 0)),
            skipped=int(report.get("skipped_count", 0)),
            failing_case_names=failing,
        )

    def _fetch_coverage(self, project_id: str, jobs: list[tuple[JobResult, int]]) -> CoverageSummary | None:
        for _, job_id in jobs:
            response = self._request(
                "GET",
                f"projects/{project_id}/jobs/{job_id}/artifacts/{quote(JACOCO_ARTIFACT_PATH, safe='/')}",
            )
            if response.status_code == 200:
                try:
                    return parse_jacoco(response.text)
                except (ReportParseError, NoCoverageData):
                    continue
        return None

    def open_merge_request(self, project: ProjectRef, source_branch: str, title: str) -> MergeRequestRef:
        mr = self._json(
            "POST", f"projects/{self._encode_project(project.locator)}/merge_requests",
            json_body={
                "source_branch": source_branch,
                "target_branch": self.get_default_branch(project),
                "title": title,
            },
            ok=(201,),
        )
        return MergeRequestRef(mr_id=int(mr["iid"]), source_branch=source_branch, state="open")

    def merge(self, project: ProjectRef, mr: MergeRequestRef) -> MergeAttempt:
        project_id = self._encode_project(project.locator)
        head = self.get_branch_head(project, mr.source_branch)
        pipelines = self._json("GET", f"projects/{project_id}/pipelines", params={"sha": head})
        latest = pipelines[0] if pipelines else None
        if latest is None or latest.get("status") != "success":
            return MergeAttempt(merged=False, mr=mr, reason="pipeline not green")
        response = self._request("PUT", f"projects/{project_id}/merge_requests/{mr.mr_id}/merge")
        if response.status_code == 200:
            merged = MergeRequestRef(mr_id=mr.mr_id, source_branch=mr.source_branch, state="merged")
            sha = None
            try:
                sha = response.json().get("merge_commit_sha")
            except ValueError:
                pass
            return MergeAttempt(merged=True, mr=merged, merge_commit=sha)
        if response.status_code in (405, 406, 409, 422):
            # GitLab does not enumerate conflicting paths over the API.
            return MergeAttempt(merged=False, mr=mr, reason="merge conflict")
        raise _rejected(f"merge_requests/{mr.mr_id}/merge", response)

    def read_tree(self, project: ProjectRef, ref: str | None = None) -> list[str]:
        params = {"recursive": True}
        params["ref"] = ref or self.get_default_branch(project)
        items = self._paginated(
            f"projects/{self._encode_project(project.locator)}/repository/tree", params
        )
        return sorted(item["path"] for item in items if item.get("type") == "blob")

    def read_file(self, project: ProjectRef, path: str, ref: str | None = None) -> str:
        response = self._request(
            "GET",
            f"projects/{self._encode_project(project.locator)}/repository/files/{quote(path, safe='')}/raw",
            params={"ref": ref or self.get_default_branch(project)},
        )
        if response.status_code == 404:
            raise NotFoundError(f"path {path!r} not found")
        if response.status_code != 200:
            raise _rejected(path, response)
        return response.text

    def read_issues(self, project: ProjectRef) -> list[RequirementIssue]:
        raw = self._paginated(
            f"projects/{self._encode_project(project.locator)}/issues",
            {"sort": "asc", "order_by": "created_at"},
        )
        issues = []
        for item in raw:
            user_story, description, criteria = decode_issue_body(item.get("description") or "")
            issues.append(
                RequirementIssue(
                    issue_id=int(item["iid"]),
                    title=item.get("title", ""),
                    user_story=user_story,
                    description=description,
                    acceptance_criteria=criteria,
                    labels=set(item.get("labels", [])),
                )
            )
        return sorted(issues, key=lambda i: i.issue_id)

    def update_issue(self, project: ProjectRef, issue: RequirementIssue) -> None:
        self._json(
            "PUT",
            f"projects/{self._encode_project(project.locator)}/issues/{issue.issue_id}",
            json_body={
                "title": issue.title,
                "description": encode_issue_body(issue),
                "labels": ",".join(sorted(issue.labels)),
            },
        )
