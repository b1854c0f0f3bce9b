"""Command-line entry point: validate, run, report, inject.

Exit codes are stable: 0 success, 1 validation/config error, 2
platform/backend error before any clone starts, 3 experiment completed with
at least one failed clone. Progress output is line-oriented and greppable so
long live runs can be tailed. Secrets come from the environment only; the
startup check reports which backends are configured without printing values.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
from pathlib import Path

import yaml

from sesl import __version__
from sesl.agents.backends import (
    LLM_API_KEY_ENV,
    BackendError,
    OpenAiChatBackend,
    ScriptedBackend,
)
from sesl.agents.playbook import PlaybookError, load_playbook
from sesl.defects import DefectError, DefectProfile, inject
from sesl.gateway.fake import FakePlatform
from sesl.gateway.gitlab import GITLAB_TOKEN_ENV, GITLAB_URL_ENV, GitLabGateway
from sesl.gateway.types import GatewayError, ProjectRef, RequirementIssue
from sesl.ledger import LedgerError, read_ledger
from sesl.manifest import ManifestError, load_manifest, planned_clone_ids
from sesl.metrics import write_reports
from sesl.orchestrator import ExperimentRunner

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PLATFORM = 2
EXIT_CLONE_FAILURES = 3

GOOD_STATUSES = ("completed", "retried_then_completed")


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sesl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sesl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="validate a manifest and list planned clones")
    p_validate.add_argument("manifest", help="path to the manifest file")

    p_run = sub.add_parser("run", help="run the experiment described by a manifest")
    p_run.add_argument("manifest", help="path to the manifest file")
    p_run.add_argument("--backend", choices=("fake", "live"), default="fake",
                       help="DevOps backend (default: fake)")
    p_run.add_argument("--playbook", help="playbook file for the scripted LLM backend")
    p_run.add_argument("--out", help="experiment output directory (default: runs/<experiment_id>)")
    p_run.add_argument("--resume", action="store_true", help="skip clones already in the ledger")
    p_run.add_argument("--dry-run", action="store_true",
                       help="replicate and inject only; run no agents")
    p_run.add_argument("--force", action="store_true",
                       help="overwrite an existing ledger instead of refusing")
    p_run.add_argument("--gitlab-url", help=f"GitLab base URL (default: ${GITLAB_URL_ENV})")

    p_report = sub.add_parser("report", help="render report.md and CSV tables from a ledger")
    p_report.add_argument("out_dir", help="experiment output directory containing ledger.jsonl")

    p_inject = sub.add_parser("inject", help="inject requirement defects into issues")
    p_inject.add_argument("--profile", required=True, help="defect profile YAML file")
    p_inject.add_argument("--issues", help="issues YAML file (file mode)")
    p_inject.add_argument("--out", help="output YAML for defective issues (file mode)")
    p_inject.add_argument("--project", help="live project locator (project mode)")
    p_inject.add_argument("--gitlab-url", help=f"GitLab base URL (default: ${GITLAB_URL_ENV})")
    p_inject.add_argument("--log", required=True, help="output path for the defect log JSON")
    return parser


def cmd_validate(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    print(f"manifest ok: {manifest.experiment_id}")
    for _, _, name in planned_clone_ids(manifest):
        print(name)
    return EXIT_OK


def _build_gateway(args, manifest, manifest_dir: Path):
    if args.backend == "fake":
        platform = FakePlatform(merge_eval_timeout=manifest.max_pipeline_wait)
        refs = {}
        for baseline in manifest.baselines:
            path = Path(baseline.project_ref)
            if not path.is_absolute():
                path = manifest_dir / path  # baseline dirs resolve against the manifest
            if not path.is_dir():
                raise ManifestError(
                    f"baselines[{baseline.baseline_id}].project_ref: {baseline.project_ref!r} "
                    "is not a baseline directory (fake backend expects repo/ + issues.yaml)"
                )
            refs[baseline.baseline_id] = platform.load_baseline_dir(
                path, locator=f"baseline-{baseline.baseline_id}"
            )
        print("devops backend: fake (in-process)")
        return platform, refs
    gateway = GitLabGateway(base_url=args.gitlab_url or None, seed=manifest.seed)
    token_state = "set" if os.environ.get(GITLAB_TOKEN_ENV) else "MISSING"
    print(f"devops backend: gitlab at {gateway.base_url} (token: {token_state})")
    refs = {
        b.baseline_id: ProjectRef(backend_kind="live", locator=b.project_ref)
        for b in manifest.baselines
    }
    return gateway, refs


def _build_llm_backend(args, manifest):
    if manifest.llm.endpoint == "scripted":
        if not args.playbook:
            raise ManifestError("llm.endpoint is 'scripted': --playbook is required")
        playbook = load_playbook(args.playbook)
        print(f"llm backend: scripted playbook {args.playbook}")
        return ScriptedBackend(playbook)
    backend = OpenAiChatBackend(model=manifest.llm.model, temperature=manifest.llm.temperature)
    key_state = "set" if os.environ.get(LLM_API_KEY_ENV) else "MISSING"
    print(f"llm backend: live chat-completions at {backend.base_url} "
          f"(model {manifest.llm.model}, api key: {key_state})")
    return backend


def cmd_run(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        _err(str(exc))
        return EXIT_CONFIG

    out_dir = Path(args.out) if args.out else Path("runs") / manifest.experiment_id
    ledger_path = out_dir / "ledger.jsonl"
    if ledger_path.exists() and not args.resume:
        if not args.force:
            _err(f"ledger already exists at {ledger_path}; pass --resume to continue it "
                 "or --force to overwrite")
            return EXIT_CONFIG
        ledger_path.unlink()

    try:
        gateway, baseline_refs = _build_gateway(args, manifest, Path(args.manifest).resolve().parent)
        backend = _build_llm_backend(args, manifest)
    except (ManifestError, PlaybookError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except GatewayError as exc:
        _err(str(exc))
        return EXIT_PLATFORM

    stop_event = threading.Event()

    def handle_signal(signum, frame):
        print(f"signal {signum}: finishing current step, flushing ledger", file=sys.stderr)
        stop_event.set()

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, handle_signal)

    def progress(clone, issue_id, role, cycle, status):
        req = issue_id if issue_id is not None else "-"
        print(f"step clone={clone} req={req} role={role} cycle={cycle} pipeline={status}", flush=True)

    runner = ExperimentRunner(
        manifest, gateway, backend, baseline_refs, out_dir,
        progress=progress, stop_event=stop_event,
    )
    try:
        runs = runner.run(resume=args.resume, dry_run=args.dry_run)
    except (GatewayError, BackendError) as exc:
        _err(f"backend failure before clones could run: {exc}")
        return EXIT_PLATFORM
    except LedgerError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)

    print(f"ledger: {runner.ledger_path}")
    if args.dry_run:
        print("dry run: clones replicated and injected, no agents executed")
        return EXIT_OK
    failed = [r for r in runs if r.status not in GOOD_STATUSES]
    for run in runs:
        print(f"clone {run.clone_name}: {run.status} "
              f"(attempt {run.attempt}, merged {sum(o.merged for o in run.outcomes)}/{len(run.outcomes)})")
    if stop_event.is_set() or failed:
        return EXIT_CLONE_FAILURES
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.out_dir)
    try:
        records = read_ledger(out_dir / "ledger.jsonl")
    except LedgerError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    for path in write_reports(records, out_dir):
        print(f"wrote {path}")
    return EXIT_OK


def _load_profile(path: str) -> DefectProfile:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    return DefectProfile.from_dict(data)


def cmd_inject(args) -> int:
    try:
        profile = _load_profile(args.profile)
    except (OSError, DefectError, yaml.YAMLError) as exc:
        _err(f"profile: {exc}")
        return EXIT_CONFIG

    if bool(args.issues) == bool(args.project):
        _err("pass exactly one of --issues (file mode) or --project (live mode)")
        return EXIT_CONFIG

    logs = []
    if args.issues:
        if not args.out:
            _err("file mode needs --out for the defective issues")
            return EXIT_CONFIG
        try:
            raw = yaml.safe_load(Path(args.issues).read_text(encoding="utf-8")) or []
            issues = [RequirementIssue.from_dict(d) for d in raw]
        except (OSError, yaml.YAMLError, ValueError, KeyError) as exc:
            _err(f"issues: {exc}")
            return EXIT_CONFIG
        defective_all = []
        for issue in issues:
            defective, log = inject(issue, profile)
            defective_all.append(defective.to_dict())
            logs.append(log.to_dict())
        Path(args.out).write_text(yaml.safe_dump(defective_all, sort_keys=False), encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        try:
            gateway = GitLabGateway(base_url=args.gitlab_url or None)
            project = ProjectRef(backend_kind="live", locator=args.project)
            for issue in gateway.read_issues(project):
                defective, log = inject(issue, profile)
                gateway.update_issue(project, defective)
                logs.append(log.to_dict())
        except GatewayError as exc:
            _err(str(exc))
            return EXIT_PLATFORM
        print(f"updated {len(logs)} issues in {args.project}")

    Path(args.log).write_text(json.dumps(logs, indent=2, sort_keys=True), encoding="utf-8")
    print(f"wrote {args.log}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "validate": cmd_validate,
        "run": cmd_run,
        "report": cmd_report,
        "inject": cmd_inject,
    }
    try:
        return handlers[args.command](args)
    except DefectError as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
