"""Uniform interface to a DevOps platform with live (GitLab) and fake backends."""

from sesl.gateway.types import (
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
from sesl.gateway.base import DevOpsGateway

__all__ = [
    "DevOpsGateway",
    "FileChange",
    "GatewayError",
    "JobResult",
    "MergeAttempt",
    "MergeRequestRef",
    "NameCollisionError",
    "NotFoundError",
    "PipelineResult",
    "PlatformError",
    "ProjectRef",
    "RequirementIssue",
]
