"""sesl: a software-engineering simulation lab.

Replays iterative DevOps development with role-based agents on cloned
projects, injects requirements-quality defects into one experiment arm,
and aggregates pipeline-derived metrics from the run ledger.
"""

__version__ = "0.1.0"
