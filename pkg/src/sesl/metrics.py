"""Ledger analysis: success rates, coverage means, A/B deltas, cost, runtime, CO2.

All percentages and means are computed with exact rational/decimal
arithmetic and are permutation-invariant over record order. Display values
round half-up; machine outputs (CSV) keep the raw decimals. Coverage means
are unweighted over the requirement outcomes that carry coverage; the count
of included outcomes is reported so readers can re-weight.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

from sesl.orchestrator import CloneRun

_MILLION = Decimal(1_000_000)

COMPLETED_STATUSES = ("completed", "retried_then_completed")


class MetricsError(ValueError):
    pass


def cost(input_tokens: int, output_tokens: int, in_rate, out_rate) -> Decimal:
    """Exact linear token cost: tokens x rate-per-million, decimal arithmetic."""
    in_rate = Decimal(str(in_rate))
    out_rate = Decimal(str(out_rate))
    if in_rate < 0 or out_rate < 0:
        raise MetricsError("rates must be non-negative")
    if input_tokens < 0 or output_tokens < 0:
        raise MetricsError("token counts must be non-negative")
    return (Decimal(input_tokens) * in_rate + Decimal(output_tokens) * out_rate) / _MILLION


def co2(total_tokens: int, co2_factor) -> Decimal:
    """Exact linear CO2 estimate: tokens x kg-per-token."""
    factor = Decimal(str(co2_factor))
    if factor < 0:
        raise MetricsError("co2 factor must be non-negative")
    if total_tokens < 0:
        raise MetricsError("token count must be non-negative")
    return Decimal(total_tokens) * factor


def round_half_up(value: Fraction | Decimal | float, places: int = 0) -> Decimal:
    if isinstance(value, Fraction):
        value = Decimal(value.numerator) / Decimal(value.denominator)
    elif isinstance(value, float):
        value = Decimal(str(value))
    quantum = Decimal(1).scaleb(-places)
    return value.quantize(quantum, rounding=ROUND_HALF_UP)


@dataclass
class GroupSummary:
    group: str
    n_clones: int = 0
    n_requirements: int = 0
    merged_count: int = 0
    all_tests_passed_count: int = 0
    coverage_n: int = 0
    mean_line_coverage_pct: float | None = None
    mean_wall_time_per_clone: float = 0.0
    input_tokens_total: int = 0
    output_tokens_total: int = 0
    cost_per_clone: Decimal = Decimal(0)
    co2_total_kg: Decimal = Decimal(0)
    pipeline_anomaly_count: int = 0

    @property
    def merged_pct(self) -> float:
        return float(self._merged_fraction() * 100)

    @property
    def all_tests_passed_pct(self) -> float:
        return float(self._tests_fraction() * 100)

    @property
    def merged_pct_display(self) -> int:
        return int(round_half_up(self._merged_fraction() * 100))

    @property
    def all_tests_passed_pct_display(self) -> int:
        return int(round_half_up(self._tests_fraction() * 100))

    @property
    def input_tokens_per_clone(self) -> float:
        return self.input_tokens_total / self.n_clones if self.n_clones else 0.0

    @property
    def output_tokens_per_clone(self) -> float:
        return self.output_tokens_total / self.n_clones if self.n_clones else 0.0

    def _merged_fraction(self) -> Fraction:
        return Fraction(self.merged_count, self.n_requirements) if self.n_requirements else Fraction(0)

    def _tests_fraction(self) -> Fraction:
        return Fraction(self.all_tests_passed_count, self.n_requirements) if self.n_requirements else Fraction(0)


@dataclass
class RequirementDelta:
    issue_id: int | None  # None = group-level row
    metric: str
    value_a: Decimal
    value_b: Decimal
    delta: Decimal  # value_a - value_b
    ratio: Decimal | None = None  # B / A where defined


@dataclass
class RuntimeStats:
    per_group_mean: dict[str, float] = field(default_factory=dict)
    overall_mean: float = 0.0
    experiment_total: float = 0.0


def clone_runs(records: list[dict]) -> list[CloneRun]:
    return [CloneRun.from_dict(r) for r in records if r.get("type") == "clone_run"]


def manifest_snapshot(records: list[dict]) -> dict:
    for record in records:
        if record.get("type") == "experiment_start":
            return record.get("manifest", {})
    return {}


def _rates(records: list[dict]) -> tuple[Decimal, Decimal, Decimal]:
    llm = manifest_snapshot(records).get("llm", {})
    return (
        Decimal(str(llm.get("in_rate", "0"))),
        Decimal(str(llm.get("out_rate", "0"))),
        Decimal(str(llm.get("co2_factor", "0"))),
    )


def _anomalies(outcome) -> int:
    return sum(1 for _, status in outcome.pipeline_events if status in ("stuck", "error"))


def _coverage_fraction(value: float) -> Fraction:
    # Via the shortest decimal repr, so clean fixture values stay exact.
    return Fraction(Decimal(str(value)))


def summarize(records: list[dict], group_by: str = "baseline") -> list[GroupSummary]:
    """Aggregate clone runs by baseline (or into one "overall" group)."""
    if group_by not in ("baseline", "overall"):
        raise MetricsError(f"group_by must be 'baseline' or 'overall', got {group_by!r}")
    runs = clone_runs(records)
    if not runs:
        return []
    in_rate, out_rate, co2_factor = _rates(records)

    groups: dict[str, list[CloneRun]] = {}
    for run in runs:
        key = "overall" if group_by == "overall" else run.baseline_id
        groups.setdefault(key, []).append(run)

    summaries = []
    for key in sorted(groups):
        members = groups[key]
        summary = GroupSummary(group=key, n_clones=len(members))
        coverage_values: list[Fraction] = []
        wall_times = []
        for run in members:
            wall_times.append(run.wall_time)
            for entry in run.token_ledger:
                summary.input_tokens_total += entry.input_tokens
                summary.output_tokens_total += entry.output_tokens
            for outcome in run.outcomes:
                summary.n_requirements += 1
                summary.merged_count += outcome.merged
                summary.all_tests_passed_count += outcome.all_tests_passed
                summary.pipeline_anomaly_count += _anomalies(outcome)
                if outcome.line_coverage is not None:
                    coverage_values.append(_coverage_fraction(outcome.line_coverage))
        summary.coverage_n = len(coverage_values)
        if coverage_values:
            mean = sum(coverage_values, Fraction(0)) / len(coverage_values) * 100
            summary.mean_line_coverage_pct = float(mean)
        summary.mean_wall_time_per_clone = sum(wall_times) / len(wall_times)
        total_cost = cost(summary.input_tokens_total, summary.output_tokens_total, in_rate, out_rate)
        summary.cost_per_clone = total_cost / len(members)
        summary.co2_total_kg = co2(summary.input_tokens_total + summary.output_tokens_total, co2_factor)
        summaries.append(summary)
    return summaries


def _fraction_to_decimal(value: Fraction) -> Decimal:
    return Decimal(value.numerator) / Decimal(value.denominator)


def compare(records: list[dict], baseline_a: str = "A", baseline_b: str = "B") -> list[RequirementDelta]:
    """Per-requirement and group-level A-vs-B deltas.

    Coverage and merged-rate deltas are in percentage points (A - B); the
    anomaly ratio is B / A and None when A has no anomalies.
    """
    runs = clone_runs(records)
    by_group: dict[str, list[CloneRun]] = {}
    for run in runs:
        by_group.setdefault(run.baseline_id, []).append(run)
    for wanted in (baseline_a, baseline_b):
        if wanted not in by_group:
            raise MetricsError(f"baseline {wanted!r} not present in ledger")

    def per_issue(group: str):
        coverage: dict[int, list[Fraction]] = {}
        merged: dict[int, list[bool]] = {}
        anomalies: dict[int, int] = {}
        for run in by_group[group]:
            for outcome in run.outcomes:
                merged.setdefault(outcome.issue_id, []).append(outcome.merged)
                anomalies[outcome.issue_id] = anomalies.get(outcome.issue_id, 0) + _anomalies(outcome)
                if outcome.line_coverage is not None:
                    coverage.setdefault(outcome.issue_id, []).append(_coverage_fraction(outcome.line_coverage))
        return coverage, merged, anomalies

    cov_a, merged_a, anom_a = per_issue(baseline_a)
    cov_b, merged_b, anom_b = per_issue(baseline_b)
    if set(merged_a) != set(merged_b):
        raise MetricsError(
            f"requirement sets differ between baselines: {sorted(merged_a)} vs {sorted(merged_b)}"
        )

    def mean_pct(values: list[Fraction] | None) -> Decimal:
        if not values:
            return Decimal(0)
        return _fraction_to_decimal(sum(values, Fraction(0)) / len(values) * 100)

    def merged_pct(flags: list[bool]) -> Decimal:
        return _fraction_to_decimal(Fraction(sum(flags), len(flags)) * 100) if flags else Decimal(0)

    deltas = []
    for issue_id in sorted(merged_a):
        cov_value_a = mean_pct(cov_a.get(issue_id))
        cov_value_b = mean_pct(cov_b.get(issue_id))
        deltas.append(RequirementDelta(issue_id, "mean_line_coverage_pct", cov_value_a, cov_value_b,
                                       cov_value_a - cov_value_b))
        m_a = merged_pct(merged_a[issue_id])
        m_b = merged_pct(merged_b[issue_id])
        deltas.append(RequirementDelta(issue_id, "merged_pct", m_a, m_b, m_a - m_b))
        a_count = Decimal(anom_a.get(issue_id, 0))
        b_count = Decimal(anom_b.get(issue_id, 0))
        ratio = (b_count / a_count) if a_count else None
        deltas.append(RequirementDelta(issue_id, "pipeline_anomalies", a_count, b_count,
                                       a_count - b_count, ratio))

    # Group-level rows.
    all_cov_a = [v for values in cov_a.values() for v in values]
    all_cov_b = [v for values in cov_b.values() for v in values]
    deltas.append(RequirementDelta(None, "mean_line_coverage_pct", mean_pct(all_cov_a), mean_pct(all_cov_b),
                                   mean_pct(all_cov_a) - mean_pct(all_cov_b)))
    all_m_a = [f for flags in merged_a.values() for f in flags]
    all_m_b = [f for flags in merged_b.values() for f in flags]
    deltas.append(RequirementDelta(None, "merged_pct", merged_pct(all_m_a), merged_pct(all_m_b),
                                   merged_pct(all_m_a) - merged_pct(all_m_b)))
    total_a = Decimal(sum(anom_a.values()))
    total_b = Decimal(sum(anom_b.values()))
    deltas.append(RequirementDelta(None, "pipeline_anomalies", total_a, total_b, total_a - total_b,
                                   (total_b / total_a) if total_a else None))
    return deltas


def runtime_stats(records: list[dict]) -> RuntimeStats:
    """Mean wall time per clone (final attempts) and the experiment total
    across all attempts, retries included."""
    runs = clone_runs(records)
    stats = RuntimeStats()
    if not runs:
        return stats
    per_group: dict[str, list[float]] = {}
    total = 0.0
    for run in runs:
        per_group.setdefault(run.baseline_id, []).append(run.wall_time)
        total += sum(run.attempt_wall_times) if run.attempt_wall_times else run.wall_time
    stats.per_group_mean = {g: sum(v) / len(v) for g, v in sorted(per_group.items())}
    stats.overall_mean = sum(r.wall_time for r in runs) / len(runs)
    stats.experiment_total = total
    return stats


# -- rendering ------------------------------------------------------------------

SUMMARY_COLUMNS = [
    "group", "n_clones", "n_requirements", "merged_count", "merged_pct",
    "all_tests_passed_count", "all_tests_passed_pct", "coverage_n",
    "mean_line_coverage_pct", "mean_wall_time_per_clone_s",
    "input_tokens_per_clone", "output_tokens_per_clone", "cost_per_clone",
    "co2_total_kg", "pipeline_anomaly_count",
]

PER_REQUIREMENT_COLUMNS = [
    "clone", "baseline", "issue_id", "cycles_used", "merged",
    "all_tests_passed", "line_coverage", "failure_class",
    "pipeline_anomalies", "annotation",
]

DELTA_COLUMNS = ["issue_id", "metric", "value_A", "value_B", "delta", "ratio"]


def _summary_row(summary: GroupSummary) -> dict:
    return {
        "group": summary.group,
        "n_clones": summary.n_clones,
        "n_requirements": summary.n_requirements,
        "merged_count": summary.merged_count,
        "merged_pct": repr(summary.merged_pct),
        "all_tests_passed_count": summary.all_tests_passed_count,
        "all_tests_passed_pct": repr(summary.all_tests_passed_pct),
        "coverage_n": summary.coverage_n,
        "mean_line_coverage_pct": "" if summary.mean_line_coverage_pct is None else repr(summary.mean_line_coverage_pct),
        "mean_wall_time_per_clone_s": repr(summary.mean_wall_time_per_clone),
        "input_tokens_per_clone": repr(summary.input_tokens_per_clone),
        "output_tokens_per_clone": repr(summary.output_tokens_per_clone),
        "cost_per_clone": str(summary.cost_per_clone),
        "co2_total_kg": str(summary.co2_total_kg),
        "pipeline_anomaly_count": summary.pipeline_anomaly_count,
    }


def write_reports(records: list[dict], out_dir: str | Path) -> list[Path]:
    """Render report.md plus the CSV tables into out_dir; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_group = summarize(records, "baseline")
    overall = summarize(records, "overall")
    stats = runtime_stats(records)
    runs = clone_runs(records)

    written = []

    summary_path = out / "summary.csv"
    with summary_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for summary in by_group + overall:
            writer.writerow(_summary_row(summary))
    written.append(summary_path)

    per_req_path = out / "per_requirement.csv"
    with per_req_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PER_REQUIREMENT_COLUMNS)
        writer.writeheader()
        for run in runs:
            for outcome in run.outcomes:
                writer.writerow(
                    {
                        "clone": run.clone_name,
                        "baseline": run.baseline_id,
                        "issue_id": outcome.issue_id,
                        "cycles_used": outcome.cycles_used,
                        "merged": outcome.merged,
                        "all_tests_passed": outcome.all_tests_passed,
                        "line_coverage": "" if outcome.line_coverage is None else repr(outcome.line_coverage),
                        "failure_class": outcome.failure_class,
                        "pipeline_anomalies": _anomalies(outcome),
                        "annotation": "",  # reserved for manual assessment
                    }
                )
    written.append(per_req_path)

    group_ids = sorted({r.baseline_id for r in runs})
    deltas: list[RequirementDelta] = []
    if len(group_ids) == 2:
        deltas = compare(records, group_ids[0], group_ids[1])
        deltas_path = out / "deltas.csv"
        with deltas_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=DELTA_COLUMNS)
            writer.writeheader()
            for delta in deltas:
                writer.writerow(
                    {
                        "issue_id": "overall" if delta.issue_id is None else delta.issue_id,
                        "metric": delta.metric,
                        "value_A": str(delta.value_a),
                        "value_B": str(delta.value_b),
                        "delta": str(delta.delta),
                        "ratio": "n/a" if delta.ratio is None else str(delta.ratio),
                    }
                )
        written.append(deltas_path)

    report_path = out / "report.md"
    report_path.write_text(_render_markdown(records, by_group, overall, stats, deltas, group_ids), encoding="utf-8")
    written.append(report_path)
    return written


def _pct_line(summary: GroupSummary, count: int, display: int) -> str:
    return f"{summary.group}: {display}% ({count}/{summary.n_requirements})"


def _render_markdown(records, by_group, overall, stats, deltas, group_ids) -> str:
    manifest = manifest_snapshot(records)
    lines = [f"# Experiment report: {manifest.get('experiment_id', 'unknown')}", ""]
    if not by_group:
        lines.append("No clone runs recorded.")
        return "\n".join(lines) + "\n"

    lines.append("## Merged requirements")
    for summary in by_group + overall:
        lines.append(_pct_line(summary, summary.merged_count, summary.merged_pct_display))
    lines.append("")

    lines.append("## All unit tests passed")
    for summary in by_group + overall:
        lines.append(_pct_line(summary, summary.all_tests_passed_count, summary.all_tests_passed_pct_display))
    lines.append("")

    lines.append("## Mean line coverage")
    for summary in by_group + overall:
        if summary.mean_line_coverage_pct is None:
            lines.append(f"{summary.group}: no coverage data")
        else:
            lines.append(
                f"{summary.group}: {round_half_up(summary.mean_line_coverage_pct, 1)}% "
                f"(n={summary.coverage_n})"
            )
    lines.append("")

    lines.append("## Runtime")
    for group, mean in stats.per_group_mean.items():
        lines.append(f"{group}: mean {mean / 3600:.2f} h per clone")
    lines.append(f"overall: mean {stats.overall_mean / 3600:.2f} h per clone")
    lines.append(f"experiment total (all attempts): {stats.experiment_total / 3600:.2f} h")
    lines.append("")

    lines.append("## Tokens, cost, and CO2")
    for summary in by_group + overall:
        lines.append(
            f"{summary.group}: {summary.input_tokens_per_clone:,.0f} input / "
            f"{summary.output_tokens_per_clone:,.0f} output tokens per clone, "
            f"cost {round_half_up(summary.cost_per_clone, 2)} per clone, "
            f"CO2 {summary.co2_total_kg} kg total"
        )
    lines.append("")

    lines.append("## Pipeline anomalies (stuck + error)")
    for summary in by_group + overall:
        lines.append(f"{summary.group}: {summary.pipeline_anomaly_count}")
    lines.append("")

    if deltas:
        a, b = group_ids
        lines.append(f"## Per-requirement deltas ({a} vs {b})")
        lines.append("| issue | metric | " + a + " | " + b + " | delta | ratio |")
        lines.append("|---|---|---|---|---|---|")
        for delta in deltas:
            issue = "overall" if delta.issue_id is None else str(delta.issue_id)
            ratio = "n/a" if delta.ratio is None else str(round_half_up(delta.ratio, 2))
            lines.append(
                f"| {issue} | {delta.metric} | {round_half_up(delta.value_a, 1)} | "
                f"{round_half_up(delta.value_b, 1)} | {round_half_up(delta.delta, 1)} | {ratio} |"
            )
        lines.append("")
    return "\n".join(lines)
