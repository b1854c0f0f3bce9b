"""Metrics demo: analyze a hand-built ledger without running any experiment.

Builds a small synthetic ledger (2 baselines x 2 clones x 2 requirements),
then walks through the analysis surface: group summaries, A/B deltas, exact
cost and CO2 accounting.

    python demos/replay_metrics.py
"""

from decimal import Decimal

from sesl.metrics import co2, compare, cost, runtime_stats, summarize


def outcome(issue_id, merged, coverage, anomalies=0):
    events = [[100 + i, "stuck"] for i in range(anomalies)]
    events.append([199, "success" if merged else "failed"])
    return {
        "issue_id": issue_id,
        "cycles_used": 1 if merged else 3,
        "merged": merged,
        "all_tests_passed": merged,
        "line_coverage": coverage,
        "failure_class": "none" if merged else "production",
        "pipeline_events": events,
    }


def clone(baseline, index, outcomes, wall_hours):
    name = f"demo-{baseline}-c{index:02d}"
    return {
        "type": "clone_run", "clone_name": name, "baseline_id": baseline,
        "status": "completed", "attempt": 1, "outcomes": outcomes,
        "wall_time": wall_hours * 3600.0, "attempt_wall_times": [wall_hours * 3600.0],
        "token_ledger": [{
            "clone": name, "role": "coding", "cycle": 1, "issue_id": None,
            "input_tokens": 2_000_000, "output_tokens": 50_000,
            "wall_time": wall_hours * 3600.0, "model": "demo",
        }],
        "project_locator": name, "started_at": 0, "finished_at": 0, "error": "",
    }


records = [
    {"type": "experiment_start", "experiment_id": "demo", "schema_version": 1,
     "planned_clones": [], "started_at": 0,
     "manifest": {"llm": {"in_rate": "0.27", "out_rate": "1.10",
                          "co2_factor": "0.000000005"}}},
    clone("A", 1, [outcome(1, True, 0.50), outcome(2, True, 0.40)], 1.0),
    clone("A", 2, [outcome(1, True, 0.50), outcome(2, False, 0.30)], 1.2),
    clone("B", 1, [outcome(1, True, 0.35), outcome(2, False, 0.20, anomalies=2)], 1.4),
    clone("B", 2, [outcome(1, False, 0.25), outcome(2, False, 0.10, anomalies=1)], 1.6),
    {"type": "experiment_end", "completed": 4, "failed": 0, "finished_at": 0},
]

print("Per-baseline summaries:")
for summary in summarize(records, "baseline") + summarize(records, "overall"):
    print(f"  {summary.group}: merged {summary.merged_pct_display}% "
          f"({summary.merged_count}/{summary.n_requirements}), "
          f"coverage {summary.mean_line_coverage_pct:.1f}%, "
          f"anomalies {summary.pipeline_anomaly_count}, "
          f"cost/clone {summary.cost_per_clone}")

print("\nPer-requirement deltas (A - B):")
for delta in compare(records, "A", "B"):
    issue = "overall" if delta.issue_id is None else f"issue {delta.issue_id}"
    ratio = "n/a" if delta.ratio is None else delta.ratio
    print(f"  {issue:9s} {delta.metric:24s} A={delta.value_a} B={delta.value_b} "
          f"delta={delta.delta} ratio={ratio}")

stats = runtime_stats(records)
print(f"\nRuntime: per-group means {stats.per_group_mean}, total {stats.experiment_total / 3600:.1f}h")

print("\nExact accounting:")
print("  cost(94.2M in, 269.6k out, 0.27/1.10 per 1M) =",
      cost(94_200_000, 269_600, "0.27", "1.10"))
print("  co2(20 x 94.47M tokens, 5e-9 kg/token)       =",
      co2(20 * (94_200_000 + 269_600), Decimal("0.000000005")), "kg")
