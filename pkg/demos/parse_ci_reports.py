"""CI feedback parsing demo: JUnit test reports and JaCoCo line coverage.

    python demos/parse_ci_reports.py
"""

from pathlib import Path

from sesl.ci_reports import NoCoverageData, parse_jacoco, parse_junit

ROOT = Path(__file__).resolve().parent.parent
REPORTS = ROOT / "fixtures" / "ci_reports"

print("JUnit fixtures:")
for path in sorted((REPORTS / "junit").glob("*.xml")):
    summary = parse_junit(path.read_text())
    print(f"  {path.name:32s} tests={summary.tests:2d} failures={summary.failures} "
          f"errors={summary.errors} skipped={summary.skipped} all_green={summary.all_green}")
    for name in summary.failing_case_names:
        print(f"      failing: {name}")

print("\nJaCoCo fixtures:")
for path in sorted((REPORTS / "jacoco").glob("*.xml")):
    try:
        coverage = parse_jacoco(path.read_text())
    except NoCoverageData:
        print(f"  {path.name:32s} no coverage data")
        continue
    print(f"  {path.name:32s} {coverage.lines_covered}/{coverage.lines_total} "
          f"lines = {coverage.ratio:.1%}")
