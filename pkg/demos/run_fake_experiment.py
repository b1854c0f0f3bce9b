"""End-to-end demo: run the 2x2 battleships experiment on the fake backend.

The A baseline keeps its clean requirements; every B clone gets the six
quality defects injected before any agent runs. The scripted playbook
implements all five requirements per clone, so everything merges and the
report shows a full A/B comparison.

    python demos/run_fake_experiment.py
"""

import tempfile
from pathlib import Path

from sesl.cli import main

ROOT = Path(__file__).resolve().parent.parent

out_dir = Path(tempfile.mkdtemp(prefix="sesl-demo-")) / "battleships"
code = main([
    "run", str(ROOT / "fixtures" / "manifests" / "battleships.yaml"),
    "--backend", "fake",
    "--playbook", str(ROOT / "fixtures" / "playbooks" / "all_green.playbook"),
    "--out", str(out_dir),
])
print(f"\nrun exited with {code}")

main(["report", str(out_dir)])
print("\n--- report.md ---\n")
print((out_dir / "report.md").read_text())
