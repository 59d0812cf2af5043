"""A reduced end-to-end experiment (well under a minute) that prints the comparison table.

    python demos/quick_run.py [OUTDIR]
"""
import sys
from dataclasses import replace
from pathlib import Path

from hideseek import pipeline

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
cfg = replace(pipeline.ExperimentConfig(out=out), counts=(300, 400, 30), latent_d=24, jobs=2)
manifest = pipeline.run_experiment(cfg)

print((out / "reports" / "comparison.csv").read_text(encoding="utf-8"))
print("stage timings (s):", {k: round(v, 2) for k, v in manifest.timings.items()})
print("full reports in", out / "reports")
