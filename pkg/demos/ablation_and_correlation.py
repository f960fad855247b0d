"""
Loss ablation and the quality correlation, through the CLI
==========================================================

Everything the command line does is reachable from ``coral.cli.main``. This
script trains the four loss configurations briefly, evaluates one of them on
held-out tasks, correlates per-sample PCK with held-out velocity loss, and
bundles the learning curves for plotting.

Pass a step count as the first argument for longer runs (default 200).
"""

import json
import sys
import tempfile
from pathlib import Path

from coral.cli import main

steps = sys.argv[1] if len(sys.argv) > 1 else "200"
out = Path(tempfile.mkdtemp(prefix="coral-demo-"))

###############################################################################
# (I) velocity only, (II) + entropy, (III) + correspondence, (IV) both.

for name in ("I", "II", "III", "IV"):
    main(["train", "--config", name, "--steps", steps, "--eval-every", steps, "--out", str(out / name)])
    last = (out / name / "metrics.csv").read_text().splitlines()[-1]
    print(name, last)

###############################################################################
# Held-out evaluation: PCK at several thresholds, plus the random-guess level.

main(["eval-correspondence", str(out / "IV" / "model.ckpt"), "--tasks", "32", "--out", str(out / "eval")])
report = json.loads((out / "eval" / "report.json").read_text())
print("PCK     ", report["pck"])
print("chance  ", report["chance_pck"])

###############################################################################
# Samples the model matches well should also be samples it denoises well, so
# PCK and velocity loss should move in opposite directions.

main(["analyze-correlation", "--report", str(out / "eval" / "report.json"), "--out", str(out / "corr")])
corr = json.loads((out / "corr" / "correlation.json").read_text())
print(f"r = {corr['r']:.3f}, one-sided p = {corr['p_less']:.4f} over {corr['n']} samples")

###############################################################################
# CSV tables ready for any plotting tool.

main(["export-plots", *(str(out / n) for n in ("I", "II", "III", "IV")), "--out", str(out / "plots")])
print("plot tables in", out / "plots")
