"""ROC curves with tied scores, the text report format, and the SVG plot."""

import tempfile
from pathlib import Path

import numpy as np

from dualcorenet.metrics import MetricReport, mann_whitney_auc, roc_auc, roc_svg

rng = np.random.default_rng(3)
labels = rng.integers(0, 2, 60)
good = np.round(labels + rng.normal(0, 0.6, 60), 1)  # rounding creates ties
weak = np.round(labels + rng.normal(0, 1.5, 60), 1)

report = MetricReport()
for name, scores in (("good", good), ("weak", weak)):
    curve = roc_auc(scores, labels)
    report.add_roc(name, curve)
    print(f"{name}: trapezoid AUC {curve.auc:.4f}, pairwise AUC {mann_whitney_auc(scores, labels):.4f}, "
          f"{len(curve.points)} ROC points")

out = Path(tempfile.mkdtemp(prefix="roc-demo-"))
report.write(out / "report.txt")
(out / "roc.svg").write_text(roc_svg(report.roc))
print("wrote", out / "report.txt", "and", out / "roc.svg")
print("\n".join((out / "report.txt").read_text().splitlines()[:4]))
