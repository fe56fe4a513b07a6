"""Metric walkthrough on hand-sized inputs.

    python3 demos/03_metrics.py
"""
import numpy as np

from kagprompt.metrics import aupr, auroc, connected_components, pro

scores, labels = [0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]
print(f"AUROC {auroc(scores, labels):.3f}  AUPR {aupr(scores, labels):.3f}")

mask = np.zeros((8, 8), dtype=int)
mask[1:3, 1:4] = 1  # a 6-pixel region
mask[6, 6] = 1  # a single-pixel region
print("regions:", [r.size for r in connected_components(mask)])

good = mask + 0.05 * np.random.default_rng(0).random((8, 8))
flat = np.full((8, 8), 0.5)
missed = good.copy()
missed[6, 6] = 0.0  # the small defect is scored as background
for name, m in (("near perfect", good), ("constant", flat), ("misses small region", missed)):
    print(f"{name:20s} pAUROC {auroc(m.ravel(), mask.ravel()):.3f}  PRO {pro([m], [mask]):.3f}")
