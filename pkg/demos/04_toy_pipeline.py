"""End-to-end run at a reduced scale: synthesize data, train the graph
head, score the test split and write heatmaps. Takes a few minutes.

    python3 demos/04_toy_pipeline.py [out_dir]
"""
import os
import sys
import time

import numpy as np

from kagprompt import training as tr
from kagprompt.config import RunConfig
from kagprompt.pgm import write_pgm

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
os.makedirs(out, exist_ok=True)

cfg = RunConfig(seed=0, feat_size=8, image_size=32, n_train=60, n_test=20, epochs=20, top_k=8)
ws = tr.prepare(cfg)
print(f"train {len(ws.dataset.train)} images, support {len(ws.dataset.support)}, test {len(ws.dataset.test)}")

for name, c in (("graph T=5", cfg), ("no graph", cfg.replace(T=0))):
    t0 = time.perf_counter()
    ckpt, history = tr.train(c, ws)
    rep = tr.evaluate(ckpt, c, ws)
    print(f"{name:10s} {time.perf_counter() - t0:5.0f}s  loss {history[0]:.3f} -> {history[-1]:.3f}  "
          + "  ".join(f"{k} {v:.3f}" for k, v in rep.items()))

# heatmaps of the last model for a few anomalous test images
pred = tr.predict(ckpt, cfg.replace(T=0), ws)
for i in range(cfg.n_test, cfg.n_test + 3):
    write_pgm(np.clip(pred.M[i], 0, 1), os.path.join(out, f"test_{i:05}_map.pgm"))
    write_pgm(pred.masks[i].astype(float), os.path.join(out, f"test_{i:05}_mask.pgm"))
print(f"heatmaps in {out}/")
