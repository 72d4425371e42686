"""Stage-2 ablations: full model, no pretraining, no guidance.

Pretrains once per seed, then trains the pose network three ways and reports
test MPJPE and MPVPE (root-aligned, mm). Reduce the epochs for a quick look.

    python demos/03_ablation.py [stage2_epochs] [seeds]
"""
import sys
import time
from dataclasses import replace

import numpy as np

from gestpose import runs
from gestpose.config import RunConfig
from gestpose.pipeline import evaluate

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
n_seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 3
variants = {"full": {}, "no-pt": {"no_pretrain": True}, "no-guidance": {"no_guidance": True}}
scores = {k: [] for k in variants}

start = time.time()
for seed in range(n_seeds):
    cfg = RunConfig(seed=seed, train_epochs=epochs)
    data = runs.make_dataset(cfg)
    stage1 = runs.run_pretrain(cfg, data["train"], data["val"])
    for name, flags in variants.items():
        model, _ = runs.run_train(replace(cfg, **flags), data["train"], data["val"], stage1.arrays)
        ev = evaluate(model, data["test"])
        scores[name].append(ev.mpjpe_mm)
        print(f"seed {seed} {name:>11}: MPJPE {ev.mpjpe_mm:.3f} mm, MPVPE {ev.mpvpe_mm:.3f} mm")

print(f"\nmean over {n_seeds} seeds ({time.time() - start:.0f} s):")
for name, vals in scores.items():
    print(f"  {name:>11}: {np.mean(vals):.3f} mm")
