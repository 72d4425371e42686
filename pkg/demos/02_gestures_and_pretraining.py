"""Synthetic gestures and gesture-aware pretraining.

Generates a small hierarchical gesture dataset, trains the encoder on the
coarse + alpha * fine objective, and compares how well pooled features cluster
by coarse gesture before and after pretraining.

    python demos/02_gestures_and_pretraining.py [epochs]
"""
import sys

import numpy as np

from gestpose import runs
from gestpose.config import RunConfig
from gestpose.losses import pca_project, silhouette_score
from gestpose.pretrain import embed

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
cfg = RunConfig(seed=0, pretrain_epochs=epochs)
tax = runs.taxonomy(cfg)
print(f"{tax.n_coarse} coarse gestures, {tax.n_fine} fine variants")
print("fine -> coarse:", list(tax.fine_to_coarse))

data = runs.make_dataset(cfg)
print({k: len(v) for k, v in data.items()}, "samples")
test_coarse = np.array([s.coarse for s in data["test"]])

_, enc0, heads0 = runs.build_stage1(cfg)
g0, _, _ = embed(enc0, heads0, data["test"])

result = runs.run_pretrain(cfg, data["train"], data["val"],
                           log=lambda r: print(f"epoch {r[0]:2d} alpha {r[1]:.2f} loss {r[2]:.3f} "
                                               f"val coarse {r[5]:.3f} fine {r[6]:.3f}"))
store, enc, heads = runs.build_stage1(cfg)
for name, t in store.items():
    t.data[...] = result.arrays[name]
g1, _, _ = embed(enc, heads, data["test"])

print(f"best epoch {result.best_epoch}")
print(f"silhouette over coarse labels: random init {silhouette_score(g0, test_coarse):.3f}, "
      f"pretrained {silhouette_score(g1, test_coarse):.3f}")
pcs = pca_project(g1, 2)
for c in range(tax.n_coarse):
    centre = pcs[test_coarse == c].mean(0)
    print(f"  coarse {c}: PCA centroid ({centre[0]:+.2f}, {centre[1]:+.2f})")
