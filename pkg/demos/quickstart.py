"""Train and evaluate one category with most point clouds missing.

Run with ``python3 demos/quickstart.py``; it takes about half a minute on
one CPU core.
"""

import warnings

from miiad.data import MissingSpec, apply_missing, make_dataset, preprocess_dataset
from miiad.harness import evaluate
from miiad.pipeline import Radar, RadarConfig

warnings.filterwarnings("ignore", category=RuntimeWarning)

# Synthetic heightmaps with aligned RGB renders; half the test set is defective.
raw = make_dataset(("dome",), n_train=60, n_test=40, size=32, seed=0)
ds = preprocess_dataset(raw)  # RANSAC removes the background plane

# Drop the point cloud from 70% of the samples in each split.
ds = apply_missing(ds, MissingSpec("pc", 0.7, seed=0))
n_missing = sum(not s.mask.has_pc for s in ds.train)
print(f"{n_missing}/{len(ds.train)} training samples have no point cloud")

model = Radar(RadarConfig())
report = model.fit(list(ds.train))
print(f"stage-1 InfoNCE {report.stage1.initial_loss:.3f} -> {report.stage1.final_loss:.3f}")
print(f"repository sizes: {report.repository_sizes}")
print(f"trainable / total parameters: {report.trainable_ratio:.4f}")

results = model.predict(list(ds.test))
metrics = evaluate(results, ds.test)
print("test metrics: " + ", ".join(f"{k}={v:.3f}" for k, v in metrics.items()))

# Each result carries an image score and a patch-level segmentation map.
worst = max(zip(ds.test, results), key=lambda p: p[1].sco_a)
print(f"highest-scoring sample: id {worst[0].id}, label {worst[0].label}, "
      f"pattern {worst[0].mask.pattern}, sco_a {worst[1].sco_a:.2f}")
