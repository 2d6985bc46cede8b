"""Small ablation over the three component flags, printed as a markdown table.

The grid is reduced (two categories, 20 train / 12 test samples) so all
eight variants finish in a couple of minutes. ``miiad ablate`` runs the same
sweep at full size.
"""

import warnings

from miiad.config import DataConfig, ExperimentConfig, MissingConfig
from miiad.harness import FeatureCache, combine, run_ablation

warnings.filterwarnings("ignore", category=RuntimeWarning)

cfg = ExperimentConfig(
    data=DataConfig(categories=("dome", "disk"), n_train=20, n_test=12),
    missing=MissingConfig(mode="pc", rate=0.7),
)

# Encoder features depend only on the data and the FE flag, so one cache
# serves every variant.
results = run_ablation(cfg, FeatureCache())
table = combine(results)
assert table.check_means()
print(table.to_markdown())
