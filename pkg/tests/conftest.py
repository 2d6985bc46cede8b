import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from miiad.data import MissingSpec, apply_missing, make_dataset, preprocess_dataset  # noqa: E402
from miiad.fusion import FusionConfig  # noqa: E402
from miiad.hybrid import HybridConfig  # noqa: E402
from miiad.pipeline import RadarConfig  # noqa: E402
from miiad.point_encoder import PointEncoderConfig  # noqa: E402
from miiad.rgb_encoder import RgbEncoderConfig  # noqa: E402


def small_radar_config(**flags) -> RadarConfig:
    """A fast model for wiring tests: few groups, narrow encoders, two epochs per stage."""
    return RadarConfig(
        point=PointEncoderConfig(dim=16, heads=2, num_groups=16, group_size=8, min_cell_points=2),
        rgb=RgbEncoderConfig(dim=16, heads=2, depth=2),
        fusion=FusionConfig(width=32, heads=4, epochs=2, mlp_hidden=16, out_dim=32),
        hybrid=HybridConfig(epochs=2, ocsvm_epochs=20, ocsvm_components=64, ocsvm_max_patches=1024),
        **flags,
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    """One category, 12 train / 8 test, preprocessed, complete."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return preprocess_dataset(make_dataset(("dome",), n_train=12, n_test=8, seed=5))


@pytest.fixture(scope="session")
def tiny_missing(tiny_dataset):
    return apply_missing(tiny_dataset, MissingSpec("pc", 0.5, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_verdict(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
