import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scida.config import RunConfig  # noqa: E402
from scida.datasets import SynthConfig, class_frequencies  # noqa: E402
from scida.state import build_state  # noqa: E402
from scida.trainer import load_run_data  # noqa: E402


def tiny_config(**overrides) -> RunConfig:
    """A few-second configuration: 4 classes, 32x32 images, two conv blocks."""
    base = dict(
        synthetic=SynthConfig(num_classes=4, source_per_class=6, num_target=12, max_labels=3, side=32),
        image_side=32,
        feature_dim=16,
        embed_dim=8,
        backbone_widths=(4, 8),
        classifier_hidden=12,
        batch_size=4,
        lr_dwc=0.05,
        lr_lwc=0.05,
        max_epochs=3,
        n_inner=2,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


def tiny_state(config=None, **overrides):
    config = config or tiny_config(**overrides)
    data = load_run_data(config)
    return build_state(config, class_frequencies(data.source), data.source.categories), data


@pytest.fixture
def tiny():
    return tiny_state()


# one line per acceptance criterion, printed after the run (see test_acceptance.py)
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
