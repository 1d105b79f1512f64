import numpy as np
import pytest
import torch
from torch import nn

from vmsvae.data import LEAVES, CategoryPath, Dataset, ImageSample, VmsMap, make_synthetic_dataset
from vmsvae.model import ModelConfig, build_model


class TinyBackbone(nn.Module):
    """Frozen stand-in for VGG16 in fast tests: 224 -> 4x7x7."""

    def __init__(self):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(123)
            self.body = nn.Sequential(
                nn.AvgPool2d(8), nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(), nn.MaxPool2d(4),
            )

    def forward(self, x):
        return self.body(x)


@pytest.fixture
def tiny_backbone():
    return TinyBackbone()


@pytest.fixture
def small_model(tiny_backbone):
    cfg = ModelConfig(n=16, m=4, batch_size=4, epochs=1, steps_per_epoch=2, seed=3)
    return build_model(cfg, backbone=tiny_backbone, decoder_widths=(16, 8, 8, 8, 4))


@pytest.fixture(scope="session")
def synth8():
    return make_synthetic_dataset(8, seed=11)


def constant_sample(image_id, leaf="kitchen", value=100, vms_value=None):
    px = np.full((224, 224, 3), value, dtype=np.uint8)
    vms = None
    if vms_value is not None:
        vms = VmsMap(np.full((224, 224), vms_value[0]), np.full((224, 224), vms_value[1]))
    return ImageSample(image_id, px, CategoryPath.from_leaf(leaf), vms)


def leaf_dataset(counts, labeled=False):
    samples = []
    for leaf, k in zip(LEAVES, counts):
        for i in range(k):
            samples.append(constant_sample(f"{leaf}_{i}", leaf, vms_value=(0.5, 0.5) if labeled else None))
    return Dataset(tuple(samples), "leaves")


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{criterion:<4}{'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
