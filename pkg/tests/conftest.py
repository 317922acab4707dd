import numpy as np
import pytest
import torch

from landmark_discovery.detector import DetectorConfig
from landmark_discovery.generator import InterIntraModel, ModelConfig
from landmark_discovery.objectives import PerceptualConfig, PerceptualLoss

MICRO = ModelConfig(DetectorConfig(K=2, in_size=16, map_size=4, width=4),
                    feature_dim=8, encoder_width=4, generator_width=8)


def central_diff_scalar(f, tensor, index, h=1e-5):
    flat = tensor.data.view(-1)
    old = flat[index].item()
    flat[index] = old + h
    fp = f()
    flat[index] = old - h
    fm = f()
    flat[index] = old
    return (fp - fm) / (2 * h)


@pytest.fixture
def micro_model():
    torch.manual_seed(0)
    return InterIntraModel(MICRO).double()


@pytest.fixture(scope="session")
def random_perceptual():
    return PerceptualLoss(PerceptualConfig("random_fixed")).double()


@pytest.fixture
def micro_batch():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(3, 3, 16, 16, generator=g, dtype=torch.float64)
    xp = torch.rand(3, 3, 16, 16, generator=g, dtype=torch.float64)
    return x, xp, torch.tensor([1, 2, 0])


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
