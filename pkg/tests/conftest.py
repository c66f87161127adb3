import numpy as np
import pytest
import torch

from ctxedit.backbone import DiTConfig
from ctxedit.layout import default_registry
from ctxedit.model import EditModel

TINY = dict(depth=2, channels=16, heads=2, head_dim=8, grid=(4, 4))


def randomize(model: torch.nn.Module, seed: int = 0, std: float = 0.3) -> None:
    """Overwrite every trainable parameter, zero-initialized ones included, with noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return EditModel(DiTConfig(**TINY), default_registry())


@pytest.fixture
def tiny_model64():
    torch.manual_seed(0)
    return EditModel(DiTConfig(**TINY), default_registry()).double()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
