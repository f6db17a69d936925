import numpy as np
import pytest
import torch

from makeupdiff.diffusion import ModelConfig, TransferModel


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(resolution=32, feature_dim=32, embed_dim=16, width=16, heads=2, T=20)


@pytest.fixture
def tiny_model(tiny_cfg):
    return TransferModel(tiny_cfg, seed=0)


def pytest_terminal_summary(terminalreporter):
    lines = [value for key in ("passed", "failed", "xfailed", "xpassed") for rep in terminalreporter.stats.get(key, [])
             if rep.when == "call" for name, value in rep.user_properties if name == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
