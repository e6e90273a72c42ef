import pytest
import torch
from hypothesis import settings

from largen.config import ModelConfig
from largen.data_engine import OracleSuite, build_dataset
from largen.model import LarGen

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def randomize_outputs(model: LarGen, seed: int = 0) -> LarGen:
    """Fresh models predict exactly zero (zero-initialised head); give them a random head."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in (model.denoiser.conv_out, model.denoiser.skip_gate):
            for p in mod.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.05)
    return model


@pytest.fixture(scope="session")
def cfg() -> ModelConfig:
    return ModelConfig()


@pytest.fixture
def model(cfg) -> LarGen:
    return randomize_outputs(LarGen(cfg))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    build_dataset(12, 3, OracleSuite(), root)
    return root


def image(seed: int, size: int = 64) -> torch.Tensor:
    return torch.rand(size, size, 3, generator=torch.Generator().manual_seed(seed))


def box_mask(x0: int, y0: int, x1: int, y1: int, size: int = 64) -> torch.Tensor:
    m = torch.zeros(size, size)
    m[y0:y1, x0:x1] = 1
    return m


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
