import numpy as np
import pytest
import torch

from hpmseg.config import RunConfig
from hpmseg.trainer import set_single_threaded

set_single_threaded()


def tiny_config(grid=32, epochs=2):
    """Small model on small volumes for fast pipeline tests."""
    cfg = RunConfig()
    cfg.data.grid_size = grid
    cfg.data.crop = grid
    cfg.data.num_organs = 2
    m = cfg.model
    m.embed_dim, m.depth, m.num_heads = 32, 2, 2
    m.decoder_dim, m.decoder_depth, m.decoder_heads = 32, 1, 2
    m.predictor_dim, m.predictor_depth, m.predictor_heads = 16, 1, 2
    m.feature_size = 4
    cfg.pretrain.epochs = epochs
    cfg.pretrain.batch_size = 2
    cfg.finetune.epochs = epochs
    cfg.finetune.batch_size = 2
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
