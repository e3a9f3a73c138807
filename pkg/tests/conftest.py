import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    """Small 32x32 configuration used by shape and gradient tests."""
    from camodiff.config import RunConfig

    return RunConfig().override(
        data__image_size=32, data__noise_size=32,
        encoder__widths=[4, 8, 8, 16], encoder__d0=8, encoder__dc=4,
        bdlu__de=4, bdlu__r=1,
        denoiser__widths=[8, 8, 8, 8], denoiser__time_dim=8,
        schedule__T=100, trainer__batch_size=2,
    )


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
