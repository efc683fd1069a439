import pytest

from srfield.denoisers import TrainConfig, train_denoiser
from srfield.diffusion import make_schedule
from srfield.scenegen import patch_corpus

# (criterion, passed, detail) lines collected by the acceptance module
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def toy_schedule():
    return make_schedule(256, 1e-4, 2e-2)


@pytest.fixture(scope="session")
def toy_denoiser(toy_schedule):
    """The small conditional upscaler shared by the 2D and 3D experiments (about 4 min on one core)."""
    hr, lr = patch_corpus(range(1000, 1040), 6, 24, 8, 6)
    model, _ = train_denoiser(hr, lr, toy_schedule, TrainConfig(epochs=40, batch_size=32), seed=0)
    return model


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
