import numpy as np
import pytest


def natural(name: str, size: int = 64) -> np.ndarray:
    from skimage import data
    from skimage.transform import resize

    img = getattr(data, name)()
    return resize(img, (size, size), anti_aliasing=True).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image(rng):
    return rng.random((16, 16, 3)).astype(np.float32)


@pytest.fixture(scope="session")
def faces():
    return [natural("astronaut"), natural("coffee")]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, line = RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {line}")
