import numpy as np
import pytest

from ltseg.synthgen import GeneratorConfig, generate_dataset

ACCEPTANCE_LINES: list[str] = []


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (perturbed in place, restored after)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture(scope="session")
def small_cfg():
    return GeneratorConfig(H=24, W=24, n_scenes=12, seed=3)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return generate_dataset(small_cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
