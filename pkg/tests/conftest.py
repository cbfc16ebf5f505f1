import numpy as np
import pytest
import torch

from subjectflow.model import ModelConfig, build_model
from subjectflow.synthdata import default_pool, scene_from_seed

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def pool():
    return default_pool()


@pytest.fixture
def small_config():
    return ModelConfig(d_model=32, n_heads=4, k_double=2, k_single=1)


@pytest.fixture
def small_model(small_config):
    return build_model(small_config, seed=3, dtype=torch.float64)


@pytest.fixture
def two_subject_scenes(pool):
    return [scene_from_seed(s, 2, pool) for s in range(4)]


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def central_diff(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar fn at every entry of x (float64)."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


CRITERIA: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Store one PASS/FAIL line per acceptance criterion for the run summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(CRITERIA.get(n, f"criterion {n:2d}: NOT RUN"))
