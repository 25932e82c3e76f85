import numpy as np
import pytest
import torch

from octplaque.data import PhantomParams, generate_dataset

torch.set_num_threads(1)


def smooth_polar(rng: np.random.Generator, n_angles=128, n_depth=64) -> np.ndarray:
    """Band-limited polar image: low angular harmonics times smooth depth profiles."""
    theta = 2 * np.pi * np.arange(n_angles)[:, None] / n_angles
    u = np.linspace(0.0, 1.0, n_depth)[None, :]
    img = np.full((n_angles, n_depth), 0.5)
    for h in range(1, 4):
        a, b = rng.uniform(-0.08, 0.08, size=2)
        k = rng.uniform(0.5, 2.0)
        img = img + (a * np.cos(h * theta) + b * np.sin(h * theta)) * np.cos(np.pi * k * u + rng.uniform(0, np.pi))
    img = img + 0.1 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * u)
    return np.clip(img, 0.0, 1.0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six patients x 20 frames of default-appearance phantoms."""
    root = tmp_path_factory.mktemp("phantoms")
    params = PhantomParams(n_patients=6, frames_per_pullback=20, seed=5)
    return generate_dataset(params, root)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    """Print and remember one acceptance verdict; the calling test asserts on the return value."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
