import numpy as np
import pytest

import sparsevote
from sparsevote.sparse_conv import FilterBank
from sparsevote.voxel_grid import SparseGrid


@pytest.fixture(params=sparsevote.available_backends())
def backend(request):
    """Run a test once per available voting kernel."""
    previous = sparsevote.get_backend()
    sparsevote.set_backend(request.param)
    yield request.param
    sparsevote.set_backend(previous)


def random_grid(rng, shape, channels, occupancy, positive=False):
    mask = rng.random(shape) < occupancy
    values = rng.normal(size=tuple(shape) + (channels,))
    if positive:
        values = np.abs(values) + 0.1
    return SparseGrid.from_dense(np.where(mask[..., None], values, 0.0))


def random_bank(rng, kernel, f_in, f_out, bias_scale=0.5):
    w = rng.normal(size=tuple(kernel) + (f_in, f_out)) / np.sqrt(np.prod(kernel) * f_in)
    return FilterBank(w, -bias_scale * rng.random(f_out))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """``record(number, title, ok, detail)`` files one summary line per criterion."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        request.config.acceptance_lines.append((number, line))
        print(line)
        return ok
    return record
