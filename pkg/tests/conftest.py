from __future__ import annotations

import numpy as np
import pytest

from magdiff import build_grid, build_kernel, make_cross_section


@pytest.fixture(scope="session")
def grid():
    return build_grid()


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(4, 8, 6)


@pytest.fixture(scope="session")
def kernels(grid):
    return {name: build_kernel(grid, make_cross_section(name, {}))
            for name in ("constant", "gauss_mix", "gauss_aniso")}


@pytest.fixture(scope="session")
def small_kernels(small_grid):
    return {name: build_kernel(small_grid, make_cross_section(name, {}))
            for name in ("constant", "gauss_mix", "gauss_aniso")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
