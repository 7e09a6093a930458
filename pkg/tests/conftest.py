import numpy as np
import pytest

import fracform as ff


@pytest.fixture(scope="session")
def sg2():
    return ff.harmonic_structure(ff.builtin_structure("sg2"))


@pytest.fixture(scope="session")
def vicsek():
    return ff.harmonic_structure(ff.builtin_structure("vicsek"))


@pytest.fixture()
def rng():
    return np.random.default_rng(20260817)


def random_piecewise_harmonic(hs, level, rng):
    table = hs.spec.vertex_table(level)
    return ff.PiecewiseHarmonic(hs, level, rng.standard_normal(table.num_vertices))
