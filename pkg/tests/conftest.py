import numpy as np
import pytest

from minsurf import FermiGrid, GraphFunction, MetricField, candidate_pool, select_embedding_basis


@pytest.fixture(scope="session")
def flat_grid():
    return FermiGrid(2, 0.5, 33, 0.5)


@pytest.fixture(scope="session")
def flat_metric():
    return MetricField(2)


@pytest.fixture(scope="session")
def flat_basis(flat_grid, flat_metric):
    pool = candidate_pool(flat_grid, 7, 24)
    return select_embedding_basis(pool, GraphFunction.zeros(flat_grid), flat_metric)


@pytest.fixture(scope="session")
def default_inverse():
    """Default plane family, unknown basis and forward matrix at alpha = 1."""
    from minsurf.inversion import assemble_forward, build_family, make_unknown_basis
    fam = build_family()
    unk = make_unknown_basis(fam.region)
    return fam, unk, assemble_forward(fam, unk)


def rel(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-300)
