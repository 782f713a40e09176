"""Shared fixtures: the two reference instances used across the suite."""

import numpy as np
import pytest

from signfed.model import ObservationMatrix, ProblemSpec, StepSchedule

# Five scalar nodes, identical weights. Margin against m adversaries is
# 5 - 2m, so m=2 is tolerated (margin 1) and m=3 is not (margin -1).
ONES5 = [[1.0]] * 5

# Five planar nodes; rows 3 and 4 are a heavy near-vertical pair that
# jointly defeats the others along x=(0,1). Tolerates any single node.
FIG1 = [
    [1.00, 0.00],
    [0.77, 0.64],
    [-0.77, 0.64],
    [0.12, 1.14],
    [-0.12, 1.14],
]


@pytest.fixture(scope="session")
def ones5_matrix():
    return ObservationMatrix(ONES5)


@pytest.fixture(scope="session")
def fig1_matrix():
    return ObservationMatrix(FIG1)


@pytest.fixture
def ones5_spec():
    return ProblemSpec(mu=np.array([1.0]), covariance=np.array([[1.0]]),
                       adversary_set=frozenset({3, 4}), m_bound=2)


@pytest.fixture
def fig1_spec():
    return ProblemSpec(mu=np.array([0.6, -0.4]), covariance=np.eye(2),
                       adversary_set=frozenset({3}), m_bound=1)


@pytest.fixture
def schedule():
    return StepSchedule(0.8, 0.6)
