from fractions import Fraction

import numpy as np
import pytest

from pcgsd.asg_index import GroupIndex, normalize
from pcgsd.coarse import TokenDistribution
from pcgsd.models import running_example

# groups {0,1}, {1,2}, {3}; token 1 sits in two groups
R_GROUPS = ([0, 1], [1, 2], [3])
R_P = (0.4, 0.4, 0.1, 0.1)
R_Q = (0.1, 0.2, 0.3, 0.4)


def brute_coarse(probs, groups, n):
    """Equal-split group masses in exact rational arithmetic."""
    degree = [sum(t in g for g in groups) for t in range(n)]
    probs = [Fraction(str(v)) for v in probs]
    return [sum(probs[t] / degree[t] for t in g) for g in groups]


@pytest.fixture
def r_index():
    return GroupIndex.from_groups(4, R_GROUPS)


@pytest.fixture
def r_p():
    return TokenDistribution(R_P, role="draft")


@pytest.fixture
def r_q():
    return TokenDistribution(R_Q, role="target")


@pytest.fixture
def r_instance():
    return running_example()


@pytest.fixture
def three_points():
    return normalize([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])


def random_unit(rng, n, d):
    return normalize(rng.standard_normal((n, d)))
