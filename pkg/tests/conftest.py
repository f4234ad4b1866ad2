"""Shared fixtures: dictionary generation is the one expensive setup step
(~1 s per dictionary), so the two dictionaries used across the suite are
built once per session."""

import pytest

from moepack.dictionary import DEFAULT_P0, PairDistribution, generate_dictionary


@pytest.fixture(scope="session")
def dic():
    """The default dictionary (p0 = 0.885)."""
    return generate_dictionary(PairDistribution(DEFAULT_P0))


@pytest.fixture(scope="session")
def dic_low():
    """A second dictionary (p0 = 0.7) for mismatch and cross-checks."""
    return generate_dictionary(PairDistribution(0.7))
