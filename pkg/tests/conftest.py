from __future__ import annotations

import pytest

import citygen


@pytest.fixture(scope="session")
def mini_city():
    return citygen.mini_city_graph()


@pytest.fixture(scope="session")
def big_city():
    return citygen.big_city_graph()
