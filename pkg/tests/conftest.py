import pytest

from repinv.data import desk_mnist


@pytest.fixture(scope="session")
def desk():
    return desk_mnist()
