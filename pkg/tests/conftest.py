import pytest

from maskdistill.toydata import write_toy_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six toy identities with eight images each, written once per session."""
    return write_toy_dataset(tmp_path_factory.mktemp("toy-small"), num_identities=6,
                             images_per_identity=8, seed=0)
