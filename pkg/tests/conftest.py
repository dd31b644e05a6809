import pytest

from hhhfl.harness import SyntheticSpec, generate_synthetic
from hhhfl.ingest import DeviceKind, split_dataset

ALL_DEVICES = [DeviceKind.MW, DeviceKind.EP, DeviceKind.MU]


@pytest.fixture(scope="session")
def small_data():
    spec = SyntheticSpec.default(ALL_DEVICES, examples_per_class=30, separation=4.0)
    return generate_synthetic(spec, seed=0)


@pytest.fixture(scope="session")
def small_split(small_data):
    return split_dataset(small_data, clients_per_device=2, test_fraction=0.2, seed=0)
