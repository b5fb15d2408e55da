import os

import numpy as np
import pytest
import torch

from avsync.features import toy_spec
from avsync.fixtures import make_fixture_set
from avsync.toy import SYNCNET_ARCH, ToyArch, build_toy_extractor, load_toy_extractor, save_toy_extractor, train_toy

torch.set_num_threads(1)

# Lines collected by tests/test_acceptance.py, printed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def _cached_toy(cache_dir, name, arch):
    path = cache_dir / f"{name}.pt"
    if path.exists():
        return load_toy_extractor(path)
    model = train_toy(make_fixture_set(20, seed=11), seed=7, arch=arch)
    save_toy_extractor(model, path)
    return model


@pytest.fixture(scope="session")
def model_cache(tmp_path_factory):
    shared = os.environ.get("AVSYNC_TEST_CACHE")
    if shared:
        path = os.path.abspath(shared)
        os.makedirs(path, exist_ok=True)
        from pathlib import Path
        return Path(path)
    return tmp_path_factory.mktemp("models")


@pytest.fixture(scope="session")
def trained_toy(model_cache):
    """AV-HuBERT-style toy extractor trained on seeded fixtures."""
    return _cached_toy(model_cache, "toy_avhubert", ToyArch())


@pytest.fixture(scope="session")
def trained_syncnet(model_cache):
    return _cached_toy(model_cache, "toy_syncnet", SYNCNET_ARCH)


@pytest.fixture(scope="session")
def toy(trained_toy):
    return toy_spec(trained_toy, "trained")


@pytest.fixture(scope="session")
def random_toy():
    """Untrained extractor; enough for structural properties."""
    return toy_spec(build_toy_extractor(seed=3), "random")


@pytest.fixture(scope="session")
def fixtures():
    return make_fixture_set(4, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
