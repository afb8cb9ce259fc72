import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _float64_default():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from mvgfdr.data import generate_synthetic, load_manifest

    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic(12, K=4, G=5, S=32, seed=3, out_dir=root)
    return load_manifest(root / "manifest.csv", views=4, classes=5, size=32)
