"""Shared fixtures: one default dataset build per test session."""

import numpy as np
import pytest

from anemia_pathways.generation import (
    generate_dataset,
    load_dataset_config,
    make_inconclusive,
    split_dataset,
)


@pytest.fixture(scope="session")
def dataset_config():
    config, split_cfg, corruption_doc = load_dataset_config()
    return config, split_cfg, corruption_doc


@pytest.fixture(scope="session")
def clean_dataset(dataset_config):
    config, _, _ = dataset_config
    rng = np.random.default_rng(42)
    return generate_dataset(config, rng=rng), rng


@pytest.fixture(scope="session")
def full_dataset(dataset_config, clean_dataset):
    """Post-carve dataset, built on the same RNG stream as clean_dataset."""
    config, _, _ = dataset_config
    clean, rng = clean_dataset
    return make_inconclusive(clean, config.inconclusive_fraction, rng=rng)


@pytest.fixture(scope="session")
def splits(dataset_config, full_dataset):
    _, split_cfg, _ = dataset_config
    rng = np.random.default_rng(9)
    return split_dataset(full_dataset, split_cfg, rng=rng)
