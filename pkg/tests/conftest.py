import numpy as np
import pytest

from phenoaudit.features import PatientHistory, build_vocabulary, encode_dataset, split_dataset
from phenoaudit.synth import CohortConfig, generate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    """A 2k-patient cohort shared by read-only tests."""
    config = CohortConfig(n_patients=2000, seed=17)
    encounters, ledger = generate_cohort(config)
    return config, encounters, ledger


@pytest.fixture(scope="session")
def featurized(small_cohort):
    _, encounters, _ = small_cohort
    history = PatientHistory(encounters)
    train_e, val_e, test_e = split_dataset(encounters, seed=17)
    vocabulary = build_vocabulary(train_e, PatientHistory(train_e))
    datasets = tuple(encode_dataset(s, history, vocabulary) for s in (train_e, val_e, test_e))
    return vocabulary, history, datasets


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
