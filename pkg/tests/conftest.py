"""Session fixtures for the long desk-scale runs, shared by the acceptance tests.

Each fixture trains at most once per test session; later tests reuse the
result. The run directories live under pytest's temporary directory.
"""

import pytest

from segflow.experiments import EmergenceRecipe, corpus_split, train_and_evaluate


@pytest.fixture(scope="session")
def recipe():
    return EmergenceRecipe()


@pytest.fixture(scope="session")
def corpus(recipe):
    return corpus_split(recipe)


def _run(corpus, recipe, out_dir):
    train_ds, held = corpus
    return train_and_evaluate(train_ds, held, recipe.train, out_dir)


@pytest.fixture(scope="session")
def emergence_run(corpus, recipe, tmp_path_factory):
    """The desk-scale recipe trained once: c=5, 5000 iterations, seed 0."""
    return _run(corpus, recipe, tmp_path_factory.mktemp("emergence_a"))


@pytest.fixture(scope="session")
def emergence_rerun(corpus, recipe, tmp_path_factory):
    """A second, independent run of the same recipe and seed."""
    return _run(corpus, recipe, tmp_path_factory.mktemp("emergence_b"))
