import pytest

from branchforge.corpus import GenerationConfig, curate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 24-program corpus shared by the slower model and harness tests."""
    out = tmp_path_factory.mktemp("corpus")
    return curate(seed=3, config=GenerationConfig(), count=24, out_dir=out)


@pytest.fixture(scope="session")
def default_corpus():
    return curate(seed=7)
