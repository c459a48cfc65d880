"""Session fixtures: one toy adapter corpus on disk plus trained predictor
networks, shared by the unit suites and the acceptance suite."""

import pytest

from loramerge.evaluation import calibrate_thresholds
from loramerge.hypernet import TrainConfig, train_hypernet
from loramerge.tasks import CorpusConfig, SplitManifest, build_corpus, load_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-corpus")
    build_corpus(root, SplitManifest.toy(), CorpusConfig())
    return root


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return load_corpus(corpus_dir)


@pytest.fixture(scope="session")
def base_model(corpus):
    return corpus.base_model()


@pytest.fixture(scope="session")
def train_pools(corpus):
    content = [e.adapter for e in corpus.select("content", "train")]
    style = [e.adapter for e in corpus.select("style", "train")]
    return content, style


@pytest.fixture(scope="session")
def trained_net(base_model, train_pools):
    """Default-config predictor plus its training trace."""
    content, style = train_pools
    return train_hypernet(base_model, content, style, TrainConfig())


@pytest.fixture(scope="session")
def nopenalty_net(base_model, train_pools):
    """Same training run with the interference penalty switched off."""
    content, style = train_pools
    net, _ = train_hypernet(base_model, content, style, TrainConfig(lam=0.0))
    return net


@pytest.fixture(scope="session")
def calibration(corpus):
    """(thresholds, distance pools) from the default calibration protocol."""
    return calibrate_thresholds(corpus)
