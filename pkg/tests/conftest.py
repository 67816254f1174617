import numpy as np
import pytest

from rlsft.domain import Vocab
from rlsft.policies import TabularPolicy, TabularSupport, make_rng
from rlsft.synth import example1_demos, example1_world


@pytest.fixture
def example1():
    return example1_world(1.0, 1.0)


@pytest.fixture
def demos1():
    return example1_demos()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def two_prompt_support():
    vocab = Vocab(4)
    return TabularSupport(vocab, [(0,), (1,)], [[(1,), (2,), (3,)], [(0, 1), (2,)]])


@pytest.fixture
def random_policy(two_prompt_support):
    gen = np.random.default_rng(5)
    return TabularPolicy(two_prompt_support, gen.standard_normal(two_prompt_support.size))
