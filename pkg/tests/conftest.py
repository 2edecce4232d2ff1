import numpy as np
import pytest
import torch

from accentforge.forge import default_profile, forge_corpus


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def profile():
    return default_profile()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, profile):
    """A few rendered utterances across accents and styles."""
    out = tmp_path_factory.mktemp("small_corpus")
    composition = [
        ("a0x04", "neutral", 4),
        ("a0x07", "neutral", 3),
        ("a1x01", "neutral", 3),
        ("a2x03", "neutral", 3),
        ("nwx01", "news", 3),
    ]
    return forge_corpus(profile, composition, out, seed=99, corpus_name="test")
