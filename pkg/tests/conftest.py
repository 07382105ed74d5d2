import re
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from prompts import SYMBOL_SETS, build_vocab, colors_corpus, gen_colors  # noqa: E402
from transformer import ModelConfig, Transformer  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the reference training run tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long reference run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def colors():
    return gen_colors(0)


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(colors_corpus())


@pytest.fixture(scope="session")
def small_config(vocab):
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=len(vocab), max_seq=256)


@pytest.fixture
def random_model():
    def make(n_layers=2, n_heads=2, d_model=16, vocab_size=24, max_seq=32, seed=0, std=0.5):
        config = ModelConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, vocab_size=vocab_size, max_seq=max_seq)
        model = Transformer.initialize(config, seed)
        rng = np.random.default_rng(seed + 100)
        for name, value in model.weights.items():
            if value.ndim == 2:
                model.weights[name] = rng.normal(0.0, std, size=value.shape).astype(np.float32)
            else:
                model.weights[name] = (value + rng.normal(0.0, 0.1, size=value.shape)).astype(np.float32)
        return model
    return make


@pytest.fixture
def random_prompts():
    def make(count, vocab_size, max_len, seed=0):
        rng = np.random.default_rng(seed)
        return [rng.integers(vocab_size, size=int(rng.integers(2, max_len + 1))).tolist() for _ in range(count)]
    return make


class FirstSymbolModel:
    """Always puts its highest logit on the first symbol of every known symbol set"""

    def __init__(self, vocab):
        self.logits = np.zeros(len(vocab), dtype=np.float32)
        for symbols in SYMBOL_SETS.values():
            self.logits[vocab.token_id(f" {symbols[0]}")] = 5.0

    def next_token_logits(self, token_ids):
        return self.logits.copy()


class OracleModel:
    """Reads the context color back out of the prompt and answers with it"""

    _CONTEXT = re.compile(r" is (\w+)\. What color is")

    def __init__(self, vocab):
        self.vocab = vocab

    def next_token_logits(self, token_ids):
        text = self.vocab.decode(token_ids)
        color = self._CONTEXT.findall(text)[-1]
        logits = np.zeros(len(self.vocab), dtype=np.float32)
        query = text.rsplit("Phrase:", 1)[-1]
        if "Choices:" in query:
            for symbol, choice in re.findall(r"^(\S)\. (.+)$", query, flags=re.MULTILINE):
                if choice == color:
                    logits[self.vocab.token_id(f" {symbol}")] = 10.0
        else:
            logits[self.vocab.token_id(f" {color}")] = 10.0
        return logits


@pytest.fixture
def first_symbol_model(vocab):
    return FirstSymbolModel(vocab)


@pytest.fixture
def oracle_model(vocab):
    return OracleModel(vocab)
