from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from seqtag.corpus import Corpus, Sentence, TagScheme, infer_scheme, parse_conll
from seqtag.embeddings import CharLM, StackedEmbedding, WordEmbeddingTable, load_word_vectors
from seqtag.numerics import make_rng
from seqtag.tagger import TaggerModel

FIXTURES = Path(__file__).parent / "fixtures"
DATA = resources.files("seqtag") / "data"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def toy_text():
    return (DATA / "toy_train.conll").read_text()


@pytest.fixture(scope="session")
def toy_scheme(toy_text):
    return infer_scheme(toy_text)


@pytest.fixture
def toy_sentences(toy_text, toy_scheme):
    return parse_conll(toy_text, toy_scheme)


@pytest.fixture
def toy_corpus(toy_sentences, toy_scheme):
    return Corpus(toy_sentences, toy_sentences, toy_sentences, toy_scheme)


@pytest.fixture
def toy_table():
    return load_word_vectors((DATA / "toy_vectors.txt").read_text())


def small_model(scheme: TagScheme, seed: int = 0, d_word: int = 3, d_lm: int = 2, d_char: int = 3,
                hidden: int = 2, table: WordEmbeddingTable | None = None, chars: str = "abcdefgh") -> TaggerModel:
    rng = make_rng(seed)
    if table is None:
        words = ["alpha", "beta", "gamma", "delta"]
        table = WordEmbeddingTable({w: i for i, w in enumerate(words)}, rng.normal(size=(len(words), d_word)))
    stack = StackedEmbedding(table, CharLM(chars, d_char, d_lm, "forward", rng),
                             CharLM(chars, d_char, d_lm, "backward", rng), dropout_p=0.0)
    return TaggerModel(stack, scheme, hidden, rng)


def random_sentence(rng: np.random.Generator, scheme: TagScheme, n: int, alphabet="abcdefghij") -> Sentence:
    words = ["".join(rng.choice(list(alphabet), size=rng.integers(1, 6))) for _ in range(n)]
    return Sentence.from_pairs(words, ["O"] * n)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
