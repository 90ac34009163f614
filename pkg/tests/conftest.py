import numpy as np
import pytest
import torch

from trackdiff.codec import INSTRUMENTS, Note, Song, Track, build_vocabulary, encode
from trackdiff.synthetic import random_song

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_corpus():
    gen = np.random.default_rng(7)
    return [random_song(gen, bars=2, density=0.15, max_group=2, pitch_choices=4) for _ in range(4)]


@pytest.fixture
def small_vocab(small_corpus):
    return build_vocabulary(small_corpus)


@pytest.fixture
def small_scores(small_corpus, small_vocab):
    return [encode(s, small_vocab) for s in small_corpus]


def piano_song():
    return Song([Note(Track.PIANO, 0, 60, 4)], bars=1)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
