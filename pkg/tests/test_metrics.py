import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trackdiff.codec import Note, Song, Track
from trackdiff.metrics import (
    chord_accuracy,
    chord_accuracy_from_labels,
    feature_histogram,
    feature_kl,
    feature_samples,
    kde_pdf,
    kl_divergence,
    scott_bandwidth,
)
from trackdiff.synthetic import random_song


# chord accuracy --------------------------------------------------------------------


def test_ca_identity():
    rng = np.random.default_rng(2)
    songs = [random_song(rng, bars=4) for _ in range(3)]
    tracks = [Track.PIANO, Track.GUITAR]
    assert chord_accuracy(songs, songs, tracks) == 1.0


def test_ca_direct_count():
    ref = [[(0, 0), (5, 0), (7, 0), (0, 0)], [(9, 1), (2, 1), (7, 0), (0, 0)]]
    gen = [[(0, 0), (5, 0), (7, 1), (0, 0)], [(9, 1), (2, 1), (7, 0), (3, 0)]]
    assert chord_accuracy_from_labels(gen, ref) == 0.75


def test_ca_requires_root_and_quality():
    assert chord_accuracy_from_labels([[(0, 0)]], [[(0, 1)]]) == 0.0
    assert chord_accuracy_from_labels([[(0, 0)]], [[(1, 0)]]) == 0.0


def test_ca_with_stub_detector():
    def detector(song):
        return [(n.pitch % 12, 0) for n in sorted(song.notes)][: song.bars] or [(0, 0)] * song.bars

    a = Song([Note(Track.PIANO, 0, 60, 4), Note(Track.PIANO, 16, 62, 4)], 2)
    b = Song([Note(Track.PIANO, 0, 60, 4), Note(Track.PIANO, 16, 64, 4)], 2)
    assert chord_accuracy([a], [b], [Track.PIANO], detector) == 0.5


def test_ca_errors():
    with pytest.raises(ValueError, match="no chords"):
        chord_accuracy([Song([], 0)], [Song([], 0)], [Track.PIANO])
    with pytest.raises(ValueError, match="bar-count mismatch"):
        chord_accuracy([Song([], 2)], [Song([], 3)], [Track.PIANO])
    with pytest.raises(ValueError, match="no chords"):
        chord_accuracy_from_labels([[]], [[]])


# histograms --------------------------------------------------------------------


def test_pitch_class():
    assert feature_samples([Note(Track.PIANO, 0, 64, 2)], "pitch") == [8]
    assert feature_samples([Note(Track.PIANO, 0, 127, 2)], "pitch") == [15]


def test_duration_class_excludes_drums():
    notes = [Note(Track.BASS, 0, 40, 16), Note(Track.DRUM, 0, 36, 0)]
    assert feature_samples(notes, "dur") == [15]
    assert feature_samples(notes, "pitch") == [5]


def test_ioi_within_bar():
    notes = [Note(Track.PIANO, 0, 60, 2), Note(Track.PIANO, 6, 62, 2)]
    assert feature_samples(notes, "ioi") == [6]


def test_ioi_across_bar_boundary_is_dropped():
    notes = [Note(Track.PIANO, 14, 60, 2), Note(Track.PIANO, 18, 62, 2)]
    assert feature_samples(notes, "ioi") == []


def test_ioi_per_track_and_chords():
    notes = [Note(Track.PIANO, 0, 60, 2), Note(Track.PIANO, 0, 64, 2), Note(Track.BASS, 3, 40, 2),
             Note(Track.PIANO, 4, 62, 2)]
    # piano: 0 -> 0 (simultaneous) -> 4; bass alone
    assert sorted(feature_samples(notes, "ioi")) == [0, 4]


def test_histogram_empty_and_unknown():
    assert feature_histogram([], "pitch").count == 0
    with pytest.raises(ValueError):
        feature_histogram([], "velocity")


@given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 127), st.integers(1, 16)), max_size=30), st.randoms())
@settings(max_examples=50, deadline=None)
def test_histograms_permutation_invariant(events, r):
    notes = [Note(Track.GUITAR, o, p, d) for o, p, d in events]
    shuffled = list(notes)
    r.shuffle(shuffled)
    for feature in ("pitch", "dur", "ioi"):
        np.testing.assert_array_equal(feature_histogram(notes, feature).bins, feature_histogram(shuffled, feature).bins)


# kde -----------------------------------------------------------------------------


def kde_oracle(bins, h):
    samples = [c for c in range(16) for _ in range(int(bins[c]))]
    dens = []
    for x in range(16):
        s = 0.0
        for c in samples:
            s += math.exp(-0.5 * ((x - c) / h) ** 2)
        dens.append(s)
    total = sum(dens)
    return np.array([d / total for d in dens])


def test_kde_single_class():
    bins = np.zeros(16)
    bins[5] = 3
    pdf = kde_pdf(bins, bandwidth=0.5)
    assert pdf.argmax() == 5 and abs(pdf.sum() - 1) < 1e-12
    assert all(pdf[i] <= pdf[i - 1] for i in range(6, 16)) and all(pdf[i] <= pdf[i + 1] for i in range(5))


def test_kde_symmetry():
    bins = np.zeros(16)
    bins[4] = bins[11] = 7
    pdf = kde_pdf(bins)
    assert np.abs(pdf - pdf[::-1]).max() < 1e-9


def test_kde_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        bins = rng.integers(0, 6, size=16).astype(float)
        bins[rng.integers(16)] += 1
        h = scott_bandwidth(bins)
        assert np.abs(kde_pdf(bins) - kde_oracle(bins, h)).max() < 1e-12


def test_scott_bandwidth():
    bins = np.zeros(16)
    bins[[2, 6]] = 1  # samples 2 and 6: sigma = sqrt(8), n = 2
    assert scott_bandwidth(bins) == pytest.approx(math.sqrt(8) * 2 ** -0.2)
    one = np.zeros(16)
    one[3] = 40
    assert scott_bandwidth(one) == 0.5


def test_kde_empty():
    with pytest.raises(ValueError, match="empty distribution"):
        kde_pdf(np.zeros(16))


@given(st.lists(st.integers(0, 5), min_size=16, max_size=16).filter(lambda b: sum(b) > 0), st.integers(2, 5))
@settings(max_examples=50, deadline=None)
def test_kde_duplication_invariant_with_fixed_bandwidth(bins, k):
    bins = np.array(bins, dtype=float)
    np.testing.assert_allclose(kde_pdf(bins * k, bandwidth=0.8), kde_pdf(bins, bandwidth=0.8), atol=1e-15)


# kl ------------------------------------------------------------------------------


def test_kl_example():
    assert kl_divergence([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.13081, abs=1e-4)


def test_kl_self_and_gibbs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(16))
        q = rng.dirichlet(np.ones(16) * rng.uniform(0.1, 3))
        assert abs(kl_divergence(p, p)) <= 1e-9
        assert kl_divergence(p, q) >= -1e-9
        if np.abs(p - q).max() > 1e-3:
            assert kl_divergence(p, q) > 0


def test_kl_handles_zero_reference_mass():
    assert math.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))


def test_feature_kl_identical_notes():
    song = random_song(np.random.default_rng(3), bars=4)
    for feature in ("pitch", "dur", "ioi"):
        value, info = feature_kl(song.notes, song.notes, feature)
        assert abs(value) <= 1e-9 and info["generated_count"] == info["reference_count"]
