"""Objective metrics: chord accuracy and KL divergence of feature distributions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .codec import UNITS_PER_BAR, Note, Song, Track
from .harmony import infer_chords

N_CLASSES = 16
FEATURES = ("pitch", "dur", "ioi")
KL_EPS = 1e-9
MIN_BANDWIDTH = 0.5


@dataclass
class FeatureHistogram:
    feature: str
    bins: np.ndarray

    @property
    def count(self) -> float:
        return float(self.bins.sum())


def track_chords(song: Song, track: Track, detector: Callable[[Song], list] = infer_chords) -> list:
    """Chords inferred from a single track in isolation."""
    return detector(Song(song.track_notes(track), song.bars))


def chord_accuracy(generated: Sequence[Song], reference: Sequence[Song], tracks: Sequence[Track],
                   detector: Callable[[Song], list] = infer_chords) -> float:
    """Fraction of (track, bar) chords in generated songs equal to those of the references."""
    if len(generated) != len(reference):
        raise ValueError("generated and reference counts differ")
    hits = total = 0
    for gen, ref in zip(generated, reference):
        if gen.bars != ref.bars:
            raise ValueError(f"bar-count mismatch: {gen.bars} vs {ref.bars}")
        if gen.bars == 0:
            raise ValueError("no chords: zero bars")
        for track in tracks:
            g, r = track_chords(gen, track, detector), track_chords(ref, track, detector)
            hits += sum(a == b for a, b in zip(g, r))
            total += len(r)
    if total == 0:
        raise ValueError("no chords")
    return hits / total


def chord_accuracy_from_labels(generated: Sequence[Sequence], reference: Sequence[Sequence]) -> float:
    """The CA formula over precomputed chord lists, one list per track."""
    if len(generated) != len(reference):
        raise ValueError("track count mismatch")
    hits = total = 0
    for g, r in zip(generated, reference):
        if len(g) != len(r):
            raise ValueError("bar-count mismatch")
        hits += sum(a == b for a, b in zip(g, r))
        total += len(r)
    if total == 0:
        raise ValueError("no chords")
    return hits / total


def feature_samples(notes: Iterable[Note], feature: str) -> list[int]:
    notes = list(notes)
    if feature == "pitch":
        return [n.pitch // 8 for n in notes if n.track != Track.DRUM]
    if feature == "dur":
        return [n.duration - 1 for n in notes if n.track != Track.DRUM]
    if feature == "ioi":
        out = []
        by_track: dict[Track, list[Note]] = {}
        for n in notes:
            by_track.setdefault(n.track, []).append(n)
        for track_notes in by_track.values():
            ordered = sorted(track_notes, key=lambda n: (n.onset, n.pitch))
            for a, b in zip(ordered, ordered[1:]):
                if a.onset // UNITS_PER_BAR == b.onset // UNITS_PER_BAR:
                    out.append(min(max(b.onset - a.onset, 0), N_CLASSES - 1))
        return out
    raise ValueError(f"unknown feature {feature!r}")


def feature_histogram(notes: Iterable[Note], feature: str) -> FeatureHistogram:
    bins = np.zeros(N_CLASSES)
    for c in feature_samples(notes, feature):
        bins[c] += 1
    return FeatureHistogram(feature, bins)


def scott_bandwidth(bins: np.ndarray) -> float:
    """max(0.5, sigma * n^(-1/5)), sigma the (n - 1)-normalized std of the class samples."""
    n = bins.sum()
    if n <= 1:
        return MIN_BANDWIDTH
    grid = np.arange(len(bins))
    mean = (bins * grid).sum() / n
    sigma = np.sqrt((bins * (grid - mean) ** 2).sum() / (n - 1))
    return max(MIN_BANDWIDTH, sigma * n ** (-0.2))


def kde_pdf(hist: FeatureHistogram | np.ndarray, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian KDE of the class samples evaluated on the class grid, normalized to sum 1."""
    bins = np.asarray(hist.bins if isinstance(hist, FeatureHistogram) else hist, dtype=np.float64)
    if bins.sum() <= 0:
        raise ValueError("empty distribution")
    h = scott_bandwidth(bins) if bandwidth is None else bandwidth
    grid = np.arange(len(bins), dtype=np.float64)
    kernel = np.exp(-0.5 * ((grid[:, None] - grid[None, :]) / h) ** 2)
    density = kernel @ bins
    return density / density.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64) + eps
    q = q / q.sum()
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def feature_kl(generated: Iterable[Note], reference: FeatureHistogram | Iterable[Note],
               feature: str) -> tuple[float, dict]:
    gen = feature_histogram(generated, feature)
    ref = reference if isinstance(reference, FeatureHistogram) else feature_histogram(reference, feature)
    info = {
        "generated_count": gen.count,
        "reference_count": ref.count,
        "bandwidth_generated": scott_bandwidth(gen.bins),
        "bandwidth_reference": scott_bandwidth(ref.bins),
    }
    return kl_divergence(kde_pdf(gen), kde_pdf(ref)), info
