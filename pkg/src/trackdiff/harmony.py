"""Key normalization and per-bar chord inference."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .codec import N_QUALITIES, N_ROOTS, UNITS_PER_BAR, Note, Song, Track

# Krumhansl-Kessler probe-tone profiles, tonic first
MAJOR_PROFILE = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
MINOR_PROFILE = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

# root-position pitch-class sets, indexed like QUALITY_NAMES
CHORD_INTERVALS = (
    (0, 4, 7),
    (0, 3, 7),
    (0, 3, 6),
    (0, 4, 8),
    (0, 4, 7, 11),
    (0, 3, 7, 10),
    (0, 4, 7, 10),
    (0, 3, 6, 10),
)
N_CHORDS = N_ROOTS * N_QUALITIES


def chord_templates() -> np.ndarray:
    """(96, 12) 0/1 matrix; state index = quality * 12 + root."""
    templates = np.zeros((N_CHORDS, 12))
    for q, intervals in enumerate(CHORD_INTERVALS):
        for root in range(N_ROOTS):
            for iv in intervals:
                templates[q * N_ROOTS + root, (root + iv) % 12] = 1.0
    return templates


def state_to_chord(state: int) -> tuple[int, int]:
    return state % N_ROOTS, state // N_ROOTS


def chord_to_state(root: int, quality: int) -> int:
    return quality * N_ROOTS + root


# --------------------------------------------------------------------------
# key


def pitch_class_histogram(notes: list[Note]) -> np.ndarray:
    hist = np.zeros(12)
    for n in notes:
        if n.track != Track.DRUM:
            hist[n.pitch % 12] += max(n.duration, 1)
    return hist


def key_correlations(hist: np.ndarray) -> np.ndarray:
    """Pearson correlation with the 24 keys: 0-11 major tonics, 12-23 minor tonics."""
    out = np.zeros(24)
    for tonic in range(12):
        out[tonic] = np.corrcoef(hist, np.roll(MAJOR_PROFILE, tonic))[0, 1]
        out[12 + tonic] = np.corrcoef(hist, np.roll(MINOR_PROFILE, tonic))[0, 1]
    return out


def estimate_key(notes: list[Note]) -> tuple[int, bool] | None:
    """(tonic, is_minor) of the best-correlated key, or None without pitched notes."""
    hist = pitch_class_histogram(notes)
    if hist.sum() == 0:
        return None
    corr = np.nan_to_num(key_correlations(hist), nan=-np.inf)
    best = int(np.argmax(corr))
    return best % 12, best >= 12


def shift_to_reference(tonic: int, minor: bool) -> int:
    """Smallest shift in [-6, 5] taking the tonic to C (major) or A (minor)."""
    target = 9 if minor else 0
    shift = (target - tonic) % 12
    return shift - 12 if shift >= 6 else shift


def transpose(song: Song, shift: int) -> Song:
    notes = []
    for n in song.notes:
        if n.track == Track.DRUM:
            notes.append(n)
            continue
        p = n.pitch + shift
        if not 0 <= p <= 127:
            raise ValueError(f"transposition by {shift} moves pitch {n.pitch} out of range")
        notes.append(replace(n, pitch=p))
    chords = [((r + shift) % 12, q) for r, q in song.chords]
    return Song(notes, song.bars, chords, song.key_shift + shift)


def normalize_key(song: Song) -> Song:
    """Transpose to C major / A minor; the applied shift accumulates in key_shift."""
    key = estimate_key(song.notes)
    if key is None:
        return Song(list(song.notes), song.bars, list(song.chords), song.key_shift)
    return transpose(song, shift_to_reference(*key))


def denormalize_key(song: Song) -> Song:
    out = transpose(song, -song.key_shift)
    out.key_shift = 0
    return out


# --------------------------------------------------------------------------
# chords


@dataclass(frozen=True)
class ChordModel:
    p_stay: float = 0.5
    out_penalty: float = 1.0
    missing_penalty: float = 0.1
    concentration: float = 10.0


def bar_histograms(song: Song) -> np.ndarray:
    """(bars, 12) duration-weighted pitch-class mass per bar, drums excluded."""
    hist = np.zeros((song.bars, 12))
    for n in song.notes:
        if n.track == Track.DRUM:
            continue
        bar = n.onset // UNITS_PER_BAR
        if bar < song.bars:
            hist[bar, n.pitch % 12] += n.duration
    return hist


def emission_scores(hist: np.ndarray, model: ChordModel = ChordModel()) -> np.ndarray:
    """(bars, 96) log-scores: in-chord mass minus out-of-chord mass, per unit bar mass.

    A small penalty for template tones absent from the bar keeps triads
    ahead of their seventh-chord supersets.
    """
    templates = chord_templates()
    total = hist.sum(axis=1, keepdims=True)
    frac = np.divide(hist, total, out=np.zeros_like(hist), where=total > 0)
    inside = frac @ templates.T
    outside = 1.0 - inside
    present = (frac > 0).astype(float)
    missing = ((1.0 - present) @ templates.T) / templates.sum(axis=1)
    score = inside - model.out_penalty * outside - model.missing_penalty * missing
    # rounding makes exact template ties resolve by state order, not float noise
    return np.round(model.concentration * score, 9)


def transition_scores(model: ChordModel = ChordModel()) -> np.ndarray:
    trans = np.full((N_CHORDS, N_CHORDS), np.log((1 - model.p_stay) / (N_CHORDS - 1)))
    np.fill_diagonal(trans, np.log(model.p_stay))
    return trans


def viterbi(emissions: np.ndarray, transitions: np.ndarray) -> list[int]:
    n, s = emissions.shape
    score = emissions[0].copy()
    back = np.zeros((n, s), dtype=np.int64)
    for i in range(1, n):
        cand = score[:, None] + transitions
        back[i] = np.argmax(cand, axis=0)
        score = cand[back[i], np.arange(s)] + emissions[i]
    path = [int(np.argmax(score))]
    for i in range(n - 1, 0, -1):
        path.append(int(back[i, path[-1]]))
    return path[::-1]


def path_score(path: list[int], emissions: np.ndarray, transitions: np.ndarray) -> float:
    total = sum(emissions[i, s] for i, s in enumerate(path))
    total += sum(transitions[a, b] for a, b in zip(path, path[1:]))
    return float(total)


def infer_chords(song: Song, model: ChordModel = ChordModel()) -> list[tuple[int, int]]:
    """One (root, quality) per bar via Viterbi over the non-empty bars.

    Empty bars repeat the previous bar's chord; leading empty bars are C major.
    """
    if song.bars < 1:
        raise ValueError("empty song")
    hist = bar_histograms(song)
    active = np.flatnonzero(hist.sum(axis=1) > 0)
    states = [chord_to_state(0, 0)] * song.bars
    if len(active):
        path = viterbi(emission_scores(hist[active], model), transition_scores(model))
        for bar, state in zip(active, path):
            states[bar] = state
        for bar in range(1, song.bars):
            if hist[bar].sum() == 0:
                states[bar] = states[bar - 1]
    return [state_to_chord(s) for s in states]
