"""Random songs for tests and toy experiments."""

from __future__ import annotations

import numpy as np

from .codec import INSTRUMENTS, MAX_DURATION, UNITS_PER_BAR, Note, Song, Track

PITCH_RANGES = {
    Track.BASS: (28, 52),
    Track.DRUM: (35, 60),
    Track.GUITAR: (48, 76),
    Track.PIANO: (40, 88),
    Track.STRING: (48, 84),
    Track.MELODY: (60, 90),
}


def random_song(rng: np.random.Generator, bars: int = 4, tracks=INSTRUMENTS, chords: bool = True,
                density: float = 0.25, max_group: int = 3, pitch_choices: int | None = None) -> Song:
    """Random quantized song.

    Each track places a note group at each unit with probability `density`;
    groups hold 1..max_group notes with possibly different durations.
    `pitch_choices` restricts each track to that many distinct pitches,
    which keeps the vocabulary small.
    """
    L = bars * UNITS_PER_BAR
    notes = []
    for track in tracks:
        lo, hi = PITCH_RANGES[track]
        pool = np.arange(lo, hi + 1)
        if pitch_choices is not None:
            pool = np.sort(rng.choice(pool, size=min(pitch_choices, len(pool)), replace=False))
        for onset in np.flatnonzero(rng.random(L) < density):
            size = int(rng.integers(1, max_group + 1))
            for pitch in rng.choice(pool, size=size):
                duration = 0 if track == Track.DRUM else int(rng.integers(1, MAX_DURATION + 1))
                notes.append(Note(track, int(onset), int(pitch), duration))
    chord_list = [(int(rng.integers(12)), int(rng.integers(8))) for _ in range(bars)] if chords else []
    return Song(sorted(notes), bars, chord_list)
