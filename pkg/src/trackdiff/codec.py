"""Token grid representation of multi-track music and its vocabulary.

A score grid has 14 rows: a pitch row and a duration row for each of the
seven tracks (chord first, then the six instruments) and one column per
16th-note time unit.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np


class Track(enum.IntEnum):
    CHORD = 0
    BASS = 1
    DRUM = 2
    GUITAR = 3
    PIANO = 4
    STRING = 5
    MELODY = 6

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "Track":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown track {name!r}") from None


INSTRUMENTS = tuple(Track)[1:]
N_ROWS = 2 * len(Track)
MAX_L = 512
MAX_DURATION = 16
UNITS_PER_BAR = 16

PAD, MASK, EMPTY = 0, 1, 2
DURATION_OFFSET = 3
N_DURATIONS = MAX_DURATION + 1
CHORD_OFFSET = DURATION_OFFSET + N_DURATIONS
N_ROOTS = 12
N_QUALITIES = 8
PITCH_OFFSET = CHORD_OFFSET + N_ROOTS + N_QUALITIES  # 40 fixed tokens

ROOT_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
QUALITY_NAMES = (
    "major",
    "minor",
    "diminished",
    "augmented",
    "major7",
    "minor7",
    "dominant",
    "half-diminished",
)

# values of the role line in score files
ROLE_VALUES = ("src", "tgt", "inv", "empty")


def pitch_row(track: Track) -> int:
    return 2 * int(track)


def duration_row(track: Track) -> int:
    return 2 * int(track) + 1


@dataclass(frozen=True, order=True)
class Note:
    """One quantized note. Drum notes carry duration 0."""

    track: Track
    onset: int
    pitch: int
    duration: int

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError("negative onset")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} out of range")
        if self.track == Track.CHORD:
            raise ValueError("chord track holds no notes")
        if self.track == Track.DRUM:
            if self.duration != 0:
                raise ValueError("drum notes must have duration 0")
        elif not 1 <= self.duration <= MAX_DURATION:
            raise ValueError(f"duration {self.duration} outside [1, {MAX_DURATION}]")


@dataclass
class Song:
    notes: list[Note]
    bars: int
    chords: list[tuple[int, int]] = field(default_factory=list)
    key_shift: int = 0

    def __post_init__(self):
        if self.chords and len(self.chords) != self.bars:
            raise ValueError("one chord per bar required")
        for root, quality in self.chords:
            if not (0 <= root < N_ROOTS and 0 <= quality < N_QUALITIES):
                raise ValueError(f"invalid chord ({root}, {quality})")

    @property
    def length(self) -> int:
        return self.bars * UNITS_PER_BAR

    def tracks(self) -> set[Track]:
        present = {n.track for n in self.notes}
        if self.chords:
            present.add(Track.CHORD)
        return present

    def track_notes(self, track: Track) -> list[Note]:
        return [n for n in self.notes if n.track == track]


def merge_group(notes: Sequence[Note]) -> tuple[tuple[int, ...], int]:
    """Collapse simultaneous same-track notes into (pitch tuple, duration).

    The duration is the most frequent one; ties go to the largest.
    """
    if not notes:
        raise ValueError("inconsistent group: empty")
    track, onset = notes[0].track, notes[0].onset
    if any(n.track != track or n.onset != onset for n in notes):
        raise ValueError("inconsistent group: mixed tracks or onsets")
    pitches = tuple(sorted({n.pitch for n in notes}))
    counts = Counter(n.duration for n in notes)
    duration = max(counts, key=lambda d: (counts[d], d))
    return pitches, duration


def group_notes(notes: Iterable[Note]) -> dict[tuple[Track, int], tuple[tuple[int, ...], int]]:
    groups: dict[tuple[Track, int], list[Note]] = {}
    for n in notes:
        groups.setdefault((n.track, n.onset), []).append(n)
    return {key: merge_group(g) for key, g in sorted(groups.items())}


def canonicalize(song: Song) -> Song:
    notes = []
    for (track, onset), (pitches, duration) in group_notes(song.notes).items():
        notes.extend(Note(track, onset, p, duration) for p in pitches)
    return Song(sorted(notes), song.bars, list(song.chords), song.key_shift)


def count_combinations(k: int) -> int:
    """Number of source/target/empty assignments of k tracks with >= 1 target."""
    if k < 1:
        raise ValueError("no tracks")
    return 3**k - 2**k


def enumerate_combinations(k: int) -> list[tuple[str, ...]]:
    return [c for c in product(("src", "tgt", "empty"), repeat=k) if "tgt" in c]


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Contiguous token id space.

    Ids 0-2 are PAD, MASK, EMPTY; then 17 duration tokens (values 0-16),
    12 chord roots, 8 chord qualities, and one pitch table per instrument
    track in canonical order.
    """

    VERSION = 1

    def __init__(self, tables: dict[Track, Sequence[tuple[int, ...]]]):
        self.tables: dict[Track, list[tuple[int, ...]]] = {}
        self._offsets: dict[Track, int] = {}
        self._lookup: dict[Track, dict[tuple[int, ...], int]] = {}
        offset = PITCH_OFFSET
        for track in INSTRUMENTS:
            entries = [tuple(int(p) for p in t) for t in tables.get(track, ())]
            if len(set(entries)) != len(entries):
                raise ValueError(f"duplicate pitch tuple in {track.label} table")
            self.tables[track] = entries
            self._offsets[track] = offset
            self._lookup[track] = {t: offset + i for i, t in enumerate(entries)}
            offset += len(entries)
        self.K = offset
        self._classes = self._build_classes()

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tables == other.tables

    def __repr__(self):
        sizes = ", ".join(f"{t.label}={len(v)}" for t, v in self.tables.items())
        return f"Vocabulary(K={self.K}, {sizes})"

    # token construction

    def pitch_token(self, track: Track, pitches: tuple[int, ...]) -> int:
        try:
            return self._lookup[track][tuple(pitches)]
        except KeyError:
            raise KeyError(f"pitch tuple {pitches} not in {track.label} vocabulary") from None

    def pitches(self, token: int) -> tuple[Track, tuple[int, ...]]:
        for track in INSTRUMENTS:
            start = self._offsets[track]
            if start <= token < start + len(self.tables[track]):
                return track, self.tables[track][token - start]
        raise ValueError(f"token {token} is not a pitch token")

    @staticmethod
    def duration_token(duration: int) -> int:
        if not 0 <= duration <= MAX_DURATION:
            raise ValueError(f"duration {duration} out of range")
        return DURATION_OFFSET + duration

    @staticmethod
    def root_token(root: int) -> int:
        return CHORD_OFFSET + root

    @staticmethod
    def quality_token(quality: int) -> int:
        return CHORD_OFFSET + N_ROOTS + quality

    # classification

    def _build_classes(self) -> list[str]:
        classes = ["pad", "mask", "empty"]
        classes += ["duration"] * N_DURATIONS
        classes += ["root"] * N_ROOTS + ["quality"] * N_QUALITIES
        for track in INSTRUMENTS:
            classes += [f"pitch:{track.label}"] * len(self.tables[track])
        return classes

    def token_class(self, token: int) -> str:
        if not 0 <= token < self.K:
            raise ValueError(f"token {token} outside [0, {self.K})")
        return self._classes[token]

    def row_support(self) -> np.ndarray:
        """Boolean (14, K) array of clean tokens each row may hold."""
        support = np.zeros((N_ROWS, self.K), dtype=bool)
        support[pitch_row(Track.CHORD), CHORD_OFFSET : CHORD_OFFSET + N_ROOTS] = True
        support[duration_row(Track.CHORD), CHORD_OFFSET + N_ROOTS : PITCH_OFFSET] = True
        for track in INSTRUMENTS:
            pr, dr = pitch_row(track), duration_row(track)
            start = self._offsets[track]
            support[pr, PAD] = True
            support[pr, start : start + len(self.tables[track])] = True
            support[dr, PAD] = True
            if track == Track.DRUM:
                support[dr, DURATION_OFFSET] = True
            else:
                support[dr, DURATION_OFFSET + 1 : DURATION_OFFSET + N_DURATIONS] = True
        return support

    def counts(self) -> dict[str, int]:
        return {t.label: len(v) for t, v in self.tables.items()}

    # persistence

    def to_json(self) -> str:
        doc = {
            "version": self.VERSION,
            "duration_offset": DURATION_OFFSET,
            "chord_offset": CHORD_OFFSET,
            "tracks": {t.label: [list(p) for p in v] for t, v in self.tables.items()},
            "K": self.K,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        if doc.get("version") != cls.VERSION:
            raise ValueError(f"unsupported vocabulary version {doc.get('version')}")
        if doc["duration_offset"] != DURATION_OFFSET or doc["chord_offset"] != CHORD_OFFSET:
            raise ValueError("vocabulary layout mismatch")
        tables = {Track.parse(name): [tuple(p) for p in v] for name, v in doc["tracks"].items()}
        vocab = cls(tables)
        if vocab.K != doc["K"]:
            raise ValueError(f"vocabulary declares K={doc['K']} but tables give {vocab.K}")
        return vocab


def build_vocabulary(corpus: Iterable[Song]) -> Vocabulary:
    """Rank each track's pitch tuples by frequency, ties by tuple order."""
    counts: dict[Track, Counter] = {t: Counter() for t in INSTRUMENTS}
    for song in corpus:
        for (track, _), (pitches, _) in group_notes(song.notes).items():
            counts[track][pitches] += 1
    if not any(counts.values()):
        raise ValueError("empty corpus")
    tables = {t: sorted(c, key=lambda p: (-c[p], p)) for t, c in counts.items()}
    return Vocabulary(tables)


# --------------------------------------------------------------------------
# score grid


@dataclass
class ScoreGrid:
    """14 x L token grid plus a role label per track."""

    grid: np.ndarray
    roles: dict[Track, str]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.ndim != 2 or self.grid.shape[0] != N_ROWS:
            raise ValueError(f"grid must have {N_ROWS} rows")
        if not 1 <= self.grid.shape[1] <= MAX_L:
            raise ValueError(f"width must lie in [1, {MAX_L}]")
        roles = {t: "empty" for t in Track}
        roles.update(self.roles)
        if any(r not in ROLE_VALUES for r in roles.values()):
            raise ValueError(f"roles must be one of {ROLE_VALUES}")
        self.roles = roles

    @property
    def L(self) -> int:
        return self.grid.shape[1]

    def copy(self) -> "ScoreGrid":
        return ScoreGrid(self.grid.copy(), dict(self.roles))

    def __eq__(self, other):
        return (
            isinstance(other, ScoreGrid)
            and self.roles == other.roles
            and np.array_equal(self.grid, other.grid)
        )

    def involved(self) -> list[Track]:
        return [t for t in Track if self.roles[t] != "empty"]

    def rows(self, track: Track) -> slice:
        return slice(2 * int(track), 2 * int(track) + 2)


def encode(song: Song, vocab: Vocabulary, L: int | None = None) -> ScoreGrid:
    L = song.length if L is None else L
    if not 1 <= L <= MAX_L:
        raise ValueError(f"width {L} out of range")
    grid = np.full((N_ROWS, L), EMPTY, dtype=np.int64)
    roles: dict[Track, str] = {}
    groups = group_notes(song.notes)
    present = {track for track, _ in groups}
    for track in INSTRUMENTS:
        if track in present:
            grid[pitch_row(track)] = PAD
            grid[duration_row(track)] = PAD
            roles[track] = "inv"
    for (track, onset), (pitches, duration) in groups.items():
        if onset >= L:
            raise ValueError(f"out of range: {track.label} onset {onset} >= L={L}")
        try:
            token = vocab.pitch_token(track, pitches)
        except KeyError:
            raise ValueError(
                f"out-of-vocabulary pitch tuple {pitches} in {track.label} at onset {onset}"
            ) from None
        grid[pitch_row(track), onset] = token
        grid[duration_row(track), onset] = vocab.duration_token(duration)
    if song.chords:
        for col in range(L):
            root, quality = song.chords[min(col // UNITS_PER_BAR, len(song.chords) - 1)]
            grid[0, col] = vocab.root_token(root)
            grid[1, col] = vocab.quality_token(quality)
        roles[Track.CHORD] = "inv"
    return ScoreGrid(grid, roles)


def decode(score: ScoreGrid, vocab: Vocabulary, strict: bool = True, key_shift: int = 0) -> Song:
    """Inverse of encode.

    With strict=False a pitch cell paired with PAD (or the reverse) is
    dropped instead of raising, which is what evaluation of model output
    needs.
    """
    grid = score.grid
    if (grid == MASK).any():
        raise ValueError("undenoised score: MASK tokens present")
    if grid.max(initial=0) >= vocab.K:
        raise ValueError(f"token id >= K={vocab.K}")
    L = score.L
    bars = -(-L // UNITS_PER_BAR)
    notes: list[Note] = []
    for track in INSTRUMENTS:
        prow, drow = grid[pitch_row(track)], grid[duration_row(track)]
        for col in np.flatnonzero((prow != PAD) & (prow != EMPTY) | (drow != PAD) & (drow != EMPTY)):
            p_tok, d_tok = int(prow[col]), int(drow[col])
            ok_pitch = vocab.token_class(p_tok) == f"pitch:{track.label}"
            ok_dur = vocab.token_class(d_tok) == "duration"
            if not (ok_pitch and ok_dur):
                if strict:
                    raise ValueError(f"malformed pair in {track.label} at column {col}")
                continue
            duration = d_tok - DURATION_OFFSET
            if (track == Track.DRUM) != (duration == 0):
                if strict:
                    raise ValueError(f"malformed pair in {track.label} at column {col}")
                continue
            _, pitches = vocab.pitches(p_tok)
            for p in pitches:
                if 0 <= p + key_shift <= 127:
                    notes.append(Note(track, int(col), p + key_shift, duration))
    chords: list[tuple[int, int]] = []
    if score.roles[Track.CHORD] != "empty":
        for bar in range(bars):
            col = bar * UNITS_PER_BAR
            r_tok, q_tok = int(grid[0, col]), int(grid[1, col])
            if vocab.token_class(r_tok) != "root" or vocab.token_class(q_tok) != "quality":
                if strict:
                    raise ValueError(f"malformed chord at bar {bar}")
                r_tok, q_tok = vocab.root_token(0), vocab.quality_token(0)
            root = (r_tok - CHORD_OFFSET + key_shift) % N_ROOTS
            chords.append((root, q_tok - CHORD_OFFSET - N_ROOTS))
    return Song(sorted(notes), bars, chords)


# --------------------------------------------------------------------------
# score file format

MAGIC = "GETSCORE v1"


def write_score(score: ScoreGrid, K: int) -> bytes:
    if score.grid.max(initial=0) >= K or score.grid.min(initial=0) < 0:
        raise ValueError("token id outside [0, K)")
    lines = [MAGIC, f"K={K} L={score.L} rows={N_ROWS}"]
    lines.append(" ".join(f"{t.label}={score.roles[t]}" for t in Track))
    lines.extend(" ".join(str(int(v)) for v in row) for row in score.grid)
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_score(data: bytes) -> tuple[ScoreGrid, int]:
    """Parse a score file; returns the grid and its declared K."""
    lines = data.decode("utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError("bad magic")
    if len(lines) < 3:
        raise ValueError("unexpected end of score file")
    try:
        header = dict(kv.split("=", 1) for kv in lines[1].split())
        K, L, rows = int(header["K"]), int(header["L"]), int(header["rows"])
    except (KeyError, ValueError):
        raise ValueError("malformed header line") from None
    if rows != N_ROWS:
        raise ValueError(f"row count {rows} != {N_ROWS}")
    roles = {}
    for kv in lines[2].split():
        name, _, value = kv.partition("=")
        roles[Track.parse(name)] = value
    body = lines[3:]
    if len(body) < N_ROWS:
        raise ValueError("unexpected end of score file")
    if len(body) > N_ROWS:
        raise ValueError(f"row count: found {len(body)} grid rows")
    grid = np.zeros((N_ROWS, L), dtype=np.int64)
    for r, line in enumerate(body):
        values = line.split()
        if len(values) != L:
            if r == len(body) - 1 and len(values) < L:
                raise ValueError("unexpected end of score file")
            raise ValueError(f"row {r} has {len(values)} columns, expected {L}")
        grid[r] = [int(v) for v in values]
    if grid.max(initial=0) >= K or grid.min(initial=0) < 0:
        raise ValueError(f"token id outside [0, K={K})")
    return ScoreGrid(grid, roles), K
