"""Preprocessing pipeline: quantize, assign roles, filter, normalize, add chords, segment."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .codec import MAX_DURATION, UNITS_PER_BAR, Note, Song, Track
from .harmony import ChordModel, infer_chords, normalize_key
from .smf import RawNote, RawSong, read_smf

log = logging.getLogger(__name__)

DRUM_CHANNEL = 9
MONOPHONY_THRESHOLD = 0.9
MIN_NOTES = 16
MIN_ROLES = 2

# General MIDI program ranges (0-based, inclusive)
PROGRAM_ROLES = (
    (range(0, 8), Track.PIANO),
    (range(16, 24), Track.PIANO),
    (range(24, 32), Track.GUITAR),
    (range(32, 40), Track.BASS),
    (range(40, 52), Track.STRING),
)


class FilteredOut(ValueError):
    """Raised when a song fails one of the corpus filters."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def quantize(raw: RawSong) -> RawSong:
    """Snap ticks to 16th-note units (round half to even); durations land in [1, 16]."""
    if raw.ticks_per_beat <= 0:
        raise ValueError("ticks_per_beat must be positive")
    scale = 4 / raw.ticks_per_beat
    notes = []
    for n in raw.notes:
        onset = round(n.onset * scale)
        duration = min(max(round(n.duration * scale), 1), MAX_DURATION)
        notes.append(RawNote(n.track, n.channel, n.program, onset, duration, n.pitch))
    return RawSong(notes, 4, list(raw.tempos))


def program_role(program: int) -> Track | None:
    for programs, role in PROGRAM_ROLES:
        if program in programs:
            return role
    return None


def monophony_ratio(notes: list[RawNote]) -> float:
    """Fraction of notes that overlap no other note of the same part."""
    if not notes:
        return 0.0
    ordered = sorted(notes, key=lambda n: (n.onset, n.pitch))
    overlapping = set()
    for i, a in enumerate(ordered):
        for j in range(i + 1, len(ordered)):
            b = ordered[j]
            if b.onset >= a.onset + a.duration:
                break
            overlapping.update((i, j))
    return 1 - len(overlapping) / len(ordered)


def classify_tracks(raw: RawSong) -> dict[tuple[int, int], Track]:
    """Assign a role to every (track, channel) part of a quantized song.

    Parts outside the mapped program ranges are dropped (absent from the
    result).
    """
    parts: dict[tuple[int, int], list[RawNote]] = {}
    for n in raw.notes:
        parts.setdefault((n.track, n.channel), []).append(n)
    roles: dict[tuple[int, int], Track] = {}
    candidates = []
    for key, notes in sorted(parts.items()):
        if key[1] == DRUM_CHANNEL:
            roles[key] = Track.DRUM
            continue
        if monophony_ratio(notes) >= MONOPHONY_THRESHOLD:
            mean_pitch = sum(n.pitch for n in notes) / len(notes)
            candidates.append((-mean_pitch, key))
    if not candidates:
        raise FilteredOut("no melody")
    melody = min(candidates)[1]
    for key, notes in sorted(parts.items()):
        if key in roles:
            continue
        if key == melody:
            roles[key] = Track.MELODY
        else:
            role = program_role(notes[0].program)
            if role is not None:
                roles[key] = role
    return roles


def assign_roles(raw: RawSong, roles: dict[tuple[int, int], Track]) -> Song:
    """Build a Song from a quantized RawSong; parts sharing a role merge."""
    notes = []
    for n in raw.notes:
        role = roles.get((n.track, n.channel))
        if role is None:
            continue
        duration = 0 if role == Track.DRUM else n.duration
        notes.append(Note(role, n.onset, n.pitch, duration))
    bars = max((n.onset // UNITS_PER_BAR + 1 for n in notes), default=0)
    return Song(sorted(set(notes)), bars)


def check_filters(song: Song, tempos: list[int] | None = None) -> None:
    if len(set(tempos or [])) > 1:
        raise FilteredOut("multiple tempos")
    if Track.MELODY not in song.tracks():
        raise FilteredOut("no melody")
    if len(song.notes) < MIN_NOTES:
        raise FilteredOut("too few notes")
    roles = {n.track for n in song.notes}
    if len(roles) < MIN_ROLES:
        raise FilteredOut("too few tracks")


def segment(song: Song, max_bars: int = 32) -> list[Song]:
    """Split into consecutive windows of at most max_bars bars.

    Notes are truncated at window ends so nothing sounds past a fragment.
    """
    if max_bars < 1:
        raise ValueError("max_bars must be positive")
    fragments = []
    for start in range(0, song.bars, max_bars):
        bars = min(max_bars, song.bars - start)
        lo, hi = start * UNITS_PER_BAR, (start + bars) * UNITS_PER_BAR
        notes = []
        for n in song.notes:
            if lo <= n.onset < hi:
                onset = n.onset - lo
                duration = n.duration if n.track == Track.DRUM else min(n.duration, hi - n.onset)
                notes.append(Note(n.track, onset, n.pitch, duration))
        chords = song.chords[start : start + bars] if song.chords else []
        fragments.append(Song(notes, bars, chords, song.key_shift))
    return fragments


# --------------------------------------------------------------------------
# interchange note-list format


def read_note_list(text: str) -> Song:
    """Parse `note <role> <onset> <pitch> <duration>` / `chord <bar> <root> <quality>` lines."""
    notes = []
    chords: dict[int, tuple[int, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "note" and len(parts) == 5:
                role = Track.parse(parts[1])
                onset, pitch, duration = (int(p) for p in parts[2:])
                notes.append(Note(role, onset, pitch, duration))
            elif parts[0] == "chord" and len(parts) == 4:
                bar, root, quality = (int(p) for p in parts[1:])
                chords[bar] = (root, quality)
            else:
                raise ValueError("unrecognized line")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    bars = max((n.onset // UNITS_PER_BAR + 1 for n in notes), default=0)
    bars = max(bars, max(chords, default=-1) + 1)
    chord_list = []
    if chords:
        if sorted(chords) != list(range(bars)):
            raise ValueError("chord lines must cover every bar exactly once")
        chord_list = [chords[b] for b in range(bars)]
    return Song(sorted(notes), bars, chord_list)


def write_note_list(song: Song) -> str:
    lines = [f"note {n.track.label} {n.onset} {n.pitch} {n.duration}" for n in sorted(song.notes)]
    lines += [f"chord {bar} {r} {q}" for bar, (r, q) in enumerate(song.chords)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# pipeline

SMF_SUFFIXES = {".mid", ".midi", ".smf"}
NOTE_LIST_SUFFIXES = {".txt", ".notes"}


def load_song(path: Path) -> tuple[Song, list[int]]:
    """Read a file into a quantized, role-assigned Song plus its tempo events."""
    if path.suffix.lower() in SMF_SUFFIXES:
        raw = quantize(read_smf(path.read_bytes()))
        return assign_roles(raw, classify_tracks(raw)), raw.tempos
    return read_note_list(path.read_text(encoding="utf-8")), []


def preprocess(song: Song, tempos: list[int] | None = None, max_bars: int = 32,
               chord_model: ChordModel = ChordModel()) -> list[Song]:
    check_filters(song, tempos)
    song = normalize_key(song)
    if not song.chords:
        song = Song(song.notes, song.bars, infer_chords(song, chord_model), song.key_shift)
    return segment(song, max_bars)


def corpus_files(corpus_dir: Path) -> list[Path]:
    suffixes = SMF_SUFFIXES | NOTE_LIST_SUFFIXES
    return sorted(p for p in Path(corpus_dir).rglob("*") if p.is_file() and p.suffix.lower() in suffixes)


@dataclass
class IngestReport:
    files: int = 0
    kept: int = 0
    fragments: int = 0
    filtered: Counter = field(default_factory=Counter)

    def as_dict(self) -> dict:
        return {
            "files": self.files,
            "kept": self.kept,
            "fragments": self.fragments,
            "filtered": dict(sorted(self.filtered.items())),
        }


def ingest_corpus(corpus_dir: Path, max_bars: int = 32) -> tuple[list[tuple[Path, int, Song]], IngestReport]:
    """Run the pipeline over every file; results ordered by (path, fragment)."""
    report = IngestReport()
    out = []
    for path in corpus_files(corpus_dir):
        report.files += 1
        try:
            song, tempos = load_song(path)
            fragments = preprocess(song, tempos, max_bars)
        except FilteredOut as exc:
            report.filtered[exc.reason] += 1
            continue
        except ValueError as exc:
            log.warning("skipping %s: %s", path, exc)
            report.filtered["unreadable"] += 1
            continue
        report.kept += 1
        for index, fragment in enumerate(fragments):
            out.append((path, index, fragment))
            report.fragments += 1
    return out, report
