from itertools import product

import numpy as np
import pytest

from trackdiff.codec import Note, Song, Track
from trackdiff.harmony import (
    CHORD_INTERVALS,
    MAJOR_PROFILE,
    ChordModel,
    denormalize_key,
    emission_scores,
    infer_chords,
    normalize_key,
    path_score,
    transition_scores,
    transpose,
    viterbi,
)
from trackdiff.ingest import (
    FilteredOut,
    assign_roles,
    check_filters,
    classify_tracks,
    ingest_corpus,
    quantize,
    read_note_list,
    segment,
    write_note_list,
)
from trackdiff.smf import MidiError, RawNote, RawSong, read_smf, write_smf

# one note: note_on C4 at tick 0, note_off at tick 480, division 480
ONE_NOTE_SMF = bytes.fromhex(
    "4d546864 00000006 0000 0001 01e0"
    "4d54726b 0000000d"
    "00 90 3c 40"
    "83 60 80 3c 00"
    "00 ff 2f 00".replace(" ", "")
)


def test_read_smf_one_note():
    raw = read_smf(ONE_NOTE_SMF)
    assert raw.ticks_per_beat == 480
    assert raw.notes == [RawNote(0, 0, 0, 0, 480, 60)]
    q = quantize(raw)
    assert (q.notes[0].onset, q.notes[0].duration) == (0, 4)


def test_read_smf_no_notes():
    data = bytes.fromhex("4d546864000000060000000101e0" "4d54726b00000004" "00ff2f00")
    assert read_smf(data).notes == []


def test_read_smf_errors():
    with pytest.raises(MidiError, match="bad header"):
        read_smf(b"RIFF" + ONE_NOTE_SMF[4:])
    fmt2 = bytearray(ONE_NOTE_SMF)
    fmt2[9] = 2
    with pytest.raises(MidiError, match="format 2"):
        read_smf(bytes(fmt2))
    dangling = bytes.fromhex("4d546864000000060000000101e0" "4d54726b00000008" "00903c40" "00ff2f00")
    with pytest.raises(MidiError, match="unpaired note_on"):
        read_smf(dangling)
    smpte = bytearray(ONE_NOTE_SMF)
    smpte[12] = 0xE7
    with pytest.raises(MidiError, match="SMPTE"):
        read_smf(bytes(smpte))


def test_velocity_zero_is_note_off_and_running_status():
    # running status: 90 3c 40, then (status omitted) 3c 00 as note off
    body = bytes.fromhex("00903c40" "83603c00" "00ff2f00")
    data = bytes.fromhex("4d546864000000060000000101e0") + b"MTrk" + len(body).to_bytes(4, "big") + body
    assert read_smf(data).notes == [RawNote(0, 0, 0, 0, 480, 60)]


def test_write_smf_roundtrip():
    events = [(0, 0, 480, 60, 90), (0, 480, 240, 64, 90), (9, 0, 120, 36, 100)]
    raw = read_smf(write_smf(events, 480, {0: 33}))
    got = sorted((n.channel, n.onset, n.duration, n.pitch, n.program) for n in raw.notes)
    assert got == [(0, 0, 480, 60, 33), (0, 480, 240, 64, 33), (9, 0, 120, 36, 0)]
    assert raw.tempos == [500000]


# quantize --------------------------------------------------------------------


def raw(notes, tpb=480):
    return RawSong([RawNote(0, 0, 0, o, d, 60) for o, d in notes], tpb)


def test_quantize_rules():
    q = quantize(raw([(480, 480), (239, 30 * 120), (0, 1), (60, 480), (180, 480)]))
    onsets = [n.onset for n in q.notes]
    durations = [n.duration for n in q.notes]
    assert onsets == [4, 2, 0, 0, 2]  # 0.5 -> 0 and 1.5 -> 2 (half to even)
    assert durations == [4, 16, 1, 4, 4]


def test_quantize_idempotent():
    q = quantize(raw([(0, 100), (333, 777), (1000, 5)]))
    assert quantize(q).notes == q.notes


# classify -------------------------------------------------------------------


def part(track, channel, program, notes):
    return [RawNote(track, channel, program, o, d, p) for o, d, p in notes]


def test_classify_roles():
    melody = part(0, 0, 73, [(i * 4, 4, 80 + i % 3) for i in range(8)])
    bass = part(1, 2, 33, [(i * 4, 4, 40) for i in range(8)])
    drums = part(2, 9, 0, [(i * 2, 1, 36) for i in range(8)])
    roles = classify_tracks(RawSong(melody + bass + drums, 4))
    assert roles == {(0, 0): Track.MELODY, (1, 2): Track.BASS, (2, 9): Track.DRUM}


def test_classify_merges_same_role():
    melody = part(0, 0, 73, [(i * 4, 4, 84) for i in range(8)])
    piano_a = part(1, 1, 0, [(0, 4, 60), (0, 4, 64), (0, 4, 67)])
    piano_b = part(2, 3, 17, [(8, 4, 48), (8, 4, 52), (8, 4, 55)])
    song_raw = RawSong(melody + piano_a + piano_b, 4)
    roles = classify_tracks(song_raw)
    assert roles[(1, 1)] == roles[(2, 3)] == Track.PIANO
    song = assign_roles(song_raw, roles)
    assert len(song.track_notes(Track.PIANO)) == 6


def test_classify_no_melody():
    chords = part(0, 0, 0, [(0, 8, p) for p in (60, 64, 67)])
    with pytest.raises(FilteredOut, match="no melody"):
        classify_tracks(RawSong(chords, 4))


def test_filters():
    notes = [Note(Track.MELODY, i, 72, 1) for i in range(16)] + [Note(Track.BASS, 0, 40, 4)]
    check_filters(Song(notes, 1))
    with pytest.raises(FilteredOut, match="too few notes"):
        check_filters(Song(notes[:10] + notes[-1:], 1))
    with pytest.raises(FilteredOut, match="too few tracks"):
        check_filters(Song(notes[:16], 1))
    with pytest.raises(FilteredOut, match="multiple tempos"):
        check_filters(Song(notes, 1), tempos=[500000, 400000])
    with pytest.raises(FilteredOut, match="no melody"):
        check_filters(Song([Note(Track.BASS, i, 40, 1) for i in range(16)] + [Note(Track.PIANO, 0, 60, 1)], 1))


# key normalization -----------------------------------------------------------

C_MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)


def profile_song(offset=0):
    notes = []
    onset = 0
    for pc in C_MAJOR_SCALE:
        weight = int(round(MAJOR_PROFILE[pc] * 2))
        for _ in range(weight):
            notes.append(Note(Track.PIANO, onset, 60 + pc + offset, 1))
            onset += 1
    return Song(notes, -(-onset // 16))


def brute_force_key_shift(song):
    hist = np.zeros(12)
    for n in song.notes:
        hist[n.pitch % 12] += n.duration
    best, best_corr = None, -np.inf
    for minor, profile in ((False, MAJOR_PROFILE), (True, None)):
        from trackdiff.harmony import MINOR_PROFILE

        prof = MINOR_PROFILE if minor else MAJOR_PROFILE
        for tonic in range(12):
            c = np.corrcoef(hist, np.roll(prof, tonic))[0, 1]
            if c > best_corr:
                best, best_corr = (tonic, minor), c
    tonic, minor = best
    target = 9 if minor else 0
    return min((s for s in range(-6, 7) if (tonic + s) % 12 == target), key=lambda s: (abs(s), s))


def test_normalize_key_identity_on_c_major():
    assert normalize_key(profile_song()).key_shift == 0


def test_normalize_key_transposed():
    song = profile_song(offset=2)
    assert brute_force_key_shift(song) == -2
    out = normalize_key(song)
    assert out.key_shift == -2
    assert sorted(n.pitch for n in out.notes) == sorted(n.pitch for n in profile_song().notes)


def test_normalize_key_drum_only():
    song = Song([Note(Track.DRUM, i, 36, 0) for i in range(4)], 1)
    out = normalize_key(song)
    assert out.key_shift == 0 and out.notes == song.notes


@pytest.mark.parametrize("offset", range(-5, 7))
def test_normalize_matches_oracle_and_denormalizes(offset):
    song = profile_song(offset)
    song.notes.append(Note(Track.DRUM, 0, 38, 0))
    out = normalize_key(song)
    assert out.key_shift == brute_force_key_shift(song)
    back = denormalize_key(out)
    assert sorted(back.notes) == sorted(song.notes)


# chords --------------------------------------------------------------------


def bar_song(pitch_sets, durations=None):
    notes = []
    for bar, pitches in enumerate(pitch_sets):
        for i, p in enumerate(pitches):
            d = durations[bar][i] if durations else 4
            notes.append(Note(Track.PIANO, bar * 16, p, d))
    return Song(notes, len(pitch_sets))


def oracle_chords(pcs_weights, model=ChordModel()):
    """All best-scoring chords, looping over the 96 with the emission formula written longhand."""
    total = sum(pcs_weights.values())
    scores = {}
    for quality, intervals in enumerate(CHORD_INTERVALS):
        for root in range(12):
            tones = {(root + i) % 12 for i in intervals}
            inside = sum(w for pc, w in pcs_weights.items() if pc in tones) / total
            missing = sum(1 for pc in tones if pcs_weights.get(pc, 0) == 0) / len(tones)
            scores[(root, quality)] = inside - model.out_penalty * (1 - inside) - model.missing_penalty * missing
    top = max(scores.values())
    return {c for c, s in scores.items() if s > top - 1e-9}


def test_infer_c_major_and_a_minor():
    assert infer_chords(bar_song([[60, 64, 67]])) == [(0, 0)]
    assert infer_chords(bar_song([[57, 60, 64]])) == [(9, 1)]
    assert oracle_chords({0: 4, 4: 4, 7: 4}) == {(0, 0)}
    assert oracle_chords({9: 4, 0: 4, 4: 4}) == {(9, 1)}


def test_infer_rest_bars():
    song = bar_song([[], [60, 64, 67], [], [57, 60, 64]])
    chords = infer_chords(song)
    assert chords[0] == (0, 0)
    assert chords[2] == chords[1]
    assert len(chords) == 4


def test_infer_empty_song():
    with pytest.raises(ValueError, match="empty song"):
        infer_chords(Song([], 0))


def test_single_bar_matches_oracle(rng):
    for _ in range(200):
        pcs = rng.choice(12, size=int(rng.integers(1, 6)), replace=False)
        weights = rng.integers(1, 9, size=len(pcs))
        song = bar_song([[60 + int(p) for p in pcs]], [list(map(int, weights))])
        (chord,) = infer_chords(song)
        assert chord in oracle_chords(dict(zip(map(int, pcs), map(int, weights))))


def test_viterbi_beats_exhaustive_and_greedy(rng):
    trans = transition_scores()
    for _ in range(5):
        n = int(rng.integers(1, 4))
        hist = rng.integers(0, 5, size=(n, 12)).astype(float)
        hist[:, 0] += 1
        em = emission_scores(hist)
        path = viterbi(em, trans)
        best = path_score(path, em, trans)
        greedy = list(em.argmax(axis=1))
        assert best >= path_score(greedy, em, trans) - 1e-12
        if n <= 2:
            exhaustive = max(path_score(list(p), em, trans) for p in product(range(96), repeat=n))
            assert best == pytest.approx(exhaustive, abs=1e-12)


def test_viterbi_exhaustive_small_state_space(rng):
    # restrict to 6 states so 4-bar sequences can be enumerated exactly
    trans = transition_scores()[:6, :6]
    for _ in range(10):
        em = rng.normal(size=(4, 6))
        best = path_score(viterbi(em, trans), em, trans)
        exhaustive = max(path_score(list(p), em, trans) for p in product(range(6), repeat=4))
        assert best == pytest.approx(exhaustive, abs=1e-12)


def test_infer_chords_valid_states(rng):
    from trackdiff.synthetic import random_song

    song = random_song(rng, bars=6, chords=False)
    chords = infer_chords(song)
    assert len(chords) == 6
    assert all(0 <= r < 12 and 0 <= q < 8 for r, q in chords)


# segmentation --------------------------------------------------------------


def long_song(bars):
    notes = [Note(Track.MELODY, b * 16, 72, 4) for b in range(bars)]
    return Song(notes, bars, [(0, 0)] * bars)


def test_segment_lengths():
    assert [f.bars for f in segment(long_song(70))] == [32, 32, 6]
    (frag,) = segment(long_song(10))
    assert frag.length == 160


def test_segment_truncates_at_boundary():
    song = Song([Note(Track.PIANO, 31 * 16 + 12, 60, 12), Note(Track.MELODY, 0, 72, 1)], 40)
    first, second = segment(song)
    (cut,) = first.track_notes(Track.PIANO)
    assert cut.onset + cut.duration == 512
    assert second.track_notes(Track.PIANO) == []


def test_segment_preserves_notes_and_tiles(rng):
    from trackdiff.synthetic import random_song

    song = random_song(rng, bars=70)
    frags = segment(song, 32)
    assert sum(len(f.notes) for f in frags) == len(song.notes)
    assert sum(f.bars for f in frags) == song.bars
    assert sum((f.chords for f in frags), []) == song.chords


# interchange format and pipeline -----------------------------------------------


def test_note_list_roundtrip(rng):
    from trackdiff.synthetic import random_song

    song = random_song(rng, bars=3)
    text = write_note_list(song)
    back = read_note_list("# comment\n" + text)
    assert back.notes == song.notes and back.chords == song.chords and back.bars == song.bars


def test_note_list_errors():
    with pytest.raises(ValueError, match="line 1"):
        read_note_list("note piano x 60 4")
    with pytest.raises(ValueError, match="unknown track"):
        read_note_list("note tuba 0 60 4")


def test_ingest_corpus(tmp_path):
    good = [f"note melody {i} {72 + i % 5} 1" for i in range(16)] + ["note bass 0 40 8", "note bass 16 43 8"]
    (tmp_path / "a.txt").write_text("\n".join(good))
    (tmp_path / "b.txt").write_text("note melody 0 72 1\n")
    data = write_smf([(0, i * 120, 120, 76 + i % 3, 90) for i in range(20)] + [(1, 0, 960, 40, 90)],
                     480, {0: 73, 1: 33})
    (tmp_path / "c.mid").write_bytes(data)
    fragments, report = ingest_corpus(tmp_path)
    assert report.files == 3 and report.kept == 2
    assert dict(report.filtered) == {"too few notes": 1}
    assert [p.name for p, _, _ in fragments] == ["a.txt", "c.mid"]
    for _, _, song in fragments:
        assert song.chords and len(song.chords) == song.bars
