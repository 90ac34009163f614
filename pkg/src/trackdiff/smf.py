"""Minimal Standard MIDI File reader (formats 0 and 1).

Only note on/off, program change, tempo and end-of-track events are
interpreted; everything else is skipped by length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field


class MidiError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    channel: int
    program: int
    tick: int
    kind: str  # "note_on" | "note_off"
    key: int
    velocity: int


@dataclass(frozen=True)
class RawNote:
    track: int
    channel: int
    program: int
    onset: int
    duration: int
    pitch: int


@dataclass
class RawSong:
    """Notes in tick units before role assignment."""

    notes: list[RawNote]
    ticks_per_beat: int
    tempos: list[int] = field(default_factory=list)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MidiError("unexpected end of data")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def byte(self) -> int:
        return self.take(1)[0]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiError("variable-length quantity too long")

    def done(self) -> bool:
        return self.pos >= len(self.data)


def _parse_track(data: bytes) -> tuple[list[RawEvent], list[int]]:
    r = _Reader(data)
    events: list[RawEvent] = []
    tempos: list[int] = []
    programs = [0] * 16
    tick = 0
    status = None
    while not r.done():
        tick += r.varlen()
        b = r.byte()
        if b == 0xFF:
            meta_type = r.byte()
            payload = r.take(r.varlen())
            if meta_type == 0x51 and len(payload) == 3:
                tempos.append(int.from_bytes(payload, "big"))
            elif meta_type == 0x2F:
                break
            continue
        if b in (0xF0, 0xF7):
            r.take(r.varlen())
            continue
        if b & 0x80:
            status = b
            first = r.byte()
        else:
            if status is None:
                raise MidiError("running status without a prior status byte")
            first = b
        kind, channel = status & 0xF0, status & 0x0F
        if kind in (0xC0, 0xD0):
            if kind == 0xC0:
                programs[channel] = first
            continue
        second = r.byte()
        if kind == 0x90 and second > 0:
            events.append(RawEvent(channel, programs[channel], tick, "note_on", first, second))
        elif kind == 0x80 or kind == 0x90:
            events.append(RawEvent(channel, programs[channel], tick, "note_off", first, second))
    return events, tempos


def pair_notes(events: list[RawEvent], track: int = 0) -> list[RawNote]:
    """Match note_on with the earliest open note_on of the same channel and key."""
    open_notes: dict[tuple[int, int], list[RawEvent]] = {}
    notes = []
    for ev in sorted(events, key=lambda e: e.tick):
        slot = (ev.channel, ev.key)
        if ev.kind == "note_on":
            open_notes.setdefault(slot, []).append(ev)
        elif open_notes.get(slot):
            on = open_notes[slot].pop(0)
            notes.append(RawNote(track, on.channel, on.program, on.tick, ev.tick - on.tick, on.key))
    dangling = [ev for pending in open_notes.values() for ev in pending]
    if dangling:
        ev = dangling[0]
        raise MidiError(f"unpaired note_on: key {ev.key} channel {ev.channel} tick {ev.tick}")
    return notes


def read_smf(data: bytes) -> RawSong:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != b"MThd":
        raise MidiError("bad header: missing MThd")
    r.take(4)
    (hlen,) = struct.unpack(">I", r.take(4))
    header = r.take(hlen)
    if len(header) < 6:
        raise MidiError("bad header: too short")
    fmt, ntracks, division = struct.unpack(">HHH", header[:6])
    if fmt == 2:
        raise MidiError("format 2 files are not supported")
    if fmt not in (0, 1):
        raise MidiError(f"unknown format {fmt}")
    if division & 0x8000:
        raise MidiError("SMPTE division is not supported")
    if division == 0:
        raise MidiError("division must be positive")
    notes: list[RawNote] = []
    tempos: list[int] = []
    for index in range(ntracks):
        chunk_type = r.take(4)
        (length,) = struct.unpack(">I", r.take(4))
        body = r.take(length)
        if chunk_type != b"MTrk":
            continue
        events, track_tempos = _parse_track(body)
        tempos.extend(track_tempos)
        notes.extend(pair_notes(events, index))
    notes.sort(key=lambda n: (n.onset, n.track, n.channel, n.pitch))
    return RawSong(notes, division, tempos)


def write_smf(notes: list[tuple[int, int, int, int, int]], division: int = 480,
              programs: dict[int, int] | None = None, tempo: int | None = 500000) -> bytes:
    """Build a format-1 file from (channel, onset_tick, duration_tick, key, velocity) tuples.

    One track per channel. Used for fixtures and for exporting decoded songs.
    """
    programs = programs or {}
    by_channel: dict[int, list] = {}
    for n in notes:
        by_channel.setdefault(n[0], []).append(n)
    tracks = []
    conductor = bytearray()
    if tempo is not None:
        conductor += b"\x00\xff\x51\x03" + tempo.to_bytes(3, "big")
    conductor += b"\x00\xff\x2f\x00"
    tracks.append(bytes(conductor))
    for channel in sorted(by_channel):
        timed = []
        for _, onset, dur, key, vel in by_channel[channel]:
            timed.append((onset + dur, 0, bytes([0x80 | channel, key, 0])))
            timed.append((onset, 1, bytes([0x90 | channel, key, vel])))
        timed.sort(key=lambda e: (e[0], e[1]))
        body = bytearray()
        if channel in programs:
            body += b"\x00" + bytes([0xC0 | channel, programs[channel]])
        now = 0
        for tick, _, msg in timed:
            body += _varlen(tick - now) + msg
            now = tick
        body += b"\x00\xff\x2f\x00"
        tracks.append(bytes(body))
    out = bytearray(b"MThd" + struct.pack(">IHHH", 6, 1, len(tracks), division))
    for body in tracks:
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return bytes(out)


def _varlen(value: int) -> bytes:
    buf = [value & 0x7F]
    value >>= 7
    while value:
        buf.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(buf))
