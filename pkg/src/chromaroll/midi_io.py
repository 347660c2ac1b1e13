"""Standard MIDI File reading and writing.

Only the subset needed for piano-roll work is modelled: note on/off,
program change and set-tempo.  Everything else (sysex, controllers, pitch
bend, other meta events) is skipped on read and never written.
"""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field

MAX_VLQ = 0x0FFFFFFF
DRUM_CHANNEL = 9
DEFAULT_TEMPO = 500000


class MidiParseError(ValueError):
    """Malformed SMF data.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MidiWriteError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class RawNote:
    pitch: int
    onset_tick: int
    duration_tick: int
    velocity: int
    program: int = 0
    is_drum: bool = False

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if self.onset_tick < 0:
            raise ValueError(f"negative onset: {self.onset_tick}")
        if self.duration_tick < 1:
            raise ValueError(f"duration must be >= 1 tick: {self.duration_tick}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not 0 <= self.program <= 127:
            raise ValueError(f"program out of range: {self.program}")

    @property
    def offset_tick(self) -> int:
        return self.onset_tick + self.duration_tick

    def key(self) -> tuple:
        return (self.pitch, self.onset_tick, self.duration_tick,
                self.velocity, self.program, self.is_drum)


@dataclass(frozen=True)
class Track:
    notes: tuple[RawNote, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=_note_order)))


@dataclass(frozen=True)
class Score:
    """A parsed MIDI file: note tracks plus timing metadata.

    ``tempo_map`` holds ``(tick, microseconds_per_beat)`` pairs sorted by tick.
    """

    tracks: tuple[Track, ...] = ()
    ticks_per_beat: int = 480
    tempo_map: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.ticks_per_beat < 1 or self.ticks_per_beat > 0x7FFF:
            raise ValueError(f"ticks_per_beat out of range: {self.ticks_per_beat}")
        object.__setattr__(self, "tracks", tuple(self.tracks))
        object.__setattr__(self, "tempo_map",
                           tuple(sorted((int(t), int(u)) for t, u in self.tempo_map)))
        for tick, uspb in self.tempo_map:
            if tick < 0 or not 0 < uspb <= 0xFFFFFF:
                raise ValueError(f"bad tempo entry: {(tick, uspb)}")

    @classmethod
    def from_notes(cls, notes, ticks_per_beat=480, tempo_map=()):
        return cls(tracks=(Track(tuple(notes)),), ticks_per_beat=ticks_per_beat,
                   tempo_map=tuple(tempo_map))

    @property
    def notes(self) -> list[RawNote]:
        return sorted((n for tr in self.tracks for n in tr.notes), key=_note_order)

    def note_set(self) -> Counter:
        """Multiset of note tuples; the equality used for roundtrip checks."""
        return Counter(n.key() for tr in self.tracks for n in tr.notes)

    @property
    def end_tick(self) -> int:
        return max((n.offset_tick for n in self.notes), default=0)


def _note_order(n: RawNote):
    return (n.onset_tick, n.pitch, n.is_drum, n.program, n.duration_tick, n.velocity)


# --------------------------------------------------------------------------
# reading

class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise MidiParseError("unexpected end of track data", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MidiParseError(f"need {n} bytes, chunk ends", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def vlq(self) -> int:
        start = self.pos
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiParseError("variable-length quantity longer than 4 bytes", start)


def parse_midi(data: bytes) -> Score:
    """Parse SMF format 0 or 1 bytes into a :class:`Score`.

    Running status is honoured and a note-on with velocity 0 counts as a
    note-off.  A second note-on for a sounding pitch on the same channel
    closes the first note at that tick.  Zero-length notes are dropped.
    Raises :class:`MidiParseError` for anything structurally wrong.
    """
    data = bytes(data)
    if len(data) < 8 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen != 6:
        raise MidiParseError(f"MThd length must be 6, got {hlen}", 4)
    if len(data) < 14:
        raise MidiParseError("truncated MThd", len(data))
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise MidiParseError("ticks per beat must be positive", 12)

    pos = 14
    tracks = []
    tempo_map = []
    while pos < len(data):
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        ctype = data[pos:pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError(f"chunk {ctype!r} overruns file", pos)
        if ctype == b"MTrk":
            track, tempos = _parse_track(data, body, body + clen)
            tracks.append(track)
            tempo_map.extend(tempos)
        pos = body + clen

    # a wrong ntracks field is tolerated as long as the chunks are sound
    return Score(tracks=tuple(tracks), ticks_per_beat=division,
                 tempo_map=tuple(tempo_map))


def _parse_track(data: bytes, start: int, end: int):
    r = _Reader(data, start, end)
    tick = 0
    status = None
    programs = [0] * 16
    active: dict[tuple[int, int], tuple[int, int, int, int]] = {}
    notes = []
    tempos = []
    name = ""

    def close(key, at):
        on_tick, vel, prog, _ = active.pop(key)
        if at > on_tick:
            ch = key[0]
            notes.append(RawNote(key[1], on_tick, at - on_tick, vel, prog,
                                 ch == DRUM_CHANNEL))

    while r.pos < r.end:
        tick += r.vlq()
        ev_pos = r.pos
        b = r.byte()
        if b == 0xFF:
            mtype = r.byte()
            mlen = r.vlq()
            payload = r.take(mlen)
            if mtype == 0x2F:
                break
            if mtype == 0x51:
                if mlen != 3:
                    raise MidiParseError("set-tempo meta must carry 3 bytes", ev_pos)
                uspb = int.from_bytes(payload, "big")
                if uspb == 0:
                    raise MidiParseError("zero tempo", ev_pos)
                tempos.append((tick, uspb))
            elif mtype == 0x03 and not name:
                name = payload.decode("latin-1")
            continue
        if b in (0xF0, 0xF7):
            r.take(r.vlq())
            status = None
            continue
        if b >= 0xF0:
            raise MidiParseError(f"system message 0x{b:02X} not allowed in a file", ev_pos)
        if b & 0x80:
            status = b
            d1 = r.byte()
        else:
            if status is None:
                raise MidiParseError("running status with no previous status", ev_pos)
            d1 = b
        kind, ch = status & 0xF0, status & 0x0F
        if d1 & 0x80:
            raise MidiParseError("data byte has high bit set", r.pos - 1)
        if kind in (0xC0, 0xD0):
            if kind == 0xC0:
                programs[ch] = d1
            continue
        d2 = r.byte()
        if d2 & 0x80:
            raise MidiParseError("data byte has high bit set", r.pos - 1)
        if kind == 0x90 and d2 > 0:
            key = (ch, d1)
            if key in active:
                close(key, tick)
            active[key] = (tick, d2, programs[ch], ev_pos)
        elif kind == 0x80 or kind == 0x90:
            key = (ch, d1)
            if key in active:
                close(key, tick)

    if active:
        _, _, _, on_pos = min(active.values(), key=lambda v: v[3])
        raise MidiParseError("note-on never released before end of track", on_pos)
    return Track(tuple(notes), name), tempos


# --------------------------------------------------------------------------
# writing

def _vlq_bytes(value: int) -> bytes:
    if value < 0 or value > MAX_VLQ:
        raise MidiWriteError(f"delta time {value} exceeds variable-length capacity")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _chunk(events: list[tuple[int, int, bytes]]) -> bytes:
    """events: (tick, sort_rank, payload); emits an MTrk with end-of-track."""
    events.sort(key=lambda e: (e[0], e[1]))
    body = bytearray()
    last = 0
    for tick, _, payload in events:
        body += _vlq_bytes(tick - last)
        body += payload
        last = tick
    body += b"\x00\xFF\x2F\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def _channel_groups(notes):
    """Split one track's notes into MTrk-sized groups of (channel, notes)."""
    by_prog: dict[tuple[bool, int], list[RawNote]] = {}
    for n in notes:
        by_prog.setdefault((n.is_drum, n.program), []).append(n)
    melodic = [ch for ch in range(16) if ch != DRUM_CHANNEL]
    groups: list[list[tuple[int, int, list[RawNote]]]] = [[]]
    free = list(melodic)
    drum_used = False
    for (is_drum, prog), ns in sorted(by_prog.items()):
        if is_drum:
            if drum_used:
                groups.append([])
                free = list(melodic)
            groups[-1].append((DRUM_CHANNEL, prog, ns))
            drum_used = True
            continue
        if not free:
            groups.append([])
            free = list(melodic)
            drum_used = False
        groups[-1].append((free.pop(0), prog, ns))
    return groups


def write_midi(score: Score) -> bytes:
    """Serialize a :class:`Score` as SMF format 1.

    Track 0 carries the tempo map.  Every score track becomes one MTrk with a
    channel per distinct program (drums on channel 10); a track using more
    than 15 melodic programs spills into extra MTrks.
    """
    chunks = []
    conductor = [(tick, 0, b"\xFF\x51\x03" + uspb.to_bytes(3, "big"))
                 for tick, uspb in score.tempo_map]
    chunks.append(_chunk(conductor))
    for track in score.tracks:
        for group in _channel_groups(track.notes):
            events = []
            if track.name:
                raw = track.name.encode("latin-1", "replace")
                events.append((0, -1, b"\xFF\x03" + _vlq_bytes(len(raw)) + raw))
            for ch, prog, ns in group:
                events.append((0, 0, bytes([0xC0 | ch, prog])))
                for n in ns:
                    # offs sort before ons at the same tick so touching notes stay separate
                    events.append((n.onset_tick, 2, bytes([0x90 | ch, n.pitch, n.velocity])))
                    events.append((n.offset_tick, 1, bytes([0x80 | ch, n.pitch, 0])))
            chunks.append(_chunk(events))
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), score.ticks_per_beat)
    return header + b"".join(chunks)


def read_midi_file(path) -> Score:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


def write_midi_file(score: Score, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_midi(score))
