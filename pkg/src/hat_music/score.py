"""Annotated pop-song representation, its text interchange format and quantization.

All positions are integer 16th-note steps from the start of the song; a bar
is 16 steps (only 4/4 is supported).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

STEPS_PER_BAR = 16
STEPS_PER_QUARTER = 4
MAX_NOTE_DURATION = 64
MAX_CHORD_DURATION = 64
MAX_PHRASE_BARS = 64

PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
CHORD_QUALITIES = ("maj", "min", "dim", "aug", "sus2", "sus4", "7", "maj7", "min7")
NO_CHORD = "N"
PHRASE_LABELS = tuple(chr(c) for c in range(ord("A"), ord("Z") + 1)) + tuple(
    chr(c) for c in range(ord("a"), ord("z") + 1)
)

_FLATS = {"Db": "C#", "Eb": "D#", "Gb": "F#", "Ab": "G#", "Bb": "A#", "Cb": "B", "Fb": "E"}


class ScoreError(ValueError):
    """Base class for malformed or invalid songs."""


class SongParseError(ScoreError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SongValidationError(ScoreError):
    pass


class Track(enum.IntEnum):
    PM = 0
    SM = 1
    HRS = 2


def all_chord_symbols(qualities: Sequence[str] = CHORD_QUALITIES) -> tuple[str, ...]:
    """Every chord label in canonical ``Root:quality`` form, followed by ``N``."""
    return tuple(f"{root}:{q}" for root in PITCH_CLASSES for q in qualities) + (NO_CHORD,)


def normalize_chord(symbol: str) -> str:
    """Canonicalize a chord label (flats become sharps); raises on unknown labels."""
    if symbol == NO_CHORD:
        return symbol
    root, sep, quality = symbol.partition(":")
    if not sep:
        raise ScoreError(f"chord label {symbol!r} is not of the form Root:quality")
    root = _FLATS.get(root, root)
    if root not in PITCH_CLASSES or quality not in CHORD_QUALITIES:
        raise ScoreError(f"unknown chord label {symbol!r}")
    return f"{root}:{quality}"


@dataclass(frozen=True, order=True)
class Note:
    onset: int
    track: Track
    pitch: int
    duration: int

    @property
    def end(self) -> int:
        return self.onset + self.duration


@dataclass(frozen=True)
class ChordSpan:
    symbol: str
    onset: int
    duration: int

    @property
    def end(self) -> int:
        return self.onset + self.duration


@dataclass(frozen=True)
class PhraseSpan:
    label: str
    onset: int
    duration: int

    @property
    def end(self) -> int:
        return self.onset + self.duration

    @property
    def is_melodic(self) -> bool:
        return self.label.isupper()


@dataclass(frozen=True)
class Song:
    """A validated, quantized song. Notes are kept in canonical order."""

    title: str
    tempo_bpm: float
    notes: tuple[Note, ...] = ()
    chords: tuple[ChordSpan, ...] = ()
    phrases: tuple[PhraseSpan, ...] = ()
    time_signature: str = "4/4"

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(sorted(self.notes)))
        object.__setattr__(self, "chords", tuple(self.chords))
        object.__setattr__(self, "phrases", tuple(self.phrases))
        validate_song(self)

    @property
    def num_bars(self) -> int:
        end = max(
            [n.onset + 1 for n in self.notes]
            + [c.end for c in self.chords]
            + [p.end for p in self.phrases]
            + [0]
        )
        return -(-end // STEPS_PER_BAR)

    def chord_symbols(self) -> list[str]:
        return [c.symbol for c in self.chords]

    def phrase_at(self, step: int) -> PhraseSpan | None:
        return _span_at(self.phrases, step)

    def chord_at(self, step: int) -> ChordSpan | None:
        return _span_at(self.chords, step)


def _span_at(spans, step):
    # spans are sorted and non-overlapping
    lo, hi = 0, len(spans)
    while lo < hi:
        mid = (lo + hi) // 2
        if spans[mid].onset <= step:
            lo = mid + 1
        else:
            hi = mid
    if lo and spans[lo - 1].onset <= step < spans[lo - 1].end:
        return spans[lo - 1]
    return None


def _check_spans(spans, kind: str):
    prev_end = None
    for k, span in enumerate(spans):
        if span.onset < 0 or span.duration < 1:
            raise SongValidationError(f"{kind} #{k} has onset {span.onset}, duration {span.duration}")
        if prev_end is not None and span.onset < prev_end:
            raise SongValidationError(f"{kind} #{k} at step {span.onset} overlaps or is out of order")
        prev_end = span.end


def validate_song(song: Song) -> None:
    if song.time_signature != "4/4":
        raise SongValidationError(f"only 4/4 is supported, got {song.time_signature}")
    if not (isinstance(song.tempo_bpm, (int, float)) and math.isfinite(song.tempo_bpm) and song.tempo_bpm > 0):
        raise SongValidationError(f"tempo must be a positive number, got {song.tempo_bpm!r}")
    if "\n" in song.title or "\r" in song.title:
        raise SongValidationError("title must be a single line")
    for note in song.notes:
        if not isinstance(note.track, Track):
            raise SongValidationError(f"unknown track {note.track!r}")
        if not 0 <= note.pitch <= 127:
            raise SongValidationError(f"pitch {note.pitch} out of range")
        if note.onset < 0:
            raise SongValidationError(f"negative onset {note.onset}")
        if not 1 <= note.duration <= MAX_NOTE_DURATION:
            raise SongValidationError(f"note duration {note.duration} outside [1, {MAX_NOTE_DURATION}]")
    _check_spans(song.chords, "chord")
    for chord in song.chords:
        if chord.symbol != normalize_chord(chord.symbol):
            raise SongValidationError(f"chord label {chord.symbol!r} is not canonical")
        if chord.duration > MAX_CHORD_DURATION:
            raise SongValidationError(
                f"chord at step {chord.onset} lasts {chord.duration} steps (max {MAX_CHORD_DURATION})"
            )
    _check_spans(song.phrases, "phrase")
    for phrase in song.phrases:
        if phrase.label not in PHRASE_LABELS:
            raise SongValidationError(f"phrase label {phrase.label!r} not in A-Z/a-z")
        if phrase.onset % STEPS_PER_BAR or phrase.duration % STEPS_PER_BAR:
            raise SongValidationError(f"phrase at step {phrase.onset} is not bar aligned")
        if phrase.duration > MAX_PHRASE_BARS * STEPS_PER_BAR:
            raise SongValidationError(f"phrase at step {phrase.onset} longer than {MAX_PHRASE_BARS} bars")
    for note in song.notes:
        if _span_at(song.phrases, note.onset) is None:
            raise SongValidationError(f"note at step {note.onset} lies outside every phrase")


# --- interchange format -----------------------------------------------------


def dumps_song(song: Song) -> str:
    lines = [f"title={song.title}", f"tempo={song.tempo_bpm!r}", f"timesig={song.time_signature}"]
    lines += [f"P {p.label} {p.onset} {p.duration}" for p in song.phrases]
    lines += [f"C {c.symbol} {c.onset} {c.duration}" for c in song.chords]
    lines += [f"N {n.track.name} {n.pitch} {n.onset} {n.duration}" for n in song.notes]
    return "\n".join(lines) + "\n"


def save_song(song: Song, path: str | Path) -> None:
    Path(path).write_text(dumps_song(song), encoding="utf-8")


def _ints(fields: list[str], lineno: int) -> list[int]:
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise SongParseError(f"expected integers, got {fields}", lineno) from None


def loads_song(text: str) -> Song:
    header: dict[str, str] = {}
    notes, chords, phrases = [], [], []
    last_onset = {"N": -1, "C": -1, "P": -1}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        raw = raw.removesuffix("\r")
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = raw.partition("=")
        if eq and key in ("title", "tempo", "timesig"):
            # repeated header keys: the first value wins (single-tempo songs)
            header.setdefault(key, value)
            continue
        fields = line.split()
        kind = fields[0]
        if kind == "N" and len(fields) == 5:
            try:
                track = Track[fields[1]]
            except KeyError:
                raise SongParseError(f"unknown track {fields[1]!r}", lineno) from None
            pitch, onset, duration = _ints(fields[2:], lineno)
            notes.append(Note(onset, track, pitch, duration))
        elif kind == "C" and len(fields) == 4:
            onset, duration = _ints(fields[2:], lineno)
            try:
                symbol = normalize_chord(fields[1])
            except ScoreError as exc:
                raise SongParseError(str(exc), lineno) from None
            chords.append(ChordSpan(symbol, onset, duration))
        elif kind == "P" and len(fields) == 4:
            onset, duration = _ints(fields[2:], lineno)
            phrases.append(PhraseSpan(fields[1], onset, duration))
        else:
            raise SongParseError(f"unrecognized record {line!r}", lineno)
        if onset < last_onset[kind]:
            raise SongParseError(f"{kind} records are not sorted by onset", lineno)
        last_onset[kind] = onset
    if "tempo" not in header:
        raise SongParseError("missing tempo= header")
    try:
        tempo = float(header["tempo"])
    except ValueError:
        raise SongParseError(f"bad tempo {header['tempo']!r}") from None
    return Song(
        title=header.get("title", ""),
        tempo_bpm=tempo,
        notes=tuple(notes),
        chords=tuple(chords),
        phrases=tuple(phrases),
        time_signature=header.get("timesig", "4/4").strip(),
    )


def load_song(path: str | Path) -> Song:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise SongParseError(f"{path}: not UTF-8 ({exc})") from None
    return loads_song(text)


# --- quantization -----------------------------------------------------------


@dataclass
class RawNote:
    track: Track
    pitch: int
    onset: float
    duration: float


@dataclass
class RawSpan:
    label: str
    onset: float
    duration: float


@dataclass
class RawSong:
    """Unquantized song with tick-based times, as read from a MIDI-like source."""

    title: str
    ticks_per_quarter: int | None
    tempos: list[float]
    notes: list[RawNote] = field(default_factory=list)
    chords: list[RawSpan] = field(default_factory=list)
    phrases: list[RawSpan] = field(default_factory=list)
    time_signature: str = "4/4"


def song_to_raw(song: Song) -> RawSong:
    """View a quantized song as a raw song at 4 ticks per quarter (one tick per step)."""
    return RawSong(
        title=song.title,
        ticks_per_quarter=STEPS_PER_QUARTER,
        tempos=[song.tempo_bpm],
        notes=[RawNote(n.track, n.pitch, n.onset, n.duration) for n in song.notes],
        chords=[RawSpan(c.symbol, c.onset, c.duration) for c in song.chords],
        phrases=[RawSpan(p.label, p.onset, p.duration) for p in song.phrases],
        time_signature=song.time_signature,
    )


def _round(x: float) -> int:
    # half-up, not banker's rounding
    return math.floor(x + 0.5)


def _split_chord(symbol: str, onset: int, end: int) -> Iterable[ChordSpan]:
    while onset < end:
        stop = min(end, onset + MAX_CHORD_DURATION)
        yield ChordSpan(symbol, onset, stop - onset)
        onset = stop


def quantize_song(raw: RawSong) -> Song:
    """Snap a raw song onto the 16th-note grid.

    Note onsets and durations are rounded independently; durations become
    at least one step and at most ``MAX_NOTE_DURATION``. Chord boundaries are
    rounded (so adjacent chords stay adjacent), chords collapsing to zero
    length are dropped and chords longer than ``MAX_CHORD_DURATION`` are split.
    Phrase boundaries are rounded to whole bars. Only the first tempo is kept.
    """
    tpq = raw.ticks_per_quarter
    if not tpq or tpq <= 0:
        raise ScoreError(f"unknown ticks per quarter: {tpq!r}")
    if not raw.tempos:
        raise ScoreError("song has no tempo")
    scale = STEPS_PER_QUARTER / tpq

    notes = []
    for n in raw.notes:
        onset = _round(n.onset * scale)
        duration = min(max(_round(n.duration * scale), 1), MAX_NOTE_DURATION)
        notes.append(Note(onset, Track(n.track), n.pitch, duration))

    chords = []
    for c in sorted(raw.chords, key=lambda c: c.onset):
        onset = _round(c.onset * scale)
        end = _round((c.onset + c.duration) * scale)
        chords.extend(_split_chord(normalize_chord(c.label), onset, end))

    phrases = []
    bar_ticks = STEPS_PER_BAR / scale
    for p in sorted(raw.phrases, key=lambda p: p.onset):
        onset = _round(p.onset / bar_ticks) * STEPS_PER_BAR
        end = _round((p.onset + p.duration) / bar_ticks) * STEPS_PER_BAR
        if end > onset:
            phrases.append(PhraseSpan(p.label, onset, end - onset))

    return Song(
        title=raw.title,
        tempo_bpm=float(raw.tempos[0]),
        notes=tuple(notes),
        chords=tuple(chords),
        phrases=tuple(phrases),
        time_signature=raw.time_signature,
    )
