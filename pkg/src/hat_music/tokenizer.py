"""Nine-event tokenization of songs.

A token is a tuple of nine dense indices, one per event category (type,
bar, beat, tempo, phrase, chord, track, pitch, duration). Index 0 is IGNORE
in every category except ``type``, which always has a value.

Field usage by token type:

* Phrase: bar/beat of its onset, tempo, phrase label, duration = length in bars.
* Chord: bar/beat, tempo, enclosing phrase label (IGNORE if none), chord
  symbol, duration in steps.
* Note: bar/beat, tempo, enclosing phrase, enclosing chord (``N`` if none),
  track, pitch, duration in steps.
* BOS/EOS: everything but the type is IGNORE.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .score import (
    CHORD_QUALITIES,
    MAX_CHORD_DURATION,
    MAX_NOTE_DURATION,
    MAX_PHRASE_BARS,
    NO_CHORD,
    PHRASE_LABELS,
    STEPS_PER_BAR,
    ChordSpan,
    Note,
    PhraseSpan,
    Song,
    Track,
    all_chord_symbols,
)

CATEGORIES = ("type", "bar", "beat", "tempo", "phrase", "chord", "track", "pitch", "duration")
IGNORE = 0

BOS, EOS, PHRASE, CHORD, NOTE = range(5)
TYPE_NAMES = ("BOS", "EOS", "Phrase", "Chord", "Note")


class TokenizeError(ValueError):
    pass


class MalformedTokensError(ValueError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"token {index}: {message}")


class TokenRepairWarning(UserWarning):
    """Emitted when a token sequence needed repair to become a valid song."""


class Token(NamedTuple):
    type: int
    bar: int = IGNORE
    beat: int = IGNORE
    tempo: int = IGNORE
    phrase: int = IGNORE
    chord: int = IGNORE
    track: int = IGNORE
    pitch: int = IGNORE
    duration: int = IGNORE


@dataclass(frozen=True)
class VocabConfig:
    tempo_min: float = 30.0
    tempo_max: float = 210.0
    tempo_bins: int = 32
    bar_cap: int = 256
    chord_qualities: tuple[str, ...] = CHORD_QUALITIES
    phrase_labels: tuple[str, ...] = PHRASE_LABELS
    max_duration: int = max(MAX_NOTE_DURATION, MAX_CHORD_DURATION, MAX_PHRASE_BARS)


@dataclass
class Vocabulary:
    config: VocabConfig
    symbols: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {}
        for cat, syms in self.symbols.items():
            table = {s: i for i, s in enumerate(syms)}
            if len(table) != len(syms):
                raise ValueError(f"duplicate symbols in category {cat!r}")
            self._index[cat] = table

    def size(self, category: str) -> int:
        return len(self.symbols[category])

    @property
    def sizes(self) -> dict[str, int]:
        return {c: len(self.symbols[c]) for c in CATEGORIES}

    def index(self, category: str, symbol) -> int:
        try:
            return self._index[category][symbol]
        except KeyError:
            raise TokenizeError(f"{symbol!r} is not in the {category} vocabulary") from None

    def symbol(self, category: str, index: int):
        return self.symbols[category][index]

    def tempo_bin(self, bpm: float) -> int:
        cfg = self.config
        width = (cfg.tempo_max - cfg.tempo_min) / cfg.tempo_bins
        b = int((min(max(bpm, cfg.tempo_min), cfg.tempo_max) - cfg.tempo_min) // width)
        return min(b, cfg.tempo_bins - 1)

    def tempo_center(self, bin_: int) -> float:
        cfg = self.config
        width = (cfg.tempo_max - cfg.tempo_min) / cfg.tempo_bins
        return cfg.tempo_min + (bin_ + 0.5) * width

    def snap_tempo(self, bpm: float) -> float:
        """The tempo a song has after a tokenize/detokenize roundtrip."""
        return self.tempo_center(self.tempo_bin(bpm))

    def hash(self) -> str:
        payload = json.dumps({c: [str(s) for s in self.symbols[c]] for c in CATEGORIES}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def describe(self, token: Sequence[int]) -> str:
        parts = [TYPE_NAMES[token[0]]]
        for cat, idx in zip(CATEGORIES[1:], token[1:]):
            if idx != IGNORE:
                parts.append(f"{cat}={self.symbol(cat, idx)}")
        return " ".join(parts)

    def to_json(self) -> str:
        cfg = self.config
        return json.dumps(
            {
                "tempo_min": cfg.tempo_min,
                "tempo_max": cfg.tempo_max,
                "tempo_bins": cfg.tempo_bins,
                "bar_cap": cfg.bar_cap,
                "chord_qualities": list(cfg.chord_qualities),
                "phrase_labels": list(cfg.phrase_labels),
                "max_duration": cfg.max_duration,
                "hash": self.hash(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        data = json.loads(text)
        expected = data.pop("hash", None)
        data["chord_qualities"] = tuple(data["chord_qualities"])
        data["phrase_labels"] = tuple(data["phrase_labels"])
        vocab = build_vocabulary(VocabConfig(**data))
        if expected is not None and expected != vocab.hash():
            raise ValueError("vocabulary hash mismatch")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(config: VocabConfig | None = None) -> Vocabulary:
    config = config or VocabConfig()
    ign = ("<ignore>",)
    symbols = {
        "type": TYPE_NAMES,
        "bar": ign + tuple(range(config.bar_cap)),
        "beat": ign + tuple(range(STEPS_PER_BAR)),
        "tempo": ign + tuple(range(config.tempo_bins)),
        "phrase": ign + tuple(config.phrase_labels),
        "chord": ign + all_chord_symbols(config.chord_qualities),
        "track": ign + tuple(t.name for t in Track),
        "pitch": ign + tuple(range(128)),
        "duration": ign + tuple(range(1, config.max_duration + 1)),
    }
    return Vocabulary(config, symbols)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = build_vocabulary()
    return _DEFAULT_VOCAB


# --- song -> tokens ---------------------------------------------------------


def tokenize(song: Song, vocab: Vocabulary | None = None) -> list[Token]:
    vocab = vocab or default_vocabulary()
    tempo = vocab.tempo_bin(song.tempo_bpm) + 1
    events = []
    for p in song.phrases:
        events.append((p.onset, 0, 0, 0, p))
    for c in song.chords:
        events.append((c.onset, 1, 0, 0, c))
    for n in song.notes:
        events.append((n.onset, 2, int(n.track), n.pitch, n))
    events.sort(key=lambda e: e[:4])

    no_chord = vocab.index("chord", NO_CHORD)
    tokens = [Token(BOS)]
    for onset, _, _, _, ev in events:
        bar, beat = divmod(onset, STEPS_PER_BAR)
        if bar >= vocab.config.bar_cap:
            raise TokenizeError(f"song exceeds {vocab.config.bar_cap} bars")
        pos = dict(bar=bar + 1, beat=beat + 1, tempo=tempo)
        if isinstance(ev, PhraseSpan):
            tokens.append(
                Token(
                    PHRASE,
                    phrase=vocab.index("phrase", ev.label),
                    duration=vocab.index("duration", ev.duration // STEPS_PER_BAR),
                    **pos,
                )
            )
            continue
        phrase = song.phrase_at(onset)
        phrase_idx = vocab.index("phrase", phrase.label) if phrase else IGNORE
        if isinstance(ev, ChordSpan):
            tokens.append(
                Token(
                    CHORD,
                    phrase=phrase_idx,
                    chord=vocab.index("chord", ev.symbol),
                    duration=vocab.index("duration", ev.duration),
                    **pos,
                )
            )
        else:
            chord = song.chord_at(onset)
            tokens.append(
                Token(
                    NOTE,
                    phrase=phrase_idx,
                    chord=vocab.index("chord", chord.symbol) if chord else no_chord,
                    track=vocab.index("track", ev.track.name),
                    pitch=vocab.index("pitch", ev.pitch),
                    duration=vocab.index("duration", ev.duration),
                    **pos,
                )
            )
    tokens.append(Token(EOS))
    return tokens


# --- tokens -> song ---------------------------------------------------------

_REQUIRED = {
    PHRASE: ("bar", "beat", "phrase", "duration"),
    CHORD: ("bar", "beat", "chord", "duration"),
    NOTE: ("bar", "beat", "track", "pitch", "duration"),
}
_FORBIDDEN = {
    PHRASE: ("track", "pitch"),
    CHORD: ("pitch", "track"),
    NOTE: (),
}


def _applicability_error(tok: Token) -> str | None:
    if tok.type in (BOS, EOS):
        if any(tok[1:]):
            return f"{TYPE_NAMES[tok.type]} token carries event values"
        return None
    for cat in _REQUIRED[tok.type]:
        if getattr(tok, cat) == IGNORE:
            return f"{TYPE_NAMES[tok.type]} token has IGNORE {cat}"
    for cat in _FORBIDDEN[tok.type]:
        if getattr(tok, cat) != IGNORE:
            return f"{TYPE_NAMES[tok.type]} token has a {cat} value"
    return None


def _check_indices(tokens: Sequence[Sequence[int]], vocab: Vocabulary) -> None:
    sizes = [vocab.size(c) for c in CATEGORIES]
    for i, tok in enumerate(tokens):
        if len(tok) != len(CATEGORIES):
            raise MalformedTokensError(i, f"expected {len(CATEGORIES)} fields, got {len(tok)}")
        for cat, idx, size in zip(CATEGORIES, tok, sizes):
            if not 0 <= idx < size:
                raise MalformedTokensError(i, f"{cat} index {idx} outside [0, {size})")


def detokenize(
    tokens: Sequence[Sequence[int]],
    vocab: Vocabulary | None = None,
    *,
    title: str = "",
    tempo_bpm: float | None = None,
    strict: bool = True,
) -> Song:
    """Rebuild a song from a token sequence.

    With ``strict=True`` any inconsistency raises ``MalformedTokensError``.
    Otherwise inconsistencies are repaired and reported through
    ``TokenRepairWarning``: tokens with inapplicable fields are dropped,
    overlapping spans are clipped, and notes outside every phrase are dropped.
    A missing BOS/EOS always raises. ``tempo_bpm`` is used only when no token
    carries a tempo (e.g. an empty song).
    """
    vocab = vocab or default_vocabulary()
    if not tokens:
        raise MalformedTokensError(0, "empty sequence")
    tokens = [Token(*map(int, t)) for t in tokens]
    _check_indices(tokens, vocab)
    if tokens[0].type != BOS:
        raise MalformedTokensError(0, "sequence does not start with BOS")
    if tokens[-1].type != EOS:
        raise MalformedTokensError(len(tokens) - 1, "sequence does not end with EOS")

    def problem(i: int, msg: str):
        if strict:
            raise MalformedTokensError(i, msg)
        warnings.warn(f"token {i}: {msg}", TokenRepairWarning, stacklevel=3)

    no_chord = vocab.index("chord", NO_CHORD)
    phrases: list[PhraseSpan] = []
    chords: list[ChordSpan] = []
    notes: list[Note] = []
    tempo_idx = None
    last_onset = -1
    for i, tok in enumerate(tokens[1:-1], start=1):
        if tok.type in (BOS, EOS):
            problem(i, f"{TYPE_NAMES[tok.type]} inside the sequence")
            continue
        err = _applicability_error(tok)
        if err:
            problem(i, err)
            continue
        if tok.tempo != IGNORE and tempo_idx is None:
            tempo_idx = tok.tempo
        onset = (tok.bar - 1) * STEPS_PER_BAR + tok.beat - 1
        if onset < last_onset:
            problem(i, f"onset {onset} goes back in time")
        last_onset = max(last_onset, onset)

        if tok.type == PHRASE:
            if onset % STEPS_PER_BAR:
                problem(i, "phrase does not start on a bar line")
                onset -= onset % STEPS_PER_BAR
            duration = vocab.symbol("duration", tok.duration) * STEPS_PER_BAR
            _append_span(phrases, PhraseSpan(vocab.symbol("phrase", tok.phrase), onset, duration), i, problem)
        elif tok.type == CHORD:
            span = ChordSpan(vocab.symbol("chord", tok.chord), onset, vocab.symbol("duration", tok.duration))
            _append_span(chords, span, i, problem)
        else:
            active = chords[-1] if chords and chords[-1].onset <= onset < chords[-1].end else None
            expected = vocab.index("chord", active.symbol) if active else no_chord
            if tok.chord != expected:
                what = active.symbol if active else "N (no chord yet)"
                problem(i, f"note carries chord {vocab.symbol('chord', tok.chord)!r}, context is {what}")
            phrase = phrases[-1] if phrases and phrases[-1].onset <= onset < phrases[-1].end else None
            if phrase is None:
                problem(i, "note lies outside every phrase; dropped")
                continue
            if tok.phrase != vocab.index("phrase", phrase.label):
                problem(i, "note carries a phrase label that differs from its context")
            duration = vocab.symbol("duration", tok.duration)
            if duration > MAX_NOTE_DURATION:
                problem(i, f"note duration {duration} clipped to {MAX_NOTE_DURATION}")
                duration = MAX_NOTE_DURATION
            notes.append(
                Note(onset, Track[vocab.symbol("track", tok.track)], vocab.symbol("pitch", tok.pitch), duration)
            )

    if tempo_idx is not None:
        tempo = vocab.tempo_center(vocab.symbol("tempo", tempo_idx))
    else:
        tempo = tempo_bpm if tempo_bpm is not None else vocab.tempo_center(vocab.tempo_bin(120.0))
    phrases = _sorted_spans(phrases)
    chords = _sorted_spans(chords)
    notes = [n for n in notes if _inside(phrases, n.onset)]
    return Song(title=title, tempo_bpm=tempo, notes=tuple(notes), chords=tuple(chords), phrases=tuple(phrases))


def _append_span(spans: list, span, i: int, problem) -> None:
    if spans and span.onset < spans[-1].end:
        prev = spans[-1]
        problem(i, f"span at step {span.onset} overlaps the previous one; previous clipped")
        if span.onset <= prev.onset:
            spans.pop()
        else:
            spans[-1] = replace(prev, duration=span.onset - prev.onset)
    spans.append(span)


def _sorted_spans(spans: list) -> list:
    # repair path only: out-of-order input. Keep the later span on conflict.
    spans = sorted(spans, key=lambda s: s.onset)
    out: list = []
    for s in spans:
        while out and out[-1].end > s.onset:
            prev = out.pop()
            if prev.onset < s.onset:
                out.append(replace(prev, duration=s.onset - prev.onset))
                break
        out.append(s)
    return out


def _inside(spans, step: int) -> bool:
    return any(s.onset <= step < s.end for s in spans)


# --- sequence utilities -----------------------------------------------------


def token_array(tokens: Sequence[Sequence[int]]) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != len(CATEGORIES):
        arr = arr.reshape(-1, len(CATEGORIES))
    return arr


def split_long_phrases(tokens: Sequence[Token], max_chords: int) -> list[Token]:
    """Insert a continuation phrase token (same label) before every ``max_chords``-th chord of a phrase."""
    out: list[Token] = []
    current: Token | None = None
    count = 0
    for tok in tokens:
        tok = Token(*tok)
        if tok.type == PHRASE:
            current, count = tok, 0
        elif tok.type == CHORD and current is not None:
            if count == max_chords:
                out.append(current._replace(bar=tok.bar, beat=tok.beat))
                count = 0
            count += 1
        out.append(tok)
    return out


def truncate_at_phrase(tokens: Sequence[Token], max_len: int) -> list[Token]:
    """Cut a training sequence so at most ``max_len`` tokens are model inputs.

    The cut lands right after a phrase token when one fits, so that the kept
    prefix ends at the start of a new phrase.
    """
    tokens = list(tokens)
    if len(tokens) <= max_len + 1:
        return tokens
    cut = max_len + 1
    for k in range(max_len, 0, -1):
        if tokens[k][0] == PHRASE:
            cut = k + 1
            break
    return tokens[:cut]


def count_types(tokens: Sequence[Sequence[int]]) -> dict[str, int]:
    counts = dict.fromkeys(TYPE_NAMES, 0)
    for tok in tokens:
        counts[TYPE_NAMES[tok[0]]] += 1
    return counts


# --- token file -------------------------------------------------------------

_TOKEN_HEADER = "#hat-tokens v1 vocab="


def save_tokens(tokens: Sequence[Sequence[int]], path: str | Path, vocab: Vocabulary | None = None) -> None:
    vocab = vocab or default_vocabulary()
    lines = [_TOKEN_HEADER + vocab.hash()]
    lines += [" ".join(str(int(v)) for v in tok) for tok in tokens]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tokens(path: str | Path, vocab: Vocabulary | None = None) -> list[Token]:
    vocab = vocab or default_vocabulary()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(_TOKEN_HEADER):
        raise ValueError(f"{path}: missing token-file header")
    found = lines[0][len(_TOKEN_HEADER):].strip()
    if found != vocab.hash():
        raise ValueError(f"{path}: vocabulary hash {found} does not match {vocab.hash()}")
    tokens = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            tokens.append(Token(*(int(f) for f in line.split())))
        except (TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: expected {len(CATEGORIES)} integers") from None
    _check_indices(tokens, vocab)
    return tokens
