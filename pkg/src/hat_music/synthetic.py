"""Small rule-based pop songs for smoke tests and micro-corpora."""

from __future__ import annotations

import numpy as np

from .score import PITCH_CLASSES, STEPS_PER_BAR, ChordSpan, Note, PhraseSpan, Song, Track

_PROGRESSIONS = (
    ("C:maj", "G:maj", "A:min", "F:maj"),
    ("A:min", "F:maj", "C:maj", "G:maj"),
    ("F:maj", "G:maj", "E:min", "A:min"),
    ("C:maj", "A:min", "D:min7", "G:7"),
    ("D:min", "G:7", "C:maj7", "C:maj7"),
)
_FORMS = ("iAABBo", "iABAB", "AABA", "iABBx", "AAB")
_GROOVES = (
    (0, 4, 8, 12),
    (0, 6, 8, 14),
    (0, 2, 4, 6, 8, 10, 12, 14),
    (0, 8),
)
_QUALITY_INTERVALS = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
    "7": (0, 4, 7, 10),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
}


def chord_pitches(symbol: str, octave: int = 4) -> list[int]:
    root, _, quality = symbol.partition(":")
    base = 12 * (octave + 1) + PITCH_CLASSES.index(root)
    return [base + i for i in _QUALITY_INTERVALS[quality]]


def make_song(
    seed: int,
    *,
    bars_per_phrase: int = 2,
    chords_per_bar: int = 1,
    title: str | None = None,
    tempo: float | None = None,
    form: str | None = None,
) -> Song:
    """A deterministic toy song: repeated phrase sections, stable accompaniment grooves."""
    rng = np.random.default_rng(seed)
    drawn_form = _FORMS[rng.integers(len(_FORMS))]
    drawn_tempo = float(rng.choice([72.0, 90.0, 100.0, 120.0, 128.0]))
    form = form or drawn_form
    tempo = drawn_tempo if tempo is None else tempo
    section_material = {}
    phrases, chords, notes = [], [], []
    chord_len = STEPS_PER_BAR // chords_per_bar
    bar = 0
    for label in form:
        if label not in section_material:
            prog = _PROGRESSIONS[rng.integers(len(_PROGRESSIONS))]
            groove = _GROOVES[rng.integers(len(_GROOVES))]
            melody = rng.integers(0, 7, size=bars_per_phrase * 4)
            section_material[label] = (prog, groove, melody)
        prog, groove, melody = section_material[label]
        start = bar * STEPS_PER_BAR
        phrases.append(PhraseSpan(label, start, bars_per_phrase * STEPS_PER_BAR))
        n_chords = bars_per_phrase * chords_per_bar
        for k in range(n_chords):
            symbol = prog[k % len(prog)]
            onset = start + k * chord_len
            chords.append(ChordSpan(symbol, onset, chord_len))
            pitches = chord_pitches(symbol, octave=3)
            for g, off in enumerate(o for o in groove if o < chord_len):
                notes.append(Note(onset + off, Track.HRS, pitches[g % len(pitches)], 2))
        if label.isupper():
            scale = (0, 2, 4, 5, 7, 9, 11)
            for q, degree in enumerate(melody):
                notes.append(Note(start + 4 * q, Track.PM, 72 + scale[degree], 4))
            notes.append(Note(start, Track.SM, 64 + scale[melody[0]], 8))
        bar += bars_per_phrase
    return Song(
        title=title or f"synthetic-{seed}",
        tempo_bpm=tempo,
        notes=tuple(notes),
        chords=tuple(chords),
        phrases=tuple(phrases),
    )


def micro_corpus() -> list[Song]:
    """Two short songs sharing tempo and opening phrase.

    They first differ at a chord token, so the unavoidable per-position
    loss of a model that memorizes both stays far below 0.05.
    """
    return [
        make_song(0, tempo=120.0, form="iABAB", title="micro-0"),
        make_song(7, tempo=120.0, form="iAABB", title="micro-1"),
    ]
