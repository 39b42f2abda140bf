import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hat_music.score import (
    MAX_NOTE_DURATION,
    ChordSpan,
    Note,
    PhraseSpan,
    RawNote,
    RawSong,
    RawSpan,
    ScoreError,
    Song,
    SongParseError,
    SongValidationError,
    Track,
    all_chord_symbols,
    dumps_song,
    load_song,
    loads_song,
    normalize_chord,
    quantize_song,
    save_song,
    song_to_raw,
)

from strategies import songs

MINIMAL = """title=tiny
tempo=120
timesig=4/4
P A 0 16
C C:maj 0 16
N PM 60 0 4
"""


class TestLoad:
    def test_minimal_file(self, tmp_path):
        path = tmp_path / "tiny.song"
        path.write_text(MINIMAL)
        song = load_song(path)
        assert (len(song.phrases), len(song.chords), len(song.notes)) == (1, 1, 1)
        assert song.notes[0] == Note(0, Track.PM, 60, 4)
        assert song.tempo_bpm == 120.0

    def test_overlapping_chords_rejected(self):
        text = MINIMAL.replace("C C:maj 0 16", "C C:maj 0 8\nC G:maj 4 8")
        with pytest.raises(SongValidationError):
            loads_song(text)

    def test_first_tempo_kept(self):
        song = loads_song(MINIMAL.replace("tempo=120\n", "tempo=120\ntempo=90\n"))
        assert song.tempo_bpm == 120.0

    def test_note_outside_phrase_rejected(self):
        with pytest.raises(SongValidationError):
            loads_song(MINIMAL + "N SM 62 20 2\n")

    def test_non_four_four_rejected(self):
        with pytest.raises(SongValidationError):
            loads_song(MINIMAL.replace("timesig=4/4", "timesig=3/4"))

    def test_unsorted_records_are_parse_errors(self):
        text = MINIMAL + "N PM 62 8 2\nN PM 64 4 2\n"
        with pytest.raises(SongParseError) as info:
            loads_song(text)
        assert info.value.line == 8

    @pytest.mark.parametrize(
        "line",
        ["N XX 60 0 4", "C H:maj 0 4", "N PM sixty 0 4", "Q 1 2 3", "C C:maj 0"],
    )
    def test_malformed_records(self, line):
        with pytest.raises(SongParseError):
            loads_song(MINIMAL + line + "\n")

    def test_missing_tempo(self):
        with pytest.raises(SongParseError):
            loads_song(MINIMAL.replace("tempo=120\n", ""))

    def test_flat_chord_names_are_normalized(self):
        song = loads_song(MINIMAL.replace("C:maj", "Bb:min7"))
        assert song.chords[0].symbol == "A#:min7"


class TestValidation:
    @pytest.mark.parametrize(
        "note",
        [Note(0, Track.PM, 128, 4), Note(0, Track.PM, -1, 4), Note(0, Track.PM, 60, 0), Note(0, Track.PM, 60, 65)],
    )
    def test_bad_notes(self, note):
        with pytest.raises(SongValidationError):
            Song("x", 120.0, notes=(note,), phrases=(PhraseSpan("A", 0, 16),))

    def test_phrase_must_be_bar_aligned(self):
        with pytest.raises(SongValidationError):
            Song("x", 120.0, phrases=(PhraseSpan("A", 4, 16),))

    @pytest.mark.parametrize("tempo", [0.0, -3.0, float("nan"), float("inf")])
    def test_bad_tempo(self, tempo):
        with pytest.raises(SongValidationError):
            Song("x", tempo)

    def test_chord_alphabet_size(self):
        assert len(all_chord_symbols()) == 109
        assert normalize_chord("Db:maj") == "C#:maj"
        with pytest.raises(ScoreError):
            normalize_chord("C:maj9")


class TestSave:
    def test_roundtrip_and_deterministic_bytes(self, tmp_path):
        song = loads_song(MINIMAL)
        a, b = tmp_path / "a.song", tmp_path / "b.song"
        save_song(song, a)
        save_song(song, b)
        assert a.read_bytes() == b.read_bytes()
        assert load_song(a) == song

    def test_empty_song(self, tmp_path):
        song = Song("empty", 100.0)
        save_song(song, tmp_path / "e.song")
        back = load_song(tmp_path / "e.song")
        assert back == song and back.notes == ()

    @settings(max_examples=200, deadline=None)
    @given(songs(tempo_on_grid=False))
    def test_roundtrip_property(self, song):
        assert loads_song(dumps_song(song)) == song


def _raw(notes=(), chords=(), phrases=(RawSpan("A", 0, 64),), tpq=16, tempos=(120.0,)):
    return RawSong("raw", tpq, list(tempos), list(notes), list(chords), list(phrases))


class TestQuantize:
    def test_on_grid_onset_unchanged(self):
        song = quantize_song(_raw([RawNote(Track.PM, 60, 12, 8)]))  # 16 ticks/quarter: 4 ticks per step
        assert song.notes[0] == Note(3, Track.PM, 60, 2)

    def test_rounds_to_nearest(self):
        # 0.4 of a step past step 3 rounds down; 0.6 rounds up
        song = quantize_song(_raw([RawNote(Track.PM, 60, 13.6, 4), RawNote(Track.SM, 60, 14.4, 4)]))
        assert [n.onset for n in song.notes] == [3, 4]

    def test_zero_duration_clamped(self):
        song = quantize_song(_raw([RawNote(Track.PM, 60, 0, 1)]))
        assert song.notes[0].duration == 1

    def test_long_duration_clamped(self):
        song = quantize_song(_raw([RawNote(Track.PM, 60, 0, 4 * 200)]))
        assert song.notes[0].duration == MAX_NOTE_DURATION

    def test_unknown_resolution(self):
        with pytest.raises(ScoreError):
            quantize_song(_raw(tpq=None))
        with pytest.raises(ScoreError):
            quantize_song(_raw(tpq=0))

    def test_first_tempo_kept(self):
        assert quantize_song(_raw(tempos=(96.0, 140.0))).tempo_bpm == 96.0

    def test_long_chord_split_and_tiny_chord_dropped(self):
        song = quantize_song(
            _raw(chords=[RawSpan("C:maj", 0, 4 * 100), RawSpan("G:maj", 400, 1)], phrases=[RawSpan("A", 0, 4 * 112)])
        )
        assert [(c.symbol, c.onset, c.duration) for c in song.chords] == [("C:maj", 0, 64), ("C:maj", 64, 36)]

    def test_phrases_snap_to_bars(self):
        song = quantize_song(_raw(phrases=[RawSpan("A", 3, 4 * 16 - 2)]))
        assert song.phrases == (PhraseSpan("A", 0, 16),)

    @settings(max_examples=150, deadline=None)
    @given(songs(tempo_on_grid=False))
    def test_grid_songs_are_fixed_points(self, song):
        assert quantize_song(song_to_raw(song)) == song

    @settings(max_examples=150, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0, 63.4), st.floats(0, 300), st.integers(0, 127), st.sampled_from(list(Track))),
            max_size=10,
        ),
        st.sampled_from([3, 7, 24, 96, 480]),
    )
    def test_idempotent(self, raw_notes, tpq):
        scale = tpq / 4
        raw = _raw(
            [RawNote(tr, p, on * scale, d * scale) for on, d, p, tr in raw_notes],
            phrases=[RawSpan("A", 0, 64 * scale)],
            tpq=tpq,
        )
        once = quantize_song(raw)
        assert quantize_song(song_to_raw(once)) == once
