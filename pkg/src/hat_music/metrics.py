"""Objective structure metrics: groove stability and chord-progression n-gram scores.

* AGS  -- mean bitwise similarity (1 - |XOR| / |OR|) of adjacent equal-length
  chord grooves, where a groove marks the 16th-note frames with a note onset.
* CPI  -- fraction of a progression's n-grams that are unique.
* CPVR -- mean corpus probability of each n-gram at its first appearance.
* CPR  -- lambda * CPI + (1 - lambda) * CPVR.

Chord grams use the canonical ``root:quality`` symbol; consecutive duplicates
are kept.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .score import ChordSpan, Song, Track

log = logging.getLogger(__name__)

Gram = tuple[str, ...]


class MetricError(ValueError):
    pass


# --- grooves -----------------------------------------------------------------


def extract_grooves(song: Song, tracks: Iterable[Track] | None = None) -> list[tuple[ChordSpan, np.ndarray]]:
    """One onset-indicator vector per chord span (frame = one 16th note).

    ``tracks`` restricts which notes count; by default all tracks do.
    """
    allowed = None if tracks is None else {Track(t) for t in tracks}
    onsets = sorted({n.onset for n in song.notes if allowed is None or n.track in allowed})
    out = []
    for chord in song.chords:
        bits = np.zeros(chord.duration, dtype=np.uint8)
        lo = np.searchsorted(onsets, chord.onset)
        hi = np.searchsorted(onsets, chord.end)
        for t in onsets[lo:hi]:
            bits[t - chord.onset] = 1
        out.append((chord, bits))
    return out


def ags_pair(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"groove lengths differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        raise MetricError("both grooves are empty")
    return 1.0 - int(np.count_nonzero(a ^ b)) / union


def eligible_pairs(grooves: Sequence[np.ndarray]) -> list[tuple[int, int]]:
    """Adjacent index pairs with equal length and at least one onset between them."""
    return [
        (i, i + 1)
        for i in range(len(grooves) - 1)
        if len(grooves[i]) == len(grooves[i + 1]) and (grooves[i].any() or grooves[i + 1].any())
    ]


def ags_grooves(grooves: Sequence[np.ndarray]) -> float | None:
    pairs = eligible_pairs(grooves)
    if not pairs:
        return None
    return math.fsum(ags_pair(grooves[i], grooves[j]) for i, j in pairs) / len(pairs)


def ags(song: Song, tracks: Iterable[Track] | None = None) -> float | None:
    """Average groove stability of a song, or ``None`` if no pair is eligible."""
    return ags_grooves([g for _, g in extract_grooves(song, tracks)])


# --- chord n-grams -----------------------------------------------------------


def ngrams(chords: Sequence[str], n: int) -> list[Gram]:
    if n < 1:
        raise MetricError(f"n must be positive, got {n}")
    return [tuple(chords[i : i + n]) for i in range(len(chords) - n + 1)]


def cpi(chords: Sequence[str], n: int) -> float:
    if len(chords) < n:
        raise MetricError(f"{len(chords)} chords is fewer than n={n}")
    grams = ngrams(chords, n)
    return len(set(grams)) / len(grams)


@dataclass(frozen=True)
class NGramModel:
    n: int
    counts: dict[Gram, int]
    conditional: dict[Gram, dict[Gram, float]]
    corpus_hash: str

    def probability(self, gram: Gram) -> float:
        """P(gram | its leading n-1 chords); 0 for unseen contexts or grams."""
        if len(gram) != self.n:
            raise MetricError(f"gram of length {len(gram)} for an order-{self.n} model")
        return self.conditional.get(gram[:-1], {}).get(gram, 0.0)


def corpus_hash(corpus: Sequence[Sequence[str]]) -> str:
    h = hashlib.sha256()
    for seq in corpus:
        h.update("\x1f".join(seq).encode())
        h.update(b"\x1e")
    return h.hexdigest()[:16]


def build_ngram_model(corpus: Sequence[Sequence[str]], n: int) -> NGramModel:
    """Count n-grams over the reference corpus and normalize them per (n-1)-chord context.

    The context count is the number of n-grams that start with that context,
    so each conditional distribution sums to one.
    """
    if not corpus:
        raise MetricError("empty reference corpus")
    counts: Counter = Counter()
    for seq in corpus:
        counts.update(ngrams(seq, n))
    by_context: dict[Gram, dict[Gram, int]] = defaultdict(dict)
    for gram in sorted(counts):
        by_context[gram[:-1]][gram] = counts[gram]
    conditional = {}
    for ctx, grams in by_context.items():
        total = sum(grams.values())
        conditional[ctx] = {g: c / total for g, c in grams.items()}
    return NGramModel(n, dict(counts), conditional, corpus_hash(corpus))


def cpvr(chords: Sequence[str], model: NGramModel, n: int) -> float:
    if model.n != n:
        raise MetricError(f"model order {model.n} does not match n={n}")
    if len(chords) < n:
        raise MetricError(f"{len(chords)} chords is fewer than n={n}")
    seen: set[Gram] = set()
    values = []
    for gram in ngrams(chords, n):
        if gram not in seen:
            seen.add(gram)
            values.append(model.probability(gram))
    return math.fsum(values) / len(values)


def cpr(chords: Sequence[str], model: NGramModel, n: int, lam: float = 0.5) -> float:
    if not 0.0 <= lam <= 1.0:
        raise MetricError(f"lambda must lie in [0, 1], got {lam}")
    return lam * cpi(chords, n) + (1.0 - lam) * cpvr(chords, model, n)


# --- corpus reports ----------------------------------------------------------


@dataclass
class PieceScores:
    name: str
    ags: float | None
    cpi: dict[int, float | None]
    cpvr: dict[int, float | None]
    cpr: dict[int, float | None]


def score_pieces(
    pieces: Sequence[tuple[str, Song]],
    reference: Sequence[Sequence[str]] | None,
    ns: Sequence[int] = (2, 3, 4),
    lam: float = 0.5,
    tracks: Iterable[Track] | None = None,
) -> list[PieceScores]:
    """Score every piece. Progressions shorter than n get ``None`` for that n."""
    tracks = None if tracks is None else list(tracks)
    models = {n: build_ngram_model(reference, n) for n in ns} if reference is not None else {}
    out = []
    for name, song in pieces:
        chords = song.chord_symbols()
        row = PieceScores(name, ags(song, tracks), {}, {}, {})
        for n in ns:
            if len(chords) < n:
                log.warning("%s: %d chords, skipping n=%d", name, len(chords), n)
                row.cpi[n] = row.cpvr[n] = row.cpr[n] = None
                continue
            row.cpi[n] = cpi(chords, n)
            if n in models:
                row.cpvr[n] = cpvr(chords, models[n], n)
                row.cpr[n] = lam * row.cpi[n] + (1.0 - lam) * row.cpvr[n]
            else:
                row.cpvr[n] = row.cpr[n] = None
        out.append(row)
    return out


def mean_or_none(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def aggregate(rows: Sequence[PieceScores], ns: Sequence[int] = (2, 3, 4)) -> dict[str, float | None]:
    """Unweighted per-piece means; pieces without a value for a metric are left out."""
    agg = {"AGS": mean_or_none(r.ags for r in rows)}
    for n in ns:
        agg[f"CPI{n}"] = mean_or_none(r.cpi.get(n) for r in rows)
        agg[f"CPVR{n}"] = mean_or_none(r.cpvr.get(n) for r in rows)
        agg[f"CPR{n}"] = mean_or_none(r.cpr.get(n) for r in rows)
    return agg


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_report(
    path: str | Path,
    rows: Sequence[PieceScores],
    ns: Sequence[int] = (2, 3, 4),
    lam: float = 0.5,
    reference_hash: str = "",
) -> None:
    """Long-format CSV: piece, metric, n, lambda, value, reference corpus hash.

    The aggregate appears as piece ``__mean__``; empty values mean undefined.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["piece", "metric", "n", "lambda", "value", "reference"])
        for r in rows:
            w.writerow([r.name, "AGS", "", "", _fmt(r.ags), ""])
            for n in ns:
                w.writerow([r.name, "CPI", n, "", _fmt(r.cpi.get(n)), ""])
                w.writerow([r.name, "CPVR", n, "", _fmt(r.cpvr.get(n)), reference_hash])
                w.writerow([r.name, "CPR", n, lam, _fmt(r.cpr.get(n)), reference_hash])
        agg = aggregate(rows, ns)
        w.writerow(["__mean__", "AGS", "", "", _fmt(agg["AGS"]), ""])
        for n in ns:
            w.writerow(["__mean__", "CPI", n, "", _fmt(agg[f"CPI{n}"]), ""])
            w.writerow(["__mean__", "CPVR", n, "", _fmt(agg[f"CPVR{n}"]), reference_hash])
            w.writerow(["__mean__", "CPR", n, lam, _fmt(agg[f"CPR{n}"]), reference_hash])
