"""Next-token prediction evaluation: dataset splits, accuracy/MSE per token type, MSE trends."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, TypeVar

import numpy as np

from .tokenizer import CATEGORIES, IGNORE, TYPE_NAMES

T = TypeVar("T")

SPLIT_RATIO = (773, 41, 43)

PredictFn = Callable[[np.ndarray], Sequence[np.ndarray]]


class EvalError(ValueError):
    pass


def split_sizes(n: int, ratio: Sequence[int] = SPLIT_RATIO) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items; every part gets at least one."""
    if n < len(ratio):
        raise EvalError(f"need at least {len(ratio)} songs to split, got {n}")
    total = sum(ratio)
    quotas = [n * r / total for r in ratio]
    sizes = [math.floor(q) for q in quotas]
    by_remainder = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return tuple(sizes)


def split_dataset(items: Sequence[T], seed: int) -> tuple[list[T], list[T], list[T]]:
    """Seeded train/valid/test split in proportions 773:41:43."""
    n_train, n_valid, _ = split_sizes(len(items))
    order = np.random.default_rng(seed).permutation(len(items))
    pick = lambda idx: [items[i] for i in sorted(idx)]
    return (
        pick(order[:n_train]),
        pick(order[n_train : n_train + n_valid]),
        pick(order[n_train + n_valid :]),
    )


@dataclass(frozen=True)
class EvalRecord:
    sequence: int
    position: int  # index of the predicted token in its sequence
    type: int
    correct: tuple[bool | None, ...]  # per category; None where the target is IGNORE
    mse: tuple[float, ...]  # per category
    progress: float

    @property
    def accurate(self) -> bool:
        return all(c for c in self.correct if c is not None)

    @property
    def mean_mse(self) -> float:
        return math.fsum(self.mse) / len(self.mse)


def model_predictor(model) -> PredictFn:
    sizes = getattr(model.config, "vocab_sizes", None)

    def predict(seq):
        if sizes is not None:
            _check_indices(seq, [sizes[c] for c in CATEGORIES])
        return model.predict_proba(seq)

    return predict


def _check_indices(seq: np.ndarray, widths: Sequence[int]) -> None:
    for k, c in enumerate(CATEGORIES):
        top = int(seq[:, k].max())
        if top >= widths[k] or int(seq[:, k].min()) < 0:
            raise EvalError(f"{c} index {top} outside the model vocabulary of size {widths[k]}")


def sequence_records(seq_id: int, seq: np.ndarray, probs: Sequence[np.ndarray]) -> list[EvalRecord]:
    targets = seq[1:]
    n = len(targets)
    if len(probs) != len(CATEGORIES) or any(p.shape[0] != n for p in probs):
        raise EvalError("prediction shape does not match the sequence")
    _check_indices(seq, [p.shape[1] for p in probs])
    totals = np.bincount(targets[:, 0], minlength=len(TYPE_NAMES))
    seen = np.zeros(len(TYPE_NAMES), dtype=int)
    argmax = [p.argmax(axis=1) for p in probs]
    records = []
    for i in range(n):
        correct, mse = [], []
        for k in range(len(CATEGORIES)):
            t = int(targets[i, k])
            p = probs[k][i]
            err = p.copy()
            err[t] -= 1.0
            mse.append(float(np.mean(err * err)))
            applicable = k == 0 or t != IGNORE
            correct.append(bool(argmax[k][i] == t) if applicable else None)
        kind = int(targets[i, 0])
        records.append(EvalRecord(seq_id, i + 1, kind, tuple(correct), tuple(mse), seen[kind] / totals[kind]))
        seen[kind] += 1
    return records


def next_token_eval(predict, sequences: Sequence, workers: int = 1) -> list[EvalRecord]:
    """Teacher-forced next-token records for every position of every sequence.

    ``predict`` is a model (anything with ``predict_proba``) or a callable
    mapping an (L, 9) token array to nine (L - 1, K_c) probability arrays.
    Records come back ordered by (sequence, position) whatever ``workers`` is.
    """
    fn = model_predictor(predict) if hasattr(predict, "predict_proba") else predict
    arrays = [np.asarray(s, dtype=np.int64) for s in sequences]

    def one(item):
        i, seq = item
        return sequence_records(i, seq, fn(seq))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(one, enumerate(arrays)))
    else:
        chunks = [one(item) for item in enumerate(arrays)]
    return [r for chunk in chunks for r in chunk]


def summarize(records: Sequence[EvalRecord]) -> dict[str, dict[str, float]]:
    """Per-type accuracy/MSE, plus a ``Type`` row scoring only the type head over all positions."""
    out: dict[str, dict[str, float]] = {}
    if records:
        out["Type"] = {
            "count": len(records),
            "accuracy": sum(bool(r.correct[0]) for r in records) / len(records),
            "mse": math.fsum(r.mse[0] for r in records) / len(records),
        }
    for kind, name in enumerate(TYPE_NAMES):
        rows = [r for r in records if r.type == kind]
        if rows:
            out[name] = {
                "count": len(rows),
                "accuracy": sum(r.accurate for r in rows) / len(rows),
                "mse": math.fsum(r.mean_mse for r in rows) / len(rows),
            }
    return out


@dataclass(frozen=True)
class TrendRow:
    type: str
    bin: int
    lo: float
    hi: float
    count: int
    mean_mse: float | None

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)


def mse_trend(records: Sequence[EvalRecord], bins: int = 10, types: Sequence[str] = ("Phrase", "Chord", "Note")) -> list[TrendRow]:
    """Mean MSE per equal-width progress bin and token type; empty bins get ``None``."""
    if bins < 1:
        raise EvalError("need at least one bin")
    rows = []
    for name in types:
        kind = TYPE_NAMES.index(name)
        buckets: list[list[float]] = [[] for _ in range(bins)]
        for r in records:
            if r.type == kind:
                buckets[min(int(r.progress * bins), bins - 1)].append(r.mean_mse)
        for b, vals in enumerate(buckets):
            mean = math.fsum(vals) / len(vals) if vals else None
            rows.append(TrendRow(name, b, b / bins, (b + 1) / bins, len(vals), mean))
    return rows


def write_summary_csv(path: str | Path, summary: dict[str, dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type", "count", "accuracy", "mse"])
        for name, s in summary.items():
            w.writerow([name, s["count"], f"{s['accuracy']:.6f}", f"{s['mse']:.8f}"])


def write_trend_csv(path: str | Path, rows: Sequence[TrendRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["type", "bin", "lo", "hi", "center", "count", "mean_mse"])
        for r in rows:
            mean = "null" if r.mean_mse is None else f"{r.mean_mse:.8f}"
            w.writerow([r.type, r.bin, f"{r.lo:.3f}", f"{r.hi:.3f}", f"{r.center:.3f}", r.count, mean])
