"""Temperature + nucleus (top-p) sampling, one policy per event category."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .tokenizer import CATEGORIES, Token


_MASS_TOL = 1e-12


def _softmax(z: np.ndarray) -> np.ndarray:
    finite = np.isfinite(z)
    if not finite.any():
        raise ValueError("degenerate distribution: no finite logits")
    e = np.where(finite, np.exp(z - z[finite].max()), 0.0)
    return e / e.sum()


def nucleus_distribution(logits, temperature: float, top_p: float) -> np.ndarray:
    """The renormalized distribution the sampler actually draws from.

    Logits are divided by ``temperature``; then the smallest set of most
    probable symbols whose mass reaches ``top_p`` is kept. ``temperature <= 0``
    means greedy (all mass on the argmax).
    """
    z = np.asarray(logits, dtype=np.float64)
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    if temperature <= 0:
        out = np.zeros_like(z)
        out[int(np.argmax(z))] = 1.0
        return out
    p = _softmax(z / temperature)
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    # mass within rounding of top_p counts as reaching it
    keep = min(int(np.searchsorted(cum, top_p - _MASS_TOL)) + 1, len(p))
    out = np.zeros_like(p)
    out[order[:keep]] = p[order[:keep]]
    total = out.sum()
    if total <= 0:
        raise ValueError("degenerate distribution after truncation")
    return out / total


def sample_category(logits, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    q = nucleus_distribution(logits, temperature, top_p)
    idx = int(np.searchsorted(np.cumsum(q), rng.random(), side="right"))
    # guard against the cumulative sum ending a hair below 1
    return min(idx, int(np.flatnonzero(q)[-1]))


def sample_from_probs(probs, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    with np.errstate(divide="ignore"):
        return sample_category(np.log(np.asarray(probs, dtype=np.float64)), temperature, top_p, rng)


def sample_token(
    logits: Sequence, policy: Mapping[str, tuple[float, float]], rng: np.random.Generator
) -> Token:
    """Draw every category independently from its own (temperature, top_p) policy."""
    if len(logits) != len(CATEGORIES):
        raise ValueError(f"expected {len(CATEGORIES)} distributions, got {len(logits)}")
    return Token(*(sample_category(lg, *policy[c], rng) for c, lg in zip(CATEGORIES, logits)))
