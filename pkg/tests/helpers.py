"""Small model configurations and token sequences used across test modules."""

import numpy as np
import torch

from hat_music.model import HAT, HATConfig
from hat_music.synthetic import make_song
from hat_music.tokenizer import tokenize


def micro_config(variant="full", dtype="float64", **overrides) -> HATConfig:
    base = dict(
        d_model=64,
        song_layers=2,
        song_heads=4,
        texture_layers=2,
        texture_heads=2,
        form_layers=2,
        form_heads=4,
        max_song_len=512,
        max_texture_len=16,
        max_form_len=12,
        variant=variant,
        dtype=dtype,
    )
    base.update(overrides)
    return HATConfig(**base)


def micro_model(variant="full", dtype="float64", seed=0, jitter=0.3, **overrides) -> HAT:
    """A seeded model whose weights are pushed away from the near-uniform init."""
    model = HAT(micro_config(variant, dtype, seed=seed, **overrides))
    if jitter:
        g = torch.Generator().manual_seed(seed + 1000)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(jitter * torch.randn(p.shape, generator=g, dtype=p.dtype))
    model.eval()
    return model


def song_tokens(seed=3, form="iABAB", chords_per_bar=1, bars_per_phrase=2) -> np.ndarray:
    song = make_song(seed, form=form, chords_per_bar=chords_per_bar, bars_per_phrase=bars_per_phrase)
    return np.asarray(tokenize(song), dtype=np.int64)


def long_tokens(length=301) -> np.ndarray:
    """At least ``length`` tokens from a many-phrase synthetic song, cut to ``length``."""
    toks = song_tokens(3, form="iABABCAB", chords_per_bar=2, bars_per_phrase=4)
    assert len(toks) >= length
    return toks[:length]


def random_type_sequences(count, length, seed=0, vocab_sizes=None):
    """Token sequences whose types are i.i.d. uniform over all five types.

    Every other field is uniform over its vocabulary, so the target at any
    position is independent of the prefix a model sees.
    """
    from hat_music.tokenizer import CATEGORIES, default_vocabulary

    sizes = vocab_sizes or default_vocabulary().sizes
    rng = np.random.default_rng(seed)
    cols = [rng.integers(0, sizes[c], size=(count, length)) for c in CATEGORIES]
    return list(np.stack(cols, axis=-1))


def binomial_interval(n, p, level=0.99):
    """Central interval [lo, hi] holding ``level`` of the Binomial(n, p) mass."""
    from scipy.stats import binom

    lo, hi = binom.interval(level, n, p)
    return int(lo), int(hi)
