import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hat_music.model import DEFAULT_SAMPLING
from hat_music.sampling import nucleus_distribution, sample_category, sample_from_probs, sample_token
from hat_music.tokenizer import CATEGORIES, Token

logit_lists = st.lists(st.floats(-20, 20), min_size=1, max_size=16)


class TestNucleus:
    @given(logit_lists, st.floats(0.05, 5.0), st.floats(0.01, 1.0))
    def test_is_distribution(self, logits, tau, rho):
        q = nucleus_distribution(logits, tau, rho)
        assert q.min() >= 0 and q.sum() == pytest.approx(1.0, abs=1e-12)
        # kept support is the smallest prefix of the sorted tempered distribution with mass >= rho
        z = np.asarray(logits) / tau
        p = np.exp(z - z.max())
        p /= p.sum()
        kept = np.flatnonzero(q)
        assert p[kept].sum() >= rho - 1e-12 or len(kept) == len(p)
        dropped = np.setdiff1d(np.arange(len(p)), kept)
        if len(dropped):
            assert p[dropped].max() <= p[kept].min() + 1e-15
            smaller = p[kept].sum() - p[kept].min()
            assert smaller < rho + 1e-12

    def test_top_p_truncation(self):
        probs = np.array([0.5, 0.3, 0.15, 0.05])
        q = nucleus_distribution(np.log(probs), 1.0, 0.8)
        np.testing.assert_allclose(q, [0.625, 0.375, 0, 0], rtol=1e-12)

    def test_one_hot_any_policy(self):
        rng = np.random.default_rng(0)
        logits = np.full(7, -np.inf)
        logits[4] = 0.0
        for tau, rho in [(0.1, 0.1), (1.0, 1.0), (3.0, 0.5)]:
            assert all(sample_category(logits, tau, rho, rng) == 4 for _ in range(50))

    def test_low_temperature_is_argmax(self):
        rng = np.random.default_rng(0)
        logits = np.array([0.1, 0.3, 0.29, -1.0])
        assert sample_category(logits, 0.0, 1.0, rng) == 1
        assert all(sample_category(logits, 1e-4, 1.0, rng) == 1 for _ in range(200))

    def test_invalid(self):
        with pytest.raises(ValueError):
            nucleus_distribution([0.0, 1.0], 1.0, 0.0)
        with pytest.raises(ValueError):
            nucleus_distribution([-np.inf, -np.inf], 1.0, 1.0)

    def test_frequencies_within_three_sigma(self):
        probs = np.array([0.05, 0.1, 0.15, 0.2, 0.5])
        n = 100_000
        rng = np.random.default_rng(12)
        draws = np.array([sample_from_probs(probs, 1.0, 1.0, rng) for _ in range(n)])
        freq = np.bincount(draws, minlength=len(probs))
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(freq - n * probs) <= 3 * sigma)


class TestSampleToken:
    def test_phrase_policy(self):
        assert DEFAULT_SAMPLING["phrase"] == (1.0, 0.99)

    def test_token_from_nine_distributions(self):
        rng = np.random.default_rng(0)
        logits = [np.eye(5)[k % 5] * 50 for k in range(9)]
        tok = sample_token(logits, DEFAULT_SAMPLING, rng)
        assert isinstance(tok, Token) and list(tok) == [k % 5 for k in range(9)]
        with pytest.raises(ValueError):
            sample_token(logits[:8], DEFAULT_SAMPLING, rng)

    def test_seeded(self):
        logits = [np.linspace(0, 1, 6)] * len(CATEGORIES)
        a = sample_token(logits, DEFAULT_SAMPLING, np.random.default_rng(5))
        b = sample_token(logits, DEFAULT_SAMPLING, np.random.default_rng(5))
        assert a == b
