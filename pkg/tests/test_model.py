import math

import numpy as np
import pytest
import torch

from hat_music.model import (
    DESK_EMBED_DIMS,
    HAT,
    DEFAULT_LOSS_WEIGHTS,
    HATConfig,
    Structure,
    StructureOverflow,
    Variant,
    loss_from_probs,
    sequence_loss,
)
from hat_music.nn import grad_check
from hat_music.tokenizer import BOS, CATEGORIES, CHORD, EOS, NOTE, PHRASE, default_vocabulary

from helpers import micro_config, micro_model, song_tokens

V = default_vocabulary()


class TestConfig:
    def test_defaults(self):
        cfg = HATConfig()
        assert sum(cfg.embed_dims.values()) == cfg.d_model == 64
        assert cfg.embed_dims == DESK_EMBED_DIMS
        assert cfg.loss_weights["type"] == cfg.loss_weights["bar"] == 5.0
        assert cfg.loss_weights["tempo"] == cfg.loss_weights["phrase"] == 10.0
        assert cfg.sampling["phrase"] == (1.0, 0.99)
        assert (cfg.max_song_len, cfg.max_texture_len, cfg.max_form_len) == (2560, 60, 30)

    def test_full_scale(self):
        cfg = HATConfig.full_scale()
        assert cfg.d_model == 512 and sum(cfg.embed_dims.values()) == 512
        assert (cfg.song_layers, cfg.song_heads) == (6, 8)
        assert (cfg.texture_layers, cfg.texture_heads) == (6, 4)
        assert (cfg.form_layers, cfg.form_heads) == (12, 8)

    @pytest.mark.parametrize(
        "bad",
        [
            dict(d_model=32),
            dict(max_form_len=0),
            dict(loss_weights={**DEFAULT_LOSS_WEIGHTS, "type": 0.0}),
            dict(dtype="float16"),
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            HATConfig(**bad)

    def test_dict_roundtrip(self):
        cfg = micro_config("texture")
        assert HATConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.variant is Variant.WITH_TEXTURE

    def test_variant_aliases(self):
        assert Variant.parse("form") is Variant.WITH_FORM
        assert Variant.parse("full") is Variant.FULL
        with pytest.raises(ValueError):
            Variant.parse("nope")


class TestEmbedding:
    def test_width_and_locality(self):
        model = micro_model()
        toks = torch.as_tensor(song_tokens()[:6])
        note = next(i for i, t in enumerate(toks) if t[0] == NOTE)
        a = toks[note].clone()
        b = a.clone()
        b[7] = (b[7] % 120) + 3  # another pitch
        ea, eb = model.embed(torch.stack([a, b]))
        assert ea.shape == (64,)
        offsets = np.cumsum([0] + [model.config.embed_dims[c] for c in CATEGORIES])
        lo, hi = offsets[7], offsets[8]
        diff = (ea != eb).nonzero().flatten()
        assert diff.numel() > 0 and diff.min() >= lo and diff.max() < hi

    def test_bos_deterministic(self):
        bos = torch.tensor([[BOS] + [0] * 8])
        assert torch.equal(micro_model(seed=4).embed(bos), micro_model(seed=4).embed(bos))

    def test_out_of_vocabulary(self):
        model = micro_model()
        bad = torch.tensor([[NOTE, 1, 1, 1, 1, 1, 1, 129, 1]])
        with pytest.raises(IndexError):
            model.embed(bad)


class TestSongStacks:
    def test_single_row_and_overlength(self):
        model = micro_model(max_song_len=8)
        emb = model.embed(torch.tensor([[BOS] + [0] * 8]))
        assert model.bottom_forward(emb).shape == (1, 64)
        with pytest.raises(ValueError):
            model.bottom_forward(torch.zeros(9, 64, dtype=torch.float64))

    def test_deterministic_construction(self):
        a, b = HAT(micro_config(seed=5)), HAT(micro_config(seed=5))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        c = HAT(micro_config(seed=6))
        assert not torch.equal(next(a.parameters()), next(c.parameters()))

    def test_construction_leaves_global_rng_alone(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        HAT(micro_config())
        assert torch.equal(torch.rand(3), expected)


class TestStructureModule:
    def test_structure_grouping(self):
        st = Structure.from_types([BOS, CHORD, PHRASE, CHORD, NOTE, CHORD, PHRASE, PHRASE, CHORD, EOS])
        assert st.phrases == [2, 6, 7]
        assert st.groups == [[3, 5], [], [8]]
        assert st.orphans == [1]

    def test_base_is_identity(self):
        model = micro_model("base")
        S = torch.randn(10, 64, dtype=torch.float64)
        types = [BOS, PHRASE, CHORD, NOTE, CHORD, PHRASE, CHORD, NOTE, NOTE, EOS]
        assert torch.equal(model.hse_forward(S, types), S)
        assert (model.trace.texture_calls, model.trace.form_calls) == (0, 0)

    def test_one_phrase_one_chord(self):
        model = micro_model()
        S = torch.randn(4, 64, dtype=torch.float64)
        out = model.hse_forward(S, [BOS, PHRASE, CHORD, NOTE])
        assert torch.equal(out[[0, 1, 3]], S[[0, 1, 3]])
        assert torch.equal(out[2], S[1] + S[2])

    def test_matches_hand_assembled_update(self):
        """Recompute the phrase/chord updates with unpadded texture and form passes."""
        model = micro_model()
        types = [BOS, CHORD, PHRASE, CHORD, NOTE, CHORD, NOTE, PHRASE, NOTE, PHRASE, CHORD, CHORD, CHORD, NOTE, EOS]
        S = torch.randn(len(types), 64, dtype=torch.float64)
        out = model.hse_forward(S, types)
        pe = model._pe
        phrases, groups = [2, 7, 9], [[3, 5], [], [10, 11, 12]]
        textures, summaries = [], []
        for p, g in zip(phrases, groups):
            if g:
                x = S[g] + S[p]
                t = model.texture(x + pe(len(g)))
                textures.append(t)
                summaries.append(t[-1])
            else:
                textures.append(None)
                summaries.append(torch.zeros(64, dtype=torch.float64))
        tf = model.form(torch.stack(summaries) + pe(3))
        expected = S.clone()
        expected[7] = S[7] + tf[0]
        expected[9] = S[9] + tf[1]
        for p, g, t in zip(phrases, groups, textures):
            for j, c in enumerate(g):
                expected[c] = expected[p] + S[c] + (t[j - 1] if j else 0)
        torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)
        # pass-through rows are bit-identical: BOS, the orphan chord, notes, EOS
        keep = [0, 1, 4, 6, 8, 13, 14]
        assert torch.equal(out[keep], S[keep])

    def test_with_form_touches_only_phrases(self):
        model = micro_model("form")
        types = [BOS, PHRASE, CHORD, NOTE, PHRASE, CHORD, CHORD, PHRASE, NOTE, EOS]
        S = torch.randn(len(types), 64, dtype=torch.float64)
        out = model.hse_forward(S, types)
        assert model.texture is None
        assert (model.trace.texture_calls, model.trace.form_calls) == (0, 1)
        assert model.trace.chord_rows_updated == 0 and model.trace.phrase_rows_updated == 2
        changed = [i for i in range(len(types)) if not torch.equal(out[i], S[i])]
        assert changed == [4, 7]
        tf = model.form(S[[1, 4, 7]] + model._pe(3))
        torch.testing.assert_close(out[7], S[7] + tf[1], rtol=0, atol=1e-12)

    def test_with_texture_touches_only_chords(self):
        model = micro_model("texture")
        types = [BOS, PHRASE, CHORD, NOTE, PHRASE, CHORD, CHORD, PHRASE, NOTE, EOS]
        S = torch.randn(len(types), 64, dtype=torch.float64)
        out = model.hse_forward(S, types)
        assert model.form is None
        assert (model.trace.texture_calls, model.trace.form_calls) == (1, 0)
        assert model.trace.phrase_rows_updated == 0
        changed = [i for i in range(len(types)) if not torch.equal(out[i], S[i])]
        assert changed == [5, 6]
        t = model.texture(S[[2, 5, 6]] + model._pe(3))
        torch.testing.assert_close(out[6], S[6] + t[1], rtol=0, atol=1e-12)

    def test_overflow(self):
        model = micro_model(max_texture_len=2, max_form_len=2)
        with pytest.raises(StructureOverflow):
            model.hse_forward(torch.zeros(5, 64, dtype=torch.float64), [BOS, PHRASE, CHORD, CHORD, CHORD])
        with pytest.raises(StructureOverflow):
            model.hse_forward(torch.zeros(4, 64, dtype=torch.float64), [BOS, PHRASE, PHRASE, PHRASE])


class TestHeads:
    def test_distributions(self):
        model = micro_model()
        seq = song_tokens()
        probs = model.predict_proba(seq)
        assert [p.shape for p in probs] == [(len(seq) - 1, V.size(c)) for c in CATEGORIES]
        for p in probs:
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_second_stage_depends_on_type(self):
        model = micro_model()
        h = torch.randn(1, 64, dtype=torch.float64)
        a = model.head_logits(h, torch.tensor([NOTE]))
        b = model.head_logits(h, torch.tensor([CHORD]))
        assert torch.equal(a[0], b[0])
        assert all(not torch.equal(x, y) for x, y in zip(a[1:], b[1:]))

    def test_missing_type(self):
        with pytest.raises(ValueError):
            micro_model().head_logits(torch.zeros(1, 64, dtype=torch.float64), None)


class TestLoss:
    def _targets(self):
        return song_tokens()[1:12]

    def test_perfect_predictions(self):
        t = self._targets()
        probs = [np.eye(V.size(c))[t[:, k]] for k, c in enumerate(CATEGORIES)]
        assert loss_from_probs(probs, t, DEFAULT_LOSS_WEIGHTS) == 0.0

    def test_uniform_predictions(self):
        t = self._targets()
        logits = [torch.zeros(len(t), V.size(c), dtype=torch.float64) for c in CATEGORIES]
        expected = len(t) * sum(DEFAULT_LOSS_WEIGHTS[c] * math.log(V.size(c)) for c in CATEGORIES)
        assert sequence_loss(logits, t, DEFAULT_LOSS_WEIGHTS).item() == pytest.approx(expected, rel=1e-12)

    def test_linear_in_weights(self):
        model = micro_model()
        seq = song_tokens()
        logits = model(seq)
        one = sequence_loss(logits, seq[1:], DEFAULT_LOSS_WEIGHTS)
        two = sequence_loss(logits, seq[1:], {c: 2 * w for c, w in DEFAULT_LOSS_WEIGHTS.items()})
        assert two.item() == pytest.approx(2 * one.item(), rel=1e-12)
        assert one.item() > 0
        probs = model.predict_proba(seq)
        assert loss_from_probs(probs, seq[1:], DEFAULT_LOSS_WEIGHTS) == pytest.approx(one.item(), rel=1e-9)

    def test_length_mismatch(self):
        logits = [torch.zeros(3, V.size(c)) for c in CATEGORIES]
        with pytest.raises(ValueError):
            sequence_loss(logits, self._targets()[:4], DEFAULT_LOSS_WEIGHTS)


class TestCausality:
    @pytest.mark.parametrize("variant", ["base", "form", "texture", "full"])
    def test_perturbations(self, variant):
        model = micro_model(variant)
        seq = song_tokens()[:60]
        rng = np.random.default_rng(1)
        types = seq[1:, 0]
        base = model.forward(seq[:-1], next_types=types)
        for _ in range(8):
            j = int(rng.integers(1, len(seq) - 1))
            other = seq.copy()
            other[j] = [rng.integers(V.size(c)) for c in CATEGORIES]
            other[j, 0] = rng.choice([PHRASE, CHORD, NOTE])
            out = model.forward(other[:-1], next_types=types)
            for a, b in zip(base, out):
                assert torch.equal(a[:j], b[:j])


class TestGradient:
    def test_micro_gradcheck(self):
        model = micro_model(seed=2, jitter=0.1, max_texture_len=4, max_form_len=4)
        seq = song_tokens(form="iAB")[:24]
        err = grad_check(
            lambda: sequence_loss(model(seq), seq[1:], model.config.loss_weights) / (len(seq) - 1),
            list(model.parameters()),
            max_entries=2,
            seed=2,
        )
        assert err < 1e-4
