"""HAT: a hierarchical transformer over phrase, chord and note tokens.

Pipeline for a token sequence: per-category embeddings are concatenated,
a bottom song-level stack runs over every token, the structure module
rewrites phrase and chord rows using a texture stack (chords grouped by
phrase) and a form stack (one texture summary per phrase), a top
song-level stack mixes everything again, and two-stage heads predict the
next token's type and then its other eight categories.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .nn import MLP, INIT_STD, LayerCache, TransformerStack, check_finite, positional_encoding
from .tokenizer import CATEGORIES, CHORD, PHRASE, default_vocabulary

DESK_EMBED_DIMS = {
    "type": 8,
    "bar": 8,
    "beat": 8,
    "tempo": 4,
    "phrase": 8,
    "chord": 12,
    "track": 4,
    "pitch": 8,
    "duration": 4,
}

DEFAULT_LOSS_WEIGHTS = {
    "type": 5.0,
    "bar": 5.0,
    "beat": 1.0,
    "tempo": 10.0,
    "phrase": 10.0,
    "chord": 1.0,
    "track": 1.0,
    "pitch": 1.0,
    "duration": 1.0,
}

# (temperature, top_p) per category
DEFAULT_SAMPLING = {
    "type": (1.0, 0.90),
    "bar": (1.2, 1.0),
    "beat": (1.2, 1.0),
    "tempo": (1.2, 0.90),
    "phrase": (1.0, 0.99),
    "chord": (1.0, 0.99),
    "track": (1.0, 1.0),
    "pitch": (1.0, 0.90),
    "duration": (2.0, 0.90),
}


class Variant(str, enum.Enum):
    BASE = "base"
    WITH_FORM = "with_form"
    WITH_TEXTURE = "with_texture"
    FULL = "full"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        aliases = {"form": cls.WITH_FORM, "texture": cls.WITH_TEXTURE}
        return aliases.get(name) or cls(name)


class StructureOverflow(ValueError):
    """A phrase has more chords, or a song more phrases, than the stacks accept."""


@dataclass
class HATConfig:
    d_model: int = 64
    embed_dims: dict[str, int] = field(default_factory=lambda: dict(DESK_EMBED_DIMS))
    song_layers: int = 2
    song_heads: int = 4
    texture_layers: int = 2
    texture_heads: int = 2
    form_layers: int = 2
    form_heads: int = 4
    max_song_len: int = 2560
    max_texture_len: int = 60
    max_form_len: int = 30
    loss_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    variant: Variant = Variant.FULL
    sampling: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_SAMPLING))
    vocab_sizes: dict[str, int] = field(default_factory=lambda: default_vocabulary().sizes)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant) if isinstance(self.variant, str) else self.variant
        self.sampling = {k: tuple(v) for k, v in self.sampling.items()}
        if set(self.embed_dims) != set(CATEGORIES):
            raise ValueError("embed_dims must name all nine categories")
        if sum(self.embed_dims.values()) != self.d_model:
            raise ValueError(f"embedding dims sum to {sum(self.embed_dims.values())}, expected {self.d_model}")
        if min(self.max_song_len, self.max_texture_len, self.max_form_len) < 1:
            raise ValueError("max lengths must be positive")
        if any(w <= 0 for w in self.loss_weights.values()) or set(self.loss_weights) != set(CATEGORIES):
            raise ValueError("loss weights must be positive and cover all categories")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @classmethod
    def full_scale(cls, **overrides) -> "HATConfig":
        """Full-scale hyperparameters (D=512; 6/8, 6/4 and 12/8 layers/heads)."""
        scale = 512 // 64
        base = dict(
            d_model=512,
            embed_dims={k: v * scale for k, v in DESK_EMBED_DIMS.items()},
            song_layers=6,
            song_heads=8,
            texture_layers=6,
            texture_heads=4,
            form_layers=12,
            form_heads=8,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["sampling"] = {k: list(v) for k, v in self.sampling.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HATConfig":
        return cls(**d)


@dataclass
class Structure:
    """Grouping of phrase and chord positions derived from token types alone."""

    phrases: list[int]
    groups: list[list[int]]  # chord positions of each phrase
    orphans: list[int]  # chord positions before the first phrase

    @classmethod
    def from_types(cls, types: Sequence[int]) -> "Structure":
        phrases, groups, orphans = [], [], []
        for i, t in enumerate(types):
            if t == PHRASE:
                phrases.append(i)
                groups.append([])
            elif t == CHORD:
                (groups[-1] if groups else orphans).append(i)
        return cls(phrases, groups, orphans)

    @property
    def chords(self) -> list[int]:
        return sorted(self.orphans + [c for g in self.groups for c in g])


@dataclass
class HSETrace:
    """Which structure paths the last forward pass used."""

    texture_calls: int = 0
    form_calls: int = 0
    phrase_rows_updated: int = 0
    chord_rows_updated: int = 0


@dataclass
class StructureState:
    """Recurrent state for token-by-token decoding."""

    bottom_cache: list[LayerCache]
    top_cache: list[LayerCache]
    position: int = 0
    phrase_index: int = 0  # phrases seen so far
    chord_index: int = 0  # chords seen in the current phrase
    last_texture: torch.Tensor | None = None  # texture output at the previous chord
    last_form: torch.Tensor | None = None  # form output at the previous phrase
    phrase_raw: torch.Tensor | None = None  # current phrase row before the update
    phrase_updated: torch.Tensor | None = None  # current phrase row after the update
    chord_buffer: list[torch.Tensor] = field(default_factory=list)
    form_inputs: list[torch.Tensor] = field(default_factory=list)


class HAT(nn.Module):
    def __init__(self, config: HATConfig | None = None):
        super().__init__()
        self.config = config = config or HATConfig()
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self._build(config)
        self.to(config.torch_dtype)
        self.trace = HSETrace()

    def _build(self, config: HATConfig):
        D = config.d_model
        # ModuleList in category order; "type" would clash with nn.Module.type
        self.embeddings = nn.ModuleList(nn.Embedding(config.vocab_sizes[c], config.embed_dims[c]) for c in CATEGORIES)
        self.bottom = TransformerStack(config.song_layers, D, config.song_heads)
        self.top = TransformerStack(config.song_layers, D, config.song_heads)
        v = config.variant
        self.texture = (
            TransformerStack(config.texture_layers, D, config.texture_heads)
            if v in (Variant.FULL, Variant.WITH_TEXTURE)
            else None
        )
        self.form = (
            TransformerStack(config.form_layers, D, config.form_heads)
            if v in (Variant.FULL, Variant.WITH_FORM)
            else None
        )
        d_tp = config.embed_dims["type"]
        self.type_head = MLP(D, D, config.vocab_sizes["type"])
        self.head_type_embedding = nn.Embedding(config.vocab_sizes["type"], d_tp)
        self.heads = nn.ModuleList(MLP(D + d_tp, D, config.vocab_sizes[c]) for c in CATEGORIES[1:])
        for emb in [*self.embeddings, self.head_type_embedding]:
            nn.init.normal_(emb.weight, 0.0, INIT_STD)

    @property
    def dtype(self):
        return self.config.torch_dtype

    def _pe(self, length: int) -> torch.Tensor:
        return positional_encoding(length, self.config.d_model, dtype=self.dtype)

    # --- batch forward ------------------------------------------------------

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        sizes = self.config.vocab_sizes
        for k, c in enumerate(CATEGORIES):
            col = tokens[..., k]
            if col.numel() and (col.min() < 0 or col.max() >= sizes[c]):
                raise IndexError(f"{c} index out of vocabulary")
        return torch.cat([emb(tokens[..., k]) for k, emb in enumerate(self.embeddings)], dim=-1)

    def bottom_forward(self, emb: torch.Tensor) -> torch.Tensor:
        self._check_len(emb.shape[0])
        return self.bottom(emb + self._pe(emb.shape[0]))

    def top_forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_len(x.shape[0])
        return self.top(x + self._pe(x.shape[0]))

    def _check_len(self, length: int):
        if length > self.config.max_song_len:
            raise ValueError(f"sequence of {length} tokens exceeds max length {self.config.max_song_len}")

    def hse_forward(self, S: torch.Tensor, types: Sequence[int]) -> torch.Tensor:
        """Structure-enhancement of phrase and chord rows; other rows pass through."""
        self.trace = HSETrace()
        v = self.config.variant
        if v is Variant.BASE:
            return S
        st = Structure.from_types([int(t) for t in types])
        if v is Variant.FULL:
            positions, rows = self._hse_full(S, st)
        elif v is Variant.WITH_FORM:
            positions, rows = self._hse_form_only(S, st)
        else:
            positions, rows = self._hse_texture_only(S, st)
        if not positions:
            return S
        idx = torch.tensor(positions, dtype=torch.long)
        return S.index_copy(0, idx, rows)

    def _texture_groups(self, S, phrase_rows, groups):
        """Texture stack over each phrase's chords, padded to the texture max length."""
        cfg = self.config
        P, D, T = len(groups), S.shape[-1], cfg.max_texture_len
        for g in groups:
            if len(g) > T:
                raise StructureOverflow(f"phrase with {len(g)} chords exceeds texture max {T}")
        index = torch.zeros(P, T, dtype=torch.long)
        mask = torch.zeros(P, T, 1, dtype=self.dtype)
        for k, g in enumerate(groups):
            index[k, : len(g)] = torch.tensor(g, dtype=torch.long)
            mask[k, : len(g)] = 1
        x = S[index] * mask + phrase_rows[:, None, :]
        self.trace.texture_calls += 1
        return self.texture(x + self._pe(T))

    def _form(self, rows: torch.Tensor) -> torch.Tensor:
        """Form stack over per-phrase summaries, padded to the form max length."""
        n, F_max = rows.shape[0], self.config.max_form_len
        if n > F_max:
            raise StructureOverflow(f"{n} phrases exceed form max {F_max}")
        pad = torch.zeros(F_max - n, rows.shape[-1], dtype=self.dtype)
        self.trace.form_calls += 1
        return self.form(torch.cat([rows, pad]) + self._pe(F_max))[:n]

    def _hse_full(self, S, st: Structure):
        if not st.phrases:
            return [], None
        D = S.shape[-1]
        phrase_rows = S[st.phrases]
        textures = self._texture_groups(S, phrase_rows, st.groups)
        lengths = torch.tensor([len(g) for g in st.groups])
        last = textures[torch.arange(len(st.groups)), (lengths - 1).clamp(min=0)]
        phrase_textures = torch.where((lengths > 0)[:, None], last, torch.zeros(D, dtype=self.dtype))
        tf = self._form(phrase_textures)
        phrase_new = torch.cat([phrase_rows[:1], phrase_rows[1:] + tf[:-1]])

        chord_pos, chord_k, chord_j = [], [], []
        for k, g in enumerate(st.groups):
            for j, c in enumerate(g):
                chord_pos.append(c)
                chord_k.append(k)
                chord_j.append(j)
        positions = list(st.phrases)
        rows = [phrase_new]
        if chord_pos:
            k = torch.tensor(chord_k)
            j = torch.tensor(chord_j)
            prev = torch.where((j > 0)[:, None], textures[k, (j - 1).clamp(min=0)], torch.zeros(D, dtype=self.dtype))
            rows.append(phrase_new[k] + prev + S[chord_pos])
            positions += chord_pos
        self.trace.phrase_rows_updated = len(st.phrases) - 1
        self.trace.chord_rows_updated = len(chord_pos)
        return positions, torch.cat(rows)

    def _hse_form_only(self, S, st: Structure):
        if not st.phrases:
            return [], None
        phrase_rows = S[st.phrases]
        tf = self._form(phrase_rows)
        self.trace.phrase_rows_updated = len(st.phrases) - 1
        return list(st.phrases), torch.cat([phrase_rows[:1], phrase_rows[1:] + tf[:-1]])

    def _hse_texture_only(self, S, st: Structure):
        chords = st.chords
        if not chords:
            return [], None
        rows = S[chords]
        self.trace.texture_calls += 1
        textures = self.texture(rows + self._pe(len(chords)))
        self.trace.chord_rows_updated = len(chords) - 1
        return chords, torch.cat([rows[:1], rows[1:] + textures[:-1]])

    def head_logits(self, hidden: torch.Tensor, types: torch.Tensor) -> list[torch.Tensor]:
        """Stage one predicts the type; stage two predicts the rest given ``types``."""
        if types is None:
            raise ValueError("second-stage heads need the next-token type")
        out = [self.type_head(hidden)]
        cond = torch.cat([hidden, self.head_type_embedding(types)], dim=-1)
        out += [head(cond) for head in self.heads]
        return out

    def forward(self, tokens, next_types=None) -> list[torch.Tensor]:
        """Logits (L, K_c) for every category at every input position.

        ``next_types`` are the types conditioning the second stage; by default
        the types of ``tokens`` shifted left, which requires ``tokens`` to hold
        one more token than is predicted. Pass them explicitly to score
        ``tokens`` as inputs only.
        """
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        if next_types is None:
            next_types = tokens[1:, 0]
            tokens = tokens[:-1]
        next_types = torch.as_tensor(np.asarray(next_types), dtype=torch.long)
        hidden = self.hidden_states(tokens)
        return self.head_logits(hidden, next_types)

    def hidden_states(self, tokens: torch.Tensor) -> torch.Tensor:
        s = self.bottom_forward(self.embed(tokens))
        s = self.hse_forward(s, tokens[:, 0].tolist())
        return check_finite(self.top_forward(s), "top song output")

    @torch.no_grad()
    def predict_proba(self, sequence) -> list[np.ndarray]:
        """Per-position distributions for predicting ``sequence[1:]`` (teacher-forced types)."""
        logits = self.forward(sequence)
        return [torch.softmax(l, dim=-1).double().numpy() for l in logits]

    # --- incremental decoding ----------------------------------------------

    def start_state(self) -> StructureState:
        z = torch.zeros(self.config.d_model, dtype=self.dtype)
        return StructureState(
            bottom_cache=self.bottom.new_cache(),
            top_cache=self.top.new_cache(),
            last_texture=z,
            last_form=z,
        )

    def step(self, token: Sequence[int], state: StructureState) -> torch.Tensor:
        """Consume one input token and return its top-stack output row."""
        cfg = self.config
        if state.position >= cfg.max_song_len:
            raise ValueError(f"sequence exceeds max length {cfg.max_song_len}")
        tok = torch.as_tensor(np.asarray(token), dtype=torch.long)
        pe = self._pe(state.position + 1)[-1]
        s = self.bottom.step(self.embed(tok) + pe, state.bottom_cache)
        kind = int(tok[0])
        v = cfg.variant
        if kind == PHRASE and v in (Variant.FULL, Variant.WITH_FORM):
            s = self._step_phrase(s, state)
        elif kind == CHORD and v is Variant.FULL and state.phrase_index > 0:
            s = self._step_chord(s, state)
        elif kind == CHORD and v is Variant.WITH_TEXTURE:
            s = self._step_chord_flat(s, state)
        out = self.top.step(s + pe, state.top_cache)
        state.position += 1
        return check_finite(out, "top song output")

    def _step_phrase(self, s, state: StructureState):
        full = self.config.variant is Variant.FULL
        if state.phrase_index + 1 > self.config.max_form_len:
            raise StructureOverflow(f"more than {self.config.max_form_len} phrases")
        if state.phrase_index > 0:
            # summary of the phrase that just ended
            state.form_inputs.append(state.last_texture if full else state.phrase_raw)
            rows = torch.stack(state.form_inputs)
            state.last_form = self.form(rows + self._pe(len(rows)))[-1]
            updated = s + state.last_form
        else:
            updated = s
        state.phrase_raw, state.phrase_updated = s, updated
        state.phrase_index += 1
        state.chord_index = 0
        state.chord_buffer = []
        state.last_texture = torch.zeros_like(s)
        return updated

    def _step_chord(self, s, state: StructureState):
        if state.chord_index + 1 > self.config.max_texture_len:
            raise StructureOverflow(f"phrase exceeds {self.config.max_texture_len} chords")
        updated = state.phrase_updated + state.last_texture + s
        state.chord_buffer.append(s)
        x = torch.stack(state.chord_buffer) + state.phrase_raw
        state.last_texture = self.texture(x + self._pe(len(x)))[-1]
        state.chord_index += 1
        return updated

    def _step_chord_flat(self, s, state: StructureState):
        if len(state.chord_buffer) + 1 > self.config.max_song_len:
            raise StructureOverflow("too many chords")
        updated = s + state.last_texture
        state.chord_buffer.append(s)
        x = torch.stack(state.chord_buffer)
        state.last_texture = self.texture(x + self._pe(len(x)))[-1]
        state.chord_index += 1
        return updated


# --- losses -----------------------------------------------------------------


def weight_vector(weights: dict[str, float]) -> list[float]:
    return [float(weights[c]) for c in CATEGORIES]


def sequence_loss(logits: Sequence[torch.Tensor], targets, weights: dict[str, float]) -> torch.Tensor:
    """Weighted cross-entropy summed over positions and categories."""
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if targets.shape[0] != logits[0].shape[0]:
        raise ValueError(f"{logits[0].shape[0]} predictions for {targets.shape[0]} targets")
    total = logits[0].new_zeros(())
    for k, (c, lg) in enumerate(zip(CATEGORIES, logits)):
        total = total + weights[c] * F.cross_entropy(lg, targets[:, k], reduction="sum")
    return total


def loss_from_probs(probs: Sequence[np.ndarray], targets, weights: dict[str, float]) -> float:
    """The same weighted cross-entropy evaluated on probability tables."""
    targets = np.asarray(targets)
    if targets.shape[0] != probs[0].shape[0]:
        raise ValueError(f"{probs[0].shape[0]} predictions for {targets.shape[0]} targets")
    rows = np.arange(targets.shape[0])
    total = 0.0
    for k, (c, p) in enumerate(zip(CATEGORIES, probs)):
        with np.errstate(divide="ignore"):
            total += weights[c] * float(-np.log(p[rows, targets[:, k]]).sum())
    return total
