"""Token-by-token generation with recurrent structure state."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .model import HAT, StructureOverflow, StructureState
from .sampling import sample_category
from .tokenizer import BOS, CATEGORIES, EOS, Token


@dataclass
class GenerationResult:
    tokens: list[Token]
    prompt_len: int
    stop_reason: str  # "eos", "max_len" or "structure_overflow"
    distributions: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def truncated(self) -> bool:
        return self.stop_reason != "eos"


def _check_prompt(tokens: Sequence[Token], max_len: int) -> None:
    if not tokens or tokens[0].type != BOS:
        raise ValueError("prompt must start with BOS")
    if any(t.type == EOS for t in tokens):
        raise ValueError("prompt must not contain EOS")
    if len(tokens) > max_len:
        raise ValueError(f"prompt of {len(tokens)} tokens exceeds max length {max_len}")


@torch.no_grad()
def replay(model: HAT, tokens: Sequence[Sequence[int]], state: StructureState | None = None) -> StructureState:
    """Feed tokens through the incremental path; returns the resulting state."""
    state = state or model.start_state()
    for tok in tokens:
        model.step(tok, state)
    return state


@torch.no_grad()
def step_distributions(model: HAT, hidden: torch.Tensor, next_type: int) -> list[np.ndarray]:
    logits = model.head_logits(hidden[None], torch.tensor([next_type]))
    return [torch.softmax(lg[0], dim=-1).double().numpy() for lg in logits]


@torch.no_grad()
def incremental_proba(model: HAT, sequence: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Teacher-forced distributions for ``sequence[1:]`` computed one token at a time.

    Same layout as ``HAT.predict_proba``: nine arrays of shape (L - 1, K_c).
    """
    seq = np.asarray(sequence)
    state = model.start_state()
    rows: list[list[np.ndarray]] = []
    for i in range(len(seq) - 1):
        hidden = model.step(seq[i], state)
        rows.append(step_distributions(model, hidden, int(seq[i + 1][0])))
    return [np.stack([r[k] for r in rows]) for k in range(len(CATEGORIES))]


@torch.no_grad()
def generate(
    model: HAT,
    rng: np.random.Generator,
    *,
    prompt: Sequence[Sequence[int]] | None = None,
    max_len: int | None = None,
    policy: Mapping[str, tuple[float, float]] | None = None,
    record: bool = False,
) -> GenerationResult:
    """Sample a continuation of ``prompt`` (default: just BOS) until EOS or ``max_len`` tokens.

    The type is sampled first; the other eight categories are then sampled
    from heads conditioned on that type. With ``record=True`` the raw
    (pre-temperature) distributions of each generated step are kept.
    """
    model.eval()
    max_len = min(max_len or model.config.max_song_len, model.config.max_song_len)
    policy = policy or model.config.sampling
    tokens = [Token(*map(int, t)) for t in (prompt or [Token(BOS)])]
    _check_prompt(tokens, max_len)
    prompt_len = len(tokens)
    state = replay(model, tokens[:-1])
    result = GenerationResult(tokens, prompt_len, "max_len")
    while len(tokens) < max_len:
        try:
            hidden = model.step(tokens[-1], state)
        except StructureOverflow:
            result.stop_reason = "structure_overflow"
            break
        type_logits = model.type_head(hidden).double().numpy()
        kind = sample_category(type_logits, *policy["type"], rng)
        dists = step_distributions(model, hidden, kind)
        if kind in (BOS, EOS):
            tok = Token(kind)
        else:
            rest = model.head_logits(hidden[None], torch.tensor([kind]))[1:]
            tok = Token(
                kind,
                *(sample_category(lg[0].double().numpy(), *policy[c], rng) for c, lg in zip(CATEGORIES[1:], rest)),
            )
        tokens.append(tok)
        if record:
            result.distributions.append(dists)
        if kind == EOS:
            result.stop_reason = "eos"
            break
    return result
