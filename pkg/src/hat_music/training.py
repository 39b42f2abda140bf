"""Adam training loop with deterministic batching and resumable checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import HAT, HATConfig, sequence_loss
from .tokenizer import PHRASE, Token, split_long_phrases, truncate_at_phrase
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 5000
    loss_threshold: float = 0.05
    checkpoint_every: int = 0
    seed: int = 0


@dataclass
class TrainResult:
    steps: int
    losses: list[float] = field(default_factory=list)
    reached_threshold: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def fit_sequence(tokens: Sequence[Sequence[int]], config: HATConfig) -> list[Token]:
    """Make a token sequence fit the model's length, chords-per-phrase and phrase caps.

    Long phrases are split into same-label continuations; the sequence is then
    cut so that at most ``max_form_len`` phrase tokens and ``max_song_len``
    tokens are model inputs (the token right after the cut is kept as a target).
    """
    toks = split_long_phrases(tokens, config.max_texture_len)
    phrase_at = [i for i, t in enumerate(toks) if t.type == PHRASE]
    if len(phrase_at) > config.max_form_len:
        toks = toks[: phrase_at[config.max_form_len] + 1]
    return truncate_at_phrase(toks, config.max_song_len)


def make_optimizer(model: HAT, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
    )


def batch_loss(model: HAT, batch: Sequence[np.ndarray]) -> tuple[torch.Tensor, int]:
    """Summed weighted cross-entropy over a batch and the number of predicted positions.

    Sequences are processed one at a time, in order, and their losses summed.
    """
    total, count = None, 0
    for seq in batch:
        seq = np.asarray(seq)
        loss = sequence_loss(model(seq), seq[1:], model.config.loss_weights)
        total = loss if total is None else total + loss
        count += len(seq) - 1
    return total, count


def train_step(model: HAT, optimizer: torch.optim.Optimizer, batch: Sequence[np.ndarray]) -> float:
    """One Adam update on the per-position mean loss; returns that mean."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, count = batch_loss(model, batch)
    loss = total / count
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} on a batch of {len(batch)} sequences")
    loss.backward()
    bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        raise TrainingDiverged(f"non-finite gradients in {', '.join(bad[:5])}")
    optimizer.step()
    return loss.item()


def select_batch(sequences: Sequence[np.ndarray], step: int, cfg: TrainConfig) -> list[np.ndarray]:
    # keyed on (seed, step) so a resumed run draws the same batches
    if len(sequences) <= cfg.batch_size:
        return list(sequences)
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.choice(len(sequences), size=cfg.batch_size, replace=False)
    return [sequences[i] for i in sorted(picks)]


def train(
    model: HAT,
    sequences: Sequence[np.ndarray],
    cfg: TrainConfig,
    *,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train until ``max_steps`` or until the step loss drops below ``loss_threshold``."""
    if not sequences:
        raise ValueError("no training sequences")
    optimizer = optimizer or make_optimizer(model, cfg)
    result = TrainResult(steps=start_step)
    for step in range(start_step, cfg.max_steps):
        loss = train_step(model, optimizer, select_batch(sequences, step, cfg))
        result.losses.append(loss)
        result.steps = step + 1
        if on_step:
            on_step(step + 1, loss)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_state(Path(checkpoint_dir) / f"step{step + 1:06d}.ckpt", model, optimizer, cfg, step + 1)
        if loss < cfg.loss_threshold:
            result.reached_threshold = True
            break
    log.info("stopped after %d steps, loss %.4f", result.steps, result.final_loss)
    return result


# --- checkpoints ------------------------------------------------------------


def save_training_state(
    path: str | Path,
    model: HAT,
    optimizer: torch.optim.Optimizer | None,
    cfg: TrainConfig | None,
    step: int,
    extra: dict | None = None,
) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = {"config": model.config.to_dict(), "step": step, "train": asdict(cfg) if cfg else None}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = names[id(p)]
                tensors[f"adam/{name}/exp_avg"] = state["exp_avg"]
                tensors[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"]
                tensors[f"adam/{name}/step"] = torch.as_tensor(state["step"], dtype=torch.float64).reshape(1)
    if extra:
        meta.update(extra)
    save_checkpoint(path, tensors, meta)


def load_training_state(path: str | Path, with_optimizer: bool = True):
    """Returns (model, optimizer or None, TrainConfig or None, step, meta)."""
    tensors, meta = load_checkpoint(path)
    model = HAT(HATConfig.from_dict(meta["config"]))
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    cfg = TrainConfig(**meta["train"]) if meta.get("train") else None
    optimizer = None
    if with_optimizer and cfg is not None:
        optimizer = make_optimizer(model, cfg)
        for name, p in model.named_parameters():
            key = f"adam/{name}/"
            if key + "exp_avg" in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(float(tensors[key + "step"][0])),
                    "exp_avg": tensors[key + "exp_avg"].to(p.dtype),
                    "exp_avg_sq": tensors[key + "exp_avg_sq"].to(p.dtype),
                }
    return model, optimizer, cfg, int(meta["step"]), meta
