"""Token-level music modeling with phrase- and chord-level structure modules (HAT)."""

from .model import HAT, HATConfig, Variant
from .score import Song, load_song, save_song
from .tokenizer import Token, Vocabulary, default_vocabulary, detokenize, tokenize

__all__ = [
    "HAT",
    "HATConfig",
    "Song",
    "Token",
    "Variant",
    "Vocabulary",
    "default_vocabulary",
    "detokenize",
    "load_song",
    "save_song",
    "tokenize",
]
__version__ = "0.1.0"
