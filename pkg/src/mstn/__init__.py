"""Melody generation with transferable structure embeddings."""

from .errors import *  # noqa: F401,F403
from .model import Model, ModelConfig
from .score_io import Note, Score, SpelledPitch, parse_abc, parse_musicxml, transpose, write_musicxml
from .tokenizer import Vocab, TokenSequence, build_vocab, decode, encode

__version__ = "0.1.0"
