"""Desk-scale language modeling: LSTM language models with projection,
char-CNN embeddings, sampled softmax training, Kneser-Ney n-grams,
perplexity tooling and model interpolation.
"""
from .checkpoint import load, load_kn, save, save_kn
from .corpus import BatchStream, Vocabulary, build_vocab, encode_corpus, read_sentences
from .ensemble import Mixture, optimize_weights
from .evaluation import (
    KNScorer,
    LMScorer,
    UniformScorer,
    bucket_compare,
    perplexity,
    sample_sentences,
)
from .model import LanguageModel, resolve_arch
from .ngram import KNModel, train_kn
from .trainer import TrainConfig, Trainer, resolve_config, train, train_char_head

__version__ = "0.1.0"

__all__ = [
    "BatchStream",
    "KNModel",
    "KNScorer",
    "LMScorer",
    "LanguageModel",
    "Mixture",
    "TrainConfig",
    "Trainer",
    "UniformScorer",
    "Vocabulary",
    "build_vocab",
    "bucket_compare",
    "encode_corpus",
    "load",
    "load_kn",
    "optimize_weights",
    "perplexity",
    "read_sentences",
    "resolve_arch",
    "resolve_config",
    "sample_sentences",
    "save",
    "save_kn",
    "train",
    "train_char_head",
    "train_kn",
]
