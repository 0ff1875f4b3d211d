"""Sequence-to-set nested named entity recognition.

A self-contained encoder-decoder model that maps a token sequence to an
unordered set of (left, right, category) entity predictions in one pass,
trained with a bipartite-matching set loss. Built on a minimal numpy-backed
reverse-mode autodiff core.
"""

from .data import Batch, Entity, Sentence, Vocab, load_corpus, make_batches, save_corpus
from .decoder import DecoderConfig, PredictedEntity, PredictionSet, extract_entities
from .encoder import EncoderConfig, SequenceEncoding
from .evaluation import CorpusStats, MetricReport, corpus_stats, score, score_corpus
from .matching import Assignment, bipartite_loss, ce_loss_baseline, hungarian, match_cost, pad_gold, set_loss
from .model import ModelConfig, SeqToSetModel
from .synth import GrammarConfig, generate_corpus, generate_splits
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Assignment", "Batch", "CorpusStats", "DecoderConfig", "EncoderConfig",
    "Entity", "GrammarConfig", "MetricReport", "ModelConfig", "PredictedEntity",
    "PredictionSet", "Sentence", "SeqToSetModel", "SequenceEncoding",
    "TrainConfig", "Vocab", "bipartite_loss", "ce_loss_baseline", "corpus_stats",
    "extract_entities", "generate_corpus", "generate_splits", "hungarian",
    "load_corpus", "make_batches", "match_cost", "pad_gold", "save_corpus",
    "score", "score_corpus", "set_loss", "train",
]
