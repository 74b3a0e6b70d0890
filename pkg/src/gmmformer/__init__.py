"""Gaussian-mixture windowed attention for partially relevant video retrieval."""

from .gmm_block import GaussianBank, gaussian_window_matrix, gmmformer_block_forward
from .encoders import EncoderConfig, encode_sentence, encode_video
from .synthetic import CorpusConfig, generate_corpus
from .training import Checkpoint, TrainConfig, train
from .evaluation import evaluate

__all__ = [
    "Checkpoint",
    "CorpusConfig",
    "EncoderConfig",
    "GaussianBank",
    "TrainConfig",
    "encode_sentence",
    "encode_video",
    "evaluate",
    "gaussian_window_matrix",
    "generate_corpus",
    "gmmformer_block_forward",
    "train",
]
