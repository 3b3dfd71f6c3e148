"""Desk-scale vision-language omni-supervised universal segmentation.

Library layout:

- :mod:`vloss.tensor` -- dense tensors, differentiable op catalog, grad checks
- :mod:`vloss.text` -- tokenizer, text encoder, class embeddings
- :mod:`vloss.segmenter` -- backbone, FPN-style encoder, query decoder, heads
- :mod:`vloss.losses` -- Hungarian matching and the loss suite
- :mod:`vloss.scheduler` -- omni-supervised epoch plans (stt / mix / pretrain)
- :mod:`vloss.data` -- synthetic corpora, file formats, loaders
- :mod:`vloss.trainer` -- AdamW, LR schedule, training loop, checkpoints
- :mod:`vloss.evaluator` -- IoU, panoptic quality, mask AP, zero-shot protocol
- :mod:`vloss.cli` -- gen | train | eval | verify | schedule-sim
"""

from .data import LabelSpace, SceneConfig, load_dataset, unify_label_space
from .losses import LossWeights, MatchTargets, match_hungarian
from .model import VlossSystem
from .scheduler import BatchTicket, DatasetHandle, EpochPlan, build_epoch_plan
from .segmenter import ModelConfig, PanopticSeg, Segmenter
from .tensor import Tensor, backward, forward, grad_check
from .text import TextConfig, TextEncoder, Vocabulary, build_vocab, tokenize
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "BatchTicket",
    "DatasetHandle",
    "EpochPlan",
    "LabelSpace",
    "LossWeights",
    "MatchTargets",
    "ModelConfig",
    "PanopticSeg",
    "SceneConfig",
    "Segmenter",
    "Tensor",
    "TextConfig",
    "TextEncoder",
    "TrainConfig",
    "Trainer",
    "VlossSystem",
    "Vocabulary",
    "backward",
    "build_epoch_plan",
    "build_vocab",
    "forward",
    "grad_check",
    "load_dataset",
    "match_hungarian",
    "tokenize",
    "train",
    "unify_label_space",
]
