"""Pivot-based cascaded translation with differentiable model integration, on a numpy autodiff core."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .bleu import BleuReport, corpus_bleu, sentence_bleu
from .cascade import (
    InitScheme,
    IntegratedModel,
    InterfaceKind,
    LengthPolicy,
    VocabMismatchError,
    bridge_posteriors,
    bridge_states,
    concatenate,
    forward_integrated,
    load_model,
    save_model,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import ParallelCorpus, SyntheticTask, TaskSpec, Vocabulary, build_vocab, make_synthetic_task
from .decoding import DecodeConfig, Hypothesis, NBestList, beam_search, decode_integrated, mask_predict, two_pass_decode
from .evaluation import SweepResult, char_noise, error_propagation_sweep, oracle_select, study_sweep
from .nnet import TransformerConfig, TransformerModel
from .training import TrainConfig, adam_step, finetune_integrated, lr_schedule, pretrain_ar, pretrain_nat

__version__ = "0.1.0"
