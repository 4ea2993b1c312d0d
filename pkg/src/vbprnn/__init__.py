"""Variational Bayes predictive-coding multiple-timescale RNN and its
synthetic pFSM experiment pipeline."""

from .analysis import (average_divergence_step, divergence_step, ngram_distribution, ngram_kl,
                       periodicity_score, sigma_statistics)
from .config import RunConfig, load_config, preset
from .net import (LatentTrace, NetworkSpec, Parameters, forward_sequence, init_parameters, kl_term,
                  load_checkpoint, lower_bound, reconstruction_term, run_batch, save_checkpoint)
from .pipeline import (PFSM, LabelSequence, build_classifier, build_target_generator, classify,
                       default_pfsm, generate_targets, render_labels, sample_labels)
from .seqdata import (Dataset, DomainError, EncodedSequence, GridCodec, Trajectory2D, decode_frame,
                      encode_point, encode_trajectory, load_dataset, save_dataset)
from .train import TrainingConfig, backward_sequence, gradient_check, train

__all__ = [
    "PFSM", "Dataset", "DomainError", "EncodedSequence", "GridCodec", "LabelSequence", "LatentTrace",
    "NetworkSpec", "Parameters", "RunConfig", "Trajectory2D", "TrainingConfig", "average_divergence_step",
    "backward_sequence", "build_classifier", "build_target_generator", "classify", "decode_frame",
    "default_pfsm", "divergence_step", "encode_point", "encode_trajectory", "forward_sequence",
    "generate_targets", "gradient_check", "init_parameters", "kl_term", "load_checkpoint", "load_config",
    "load_dataset", "lower_bound", "ngram_distribution", "ngram_kl", "periodicity_score", "preset",
    "reconstruction_term", "render_labels", "run_batch", "sample_labels", "save_checkpoint", "save_dataset",
    "sigma_statistics", "train",
]
__version__ = "0.1.0"
