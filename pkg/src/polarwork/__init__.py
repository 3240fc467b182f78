"""Learned polar-style codes built from neural kernels on a Plotkin tree.

Submodules:
    nn           dense networks, Adam, BCE and the straight-through sign
    polar        classical polar construction, encoding, SC and ML decoding
    codec        the neural encoder/decoder tree and checkpoint files
    channels     AWGN, fast Rayleigh and bursty noise with replayable streams
    training     alternating optimization, kernel curriculum, fine-tuning
    evaluation   Monte-Carlo BER/BLER, distance profiles, first-error counts
    cli          the ``polarwork`` command-line workbench
"""
from .channels import ChannelSpec, apply_channel, snr_db_to_sigma
from .codec import Architecture, NeuralCode, load_checkpoint, save_checkpoint
from .polar import CodeLayout, construct_reliability, ml_decode, polar_encode, sc_decode
from .training import CurriculumPlan, TrainPlan, train_alternating

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ChannelSpec", "CodeLayout", "CurriculumPlan", "NeuralCode", "TrainPlan",
    "apply_channel", "construct_reliability", "load_checkpoint", "ml_decode", "polar_encode",
    "save_checkpoint", "sc_decode", "snr_db_to_sigma", "train_alternating",
]
