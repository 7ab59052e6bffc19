"""Asymmetric joint-embedding pretraining on paired dense and sparse tile views."""

from .data import AugmentationPolicy, SynthParams, TileDataset, augment, degrade, load_manifest, load_tiles, make_pair, synth_dataset
from .estimators import JointEmbeddingSSL, LinearProbe, SupervisedClassifier
from .losses import SimclrParams, VicregParams, nt_xent, vicreg_loss
from .model import EncoderSpec, ExpanderSpec, build_encoder, build_joint
from .train import ExperimentConfig, ProbeConfig, lr_schedule, train_probe, train_ssl, train_supervised

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy",
    "EncoderSpec",
    "ExpanderSpec",
    "ExperimentConfig",
    "JointEmbeddingSSL",
    "LinearProbe",
    "ProbeConfig",
    "SimclrParams",
    "SupervisedClassifier",
    "SynthParams",
    "TileDataset",
    "VicregParams",
    "augment",
    "build_encoder",
    "build_joint",
    "degrade",
    "load_manifest",
    "load_tiles",
    "lr_schedule",
    "make_pair",
    "nt_xent",
    "synth_dataset",
    "train_probe",
    "train_ssl",
    "train_supervised",
    "vicreg_loss",
]
