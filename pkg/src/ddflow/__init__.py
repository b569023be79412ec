"""Deformable image registration by flow matching in displacement-field space."""
from .estimator import FlowMatchingRegistration
from .flow import SamplerConfig, instance_optimise, sample
from .losses import LossConfig, reg_loss
from .network import NetworkConfig
from .synth import PhantomConfig, generate_case, generate_dataset
from .train import TrainConfig, fit
from .volume import DisplacementField, LabelMap, Volume, warp_image, warp_labels

__version__ = "0.1.0"

__all__ = [
    "FlowMatchingRegistration", "SamplerConfig", "instance_optimise", "sample", "LossConfig", "reg_loss",
    "NetworkConfig", "PhantomConfig", "generate_case", "generate_dataset", "TrainConfig", "fit",
    "DisplacementField", "LabelMap", "Volume", "warp_image", "warp_labels",
]
