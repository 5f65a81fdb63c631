"""Multiscale surface vision transformer on icospheric meshes.

Modules:
    icomesh: icosphere hierarchy and barycentric resampling.
    patching: token, window, shift and merge index tables.
    tensor: small reverse-mode autodiff engine.
    model: encoder, regression head, segmentation decoder, attention maps.
    augment: rotations and elastic warps on the sphere.
    train: losses, AdamW, sampling, checkpoints, training loop.
    formats: binary file formats and key-value configs.
    synth: synthetic regression and segmentation datasets.
    cli: the ``mssit`` command line.
"""

__version__ = "0.1.0"

from .icomesh import BarycentricMap, Icosphere, barycentric_map, build_icosphere, resample, subdivide
from .model import ModelConfig, ModelState, encoder_forward, forward, init_state, tiny_config
from .patching import PatchMaps, build_patch_maps, default_patch_maps, sequence_from_surface

__all__ = [
    "BarycentricMap",
    "Icosphere",
    "ModelConfig",
    "ModelState",
    "PatchMaps",
    "barycentric_map",
    "build_icosphere",
    "build_patch_maps",
    "default_patch_maps",
    "encoder_forward",
    "forward",
    "init_state",
    "resample",
    "sequence_from_surface",
    "subdivide",
    "tiny_config",
]
