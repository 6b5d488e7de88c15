"""voidframe: point-pattern inference for localisation microscopy.

Pipeline stages: simulate -> groupa (measurement clustering) -> intensity
(Cox-field fit) -> voidwalker (empty-space significance) -> centres
(trans-dimensional centre sampling) -> super-structure grouping -> asmblr
(motif reconstruction) -> metrics.
"""

__version__ = "0.1.0"

from .geometry import Window, Disc, Annulus
from .datasets import LocalisationSet, GroundTruthEmitters, EmitterSet
from .simulate import SimConfig, generate_field

__all__ = [
    "Window",
    "Disc",
    "Annulus",
    "LocalisationSet",
    "GroundTruthEmitters",
    "EmitterSet",
    "SimConfig",
    "generate_field",
    "__version__",
]
