"""Recurrent semantic mapping for RGB-D video.

Subpackages: tensor (autodiff), net (segmentation networks), recurrent
(data-associated recurrent units), geom (camera/pose math), synth
(procedural RGB-D renderer), mapping (TSDF fusion + ICP tracking), assoc
(inter-frame pixel association), semfuse (label fusion into the volume),
pipeline (train/infer/map/metrics), cli.
"""

__version__ = "1.0.0"
