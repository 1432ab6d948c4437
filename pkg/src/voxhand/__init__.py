"""Volumetric hand pose estimation: depth -> TSDF -> 3D CNN -> joints, plus kinematic pose transfer."""

__version__ = "0.1.0"
