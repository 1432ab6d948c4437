"""Pose transfer and synthetic depth generation."""
from .bvh import BvhDocument, BvhJoint, parse_bvh, pose_to_bvh, rescale_bones
from .render import CameraPose, CapsuleModel, default_capsules, load_capsules, parse_capsules, render_depth
from .synth import (CameraRange, HoleConfig, SynthSample, corrupt_depth, generate_synthetic_dataset,
                    sample_tsdfs)

__all__ = [
    "BvhDocument", "BvhJoint", "parse_bvh", "pose_to_bvh", "rescale_bones",
    "CameraPose", "CapsuleModel", "default_capsules", "load_capsules", "parse_capsules", "render_depth",
    "CameraRange", "HoleConfig", "SynthSample", "corrupt_depth", "generate_synthetic_dataset", "sample_tsdfs",
]
