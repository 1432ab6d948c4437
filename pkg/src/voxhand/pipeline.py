"""Depth image -> TSDF -> refined TSDF -> joints, with per-stage error tagging."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import formats
from .errors import PipelineError, VoxhandError
from .nets import (Network, build_pose_net, build_refine_net, encode_joints, predict_joints, refine_tsdf,
                   train, train_joint)
from .voxelizer import depth_to_tsdf, voxelize


@contextmanager
def stage(name):
    """Re-raise library errors as PipelineError tagged with ``name``."""
    try:
        yield
    except PipelineError:
        raise
    except (VoxhandError, OSError) as e:
        raise PipelineError(name, e) from e


def refine_net_for(cfg, seed=None):
    p = cfg.preset
    r = cfg.grid.resolution
    return Network(build_refine_net(p.refine_base), (1, r, r, r), seed=cfg.get("seed") if seed is None else seed,
                   dtype=p.refine_train.dtype)


def pose_net_for(cfg, seed=None):
    p = cfg.preset
    r = cfg.grid.resolution
    spec = build_pose_net(len(cfg.skeleton.annotation_labels), p.pose_conv, p.pose_fc, p.pose_dropout)
    return Network(spec, (1, r, r, r), seed=cfg.get("seed") if seed is None else seed, dtype=p.pose_train.dtype)


@dataclass
class Models:
    pose: Network
    refine: Network | None = None


def load_refine(cfg, refine_weights):
    """Refine net from a checkpoint, or None when no weights are given or refinement is off."""
    if refine_weights is None or not cfg.get("refine"):
        return None
    with stage("load"):
        net = refine_net_for(cfg)
        net.load_state(formats.load_weights(refine_weights))
    return net


def load_models(cfg, pose_weights, refine_weights=None):
    with stage("load"):
        pose = pose_net_for(cfg)
        pose.load_state(formats.load_weights(pose_weights))
    return Models(pose, load_refine(cfg, refine_weights))


def network_input(cfg, depth, refine=None):
    """Raw (or refined, when a refine net is given) TSDF of a depth image."""
    with stage("voxelize"):
        vol = voxelize(depth, cfg.intrinsics, cfg.grid)
    if refine is not None:
        with stage("refine"):
            vol = refine_tsdf(refine, vol)
    return vol


def run_pipeline(cfg, depth, models):
    """Camera-frame joints (annotation labels) for one depth image. Only the COM is used as reference."""
    vol = network_input(cfg, depth, models.refine)
    with stage("pose"):
        return predict_joints(models.pose, vol, cfg.codec, list(cfg.skeleton.annotation_labels))


def pose_training_set(cfg, samples, refine=None):
    """(TSDF, encoded target) pairs from (DepthImage, JointSet) pairs; joints may use model or label names."""
    model = cfg.skeleton
    out = []
    for depth, joints in samples:
        vol = network_input(cfg, depth, refine)
        with stage("pose"):
            if set(model.annotation_labels) <= set(joints.names):
                labelled = joints.subset(model.annotation_labels)
            else:
                labelled = model.annotate(joints)
            out.append((vol, encode_joints(labelled, vol.origin, cfg.codec)))
    return out


def refine_training_set(cfg, pairs):
    """(input TSDF, target TSDF) from (depth, clean depth or None); both voxelised at the input COM."""
    out = []
    for depth, clean in pairs:
        with stage("voxelize"):
            raw = voxelize(depth, cfg.intrinsics, cfg.grid)
            tgt = raw if clean is None else depth_to_tsdf(clean, cfg.intrinsics, raw.origin, cfg.grid)
        out.append((raw, tgt))
    return out


def train_pose(cfg, dataset, on_epoch=None):
    with stage("pose"):
        return train(pose_net_for(cfg), dataset, cfg.train_config("pose"), on_epoch=on_epoch)


def train_refine(cfg, dataset, on_epoch=None):
    with stage("refine"):
        return train(refine_net_for(cfg), dataset, cfg.train_config("refine"), on_epoch=on_epoch)


def train_end_to_end(cfg, dataset, refine=None, refine_targets=None, on_epoch=None):
    """Joint refine + pose training on raw-TSDF pose samples; returns (refine net, pose net, losses).

    Starts from ``refine`` when given, otherwise from a fresh refine net.
    """
    with stage("joint"):
        refine = refine if refine is not None else refine_net_for(cfg)
        pose = pose_net_for(cfg)
        losses = train_joint(refine, pose, dataset, cfg.train_config("pose"), refine_targets, on_epoch=on_epoch)
    return refine, pose, losses


def mean_joint_error(net, dataset, codec):
    """Mean Euclidean joint error (mm) of ``net`` over (TSDF, encoded target) pairs."""
    errs = []
    for vol, target in dataset:
        pred = net.forward(vol.values[None, None])[0]
        d = codec.decode(pred) - codec.decode(target)
        errs.append(np.linalg.norm(d, axis=1).mean())
    return float(np.mean(errs))
