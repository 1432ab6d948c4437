"""Synthetic training data: random skeleton scale and viewpoint, rendered depth, exact FK labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyPoseSource, InvalidScale, InvalidSpec
from ..kinematics import HandPose, axis_rotation, default_skeleton, forward_kinematics
from ..voxelizer import CameraIntrinsics, DepthImage, compute_com, depth_to_tsdf
from .render import CameraPose, default_capsules, render_depth

DEFAULT_SCALES = (0.85, 0.95, 1.0, 1.1, 1.2)

# camera axes expressed in the hand frame: image right = thumb side, image down = away
# from the fingers, viewing direction = into the palm
_PALM_VIEW = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraRange:
    """Uniform viewpoint ranges around the hand (degrees, mm) and the image geometry."""

    azimuth: tuple = (-60.0, 60.0)
    elevation: tuple = (-40.0, 40.0)
    distance: tuple = (400.0, 900.0)
    width: int = 128
    height: int = 128
    focal: float = 200.0
    look_at: tuple = (0.0, 0.0, 40.0)

    def __post_init__(self):
        for name in ("azimuth", "elevation", "distance"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidSpec(f"{name} range is empty: {lo} > {hi}")
        if not self.distance[0] > 0:
            raise InvalidSpec("camera distance must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidSpec("image size must be positive")

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2)

    def camera(self, azimuth, elevation, distance, scale=1.0):
        """Camera at the given spherical position around the (scaled) look-at point of a canonical hand."""
        rot = axis_rotation("x", np.radians(elevation)) @ _PALM_VIEW @ axis_rotation("z", np.radians(azimuth))
        target = np.asarray(self.look_at, dtype=np.float64) * scale
        t = np.array([0.0, 0.0, distance]) - rot @ target
        return CameraPose(rot, t, self.intrinsics, self.width, self.height)

    def sample(self, rng, scale=1.0):
        a = rng.uniform(*self.azimuth)
        e = rng.uniform(*self.elevation)
        d = rng.uniform(*self.distance)
        return self.camera(a, e, d, scale), (a, e, d)


@dataclass(frozen=True)
class HoleConfig:
    """Elliptical dropout regions punched into the clean render (pixels)."""

    count: tuple = (1, 4)
    axes: tuple = (2.0, 8.0)

    def __post_init__(self):
        if not 0 <= self.count[0] <= self.count[1]:
            raise InvalidSpec(f"bad hole count range {self.count}")
        if not 0 < self.axes[0] <= self.axes[1]:
            raise InvalidSpec(f"bad hole axis range {self.axes}")


@dataclass(frozen=True, eq=False)
class SynthSample:
    depth: DepthImage
    joints: object
    pose: HandPose
    scale: float
    camera: CameraPose
    view: tuple = (0.0, 0.0, 0.0)
    clean: DepthImage | None = None


def corrupt_depth(img, holes, rng):
    """Zero out a random number of ellipses centred on foreground pixels."""
    fg = np.argwhere(img.mask)
    n = int(rng.integers(holes.count[0], holes.count[1] + 1))
    if not len(fg) or n == 0:
        return img
    vv, uu = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    drop = np.zeros(img.depth.shape, dtype=bool)
    for _ in range(n):
        cv, cu = fg[rng.integers(len(fg))]
        a, b = rng.uniform(*holes.axes, size=2)
        th = rng.uniform(0, np.pi)
        du, dv = uu - cu, vv - cv
        x = du * np.cos(th) + dv * np.sin(th)
        y = -du * np.sin(th) + dv * np.cos(th)
        drop |= (x / a) ** 2 + (y / b) ** 2 <= 1.0
    mask = img.mask & ~drop
    return DepthImage(np.where(mask, img.depth, 0.0), mask)


def _canonical(pose):
    return HandPose(np.zeros(3), np.eye(3), pose.angles)


def generate_synthetic_dataset(source_poses, scales=DEFAULT_SCALES, camera_range=None, count=1, seed=0,
                               model=None, capsules=None, holes=None):
    """Render ``count`` samples.

    Sample i draws from default_rng([seed, i]): a source pose, a skeleton scale
    and a viewpoint, each uniformly. With a CameraRange the source pose is first
    moved to the origin with identity orientation so the view ranges are
    relative to the hand; a fixed CameraPose uses source poses as given. Joints
    are the FK positions of every model joint in the camera frame. With
    ``holes`` the returned depth is corrupted and ``clean`` keeps the render.
    """
    poses = list(source_poses)
    if not poses:
        raise EmptyPoseSource("no source poses to sample from")
    scales = [float(s) for s in scales]
    if not scales:
        raise InvalidScale("scale list is empty")
    if any(not s > 0 for s in scales):
        raise InvalidScale(f"scales must be > 0, got {scales}")
    if count < 1:
        raise InvalidSpec(f"count must be >= 1, got {count}")
    model = model or default_skeleton("nyu")
    capsules = capsules or default_capsules(model)
    camera_range = CameraRange() if camera_range is None else camera_range

    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        pose = poses[int(rng.integers(len(poses)))]
        scale = scales[int(rng.integers(len(scales)))]
        if isinstance(camera_range, CameraPose):
            cam, view = camera_range, (0.0, 0.0, 0.0)
        else:
            pose = _canonical(pose)
            cam, view = camera_range.sample(rng, scale)
        m = model.scaled(scale)
        clean = render_depth(m, capsules.scaled(scale), pose, cam)
        joints = forward_kinematics(m, pose).transformed(cam.rotation, cam.translation)
        cam_pose = pose.transformed(cam.rotation, cam.translation)
        if holes is not None:
            out.append(SynthSample(corrupt_depth(clean, holes, rng), joints, cam_pose, scale, cam, view, clean))
        else:
            out.append(SynthSample(clean, joints, cam_pose, scale, cam, view))
    return out


def sample_tsdfs(sample, spec):
    """(input TSDF, clean TSDF) for refine training; both share the COM of the input depth."""
    k = sample.camera.intrinsics
    com = compute_com(sample.depth, k)
    raw = depth_to_tsdf(sample.depth, k, com, spec)
    clean = raw if sample.clean is None else depth_to_tsdf(sample.clean, k, com, spec)
    return raw, clean
