"""Depth image -> COM-centred projective TSDF volume."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyForeground, InvalidSpec


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpec(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise InvalidSpec("principal point must be finite")

    def project(self, points):
        """Camera-frame points (..., 3) -> continuous pixel coordinates (..., 2)."""
        p = np.asarray(points, dtype=np.float64)
        u = self.fx * p[..., 0] / p[..., 2] + self.cx
        v = self.fy * p[..., 1] / p[..., 2] + self.cy
        return np.stack([u, v], axis=-1)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Depth in mm (0 = missing) plus a foreground mask, both indexed [row, col]."""

    depth: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise InvalidSpec(f"depth must be 2-D, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise InvalidSpec("depth values must be finite and >= 0")
        mask = depth > 0 if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != depth.shape:
            raise InvalidSpec(f"mask shape {mask.shape} differs from depth shape {depth.shape}")
        depth.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid(self):
        """Pixels that are both foreground and carry a depth reading."""
        return self.mask & (self.depth > 0)

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return np.array_equal(self.depth, other.depth) and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True)
class VoxelGridSpec:
    resolution: int = 60
    voxel_size: float = 5.0
    truncation: float = 50.0

    def __post_init__(self):
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise InvalidSpec(f"resolution must be an integer >= 2, got {self.resolution}")
        if not self.voxel_size > 0:
            raise InvalidSpec(f"voxel_size must be > 0, got {self.voxel_size}")
        if not self.truncation > 0:
            raise InvalidSpec(f"truncation must be > 0, got {self.truncation}")

    @property
    def extent(self):
        return self.resolution * self.voxel_size

    def axis_offsets(self):
        """Offsets (mm) of voxel centres from the grid origin along one axis."""
        idx = np.arange(self.resolution, dtype=np.float64)
        return (idx + 0.5 - self.resolution / 2) * self.voxel_size


@dataclass(frozen=True, eq=False)
class TsdfVolume:
    """TSDF values indexed [z, y, x], so C-order flattening is x-fastest."""

    spec: VoxelGridSpec
    origin: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        values = np.array(self.values, dtype=np.float64)
        r = self.spec.resolution
        if values.size != r ** 3:
            raise InvalidSpec(f"expected {r ** 3} values for resolution {r}, got {values.size}")
        values = values.reshape(r, r, r)
        if np.any(~np.isfinite(values)) or np.any(np.abs(values) > 1):
            raise InvalidSpec("TSDF values must lie in [-1, 1]")
        origin.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)

    def voxel_centers(self):
        """Camera-frame centres, shape (r, r, r, 3), same [z, y, x] indexing as values."""
        return voxel_centers(self.spec, self.origin)

    def __eq__(self, other):
        if not isinstance(other, TsdfVolume):
            return NotImplemented
        return (self.spec == other.spec and np.array_equal(self.origin, other.origin)
                and np.array_equal(self.values, other.values))


def voxel_centers(spec, origin):
    off = spec.axis_offsets()
    oz, oy, ox = np.meshgrid(off, off, off, indexing="ij")
    origin = np.asarray(origin, dtype=np.float64)
    return np.stack([origin[0] + ox, origin[1] + oy, origin[2] + oz], axis=-1)


def backproject(img, k):
    """Foreground pixels with depth > 0 -> (n, 3) camera-frame points in mm.

    Points are ordered row-major over the image.
    """
    rows, cols = np.nonzero(img.valid)
    if rows.size == 0:
        raise EmptyForeground("no foreground pixel carries a depth reading")
    z = img.depth[rows, cols]
    x = (cols - k.cx) * z / k.fx
    y = (rows - k.cy) * z / k.fy
    return np.stack([x, y, z], axis=1)


def compute_com(img, k):
    return backproject(img, k).mean(axis=0)


def depth_to_tsdf(img, k, com, spec=None):
    """Projective TSDF on a grid centred at ``com``.

    Stored value is clamp((observed depth - voxel z) / truncation, -1, 1):
    positive in front of the surface, negative behind it. Voxels that fall
    behind the camera, outside the image, or on a pixel without masked depth
    are treated as observed-empty and store +1.
    """
    spec = VoxelGridSpec() if spec is None else spec
    if not isinstance(spec, VoxelGridSpec):
        raise InvalidSpec(f"expected VoxelGridSpec, got {type(spec).__name__}")
    com = np.asarray(com, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(com)):
        raise InvalidSpec("COM must be finite")

    c = voxel_centers(spec, com)
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    values = np.ones(z.shape)
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = np.floor(k.fx * x / zs + k.cx + 0.5)
    v = np.floor(k.fy * y / zs + k.cy + 0.5)
    inside = front & (u >= 0) & (u < img.width) & (v >= 0) & (v < img.height)
    ui = np.where(inside, u, 0).astype(np.int64)
    vi = np.where(inside, v, 0).astype(np.int64)
    observed = inside & img.valid[vi, ui]
    d = img.depth[vi, ui] - z
    values[observed] = np.clip(d[observed] / spec.truncation, -1.0, 1.0)
    return TsdfVolume(spec, com, values)


def voxelize(img, k, spec=None):
    """COM alignment followed by TSDF conversion."""
    com = compute_com(img, k)
    return depth_to_tsdf(img, k, com, spec)
