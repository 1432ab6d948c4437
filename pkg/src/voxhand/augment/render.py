"""Analytic depth rendering of a capsule-and-ellipsoid hand."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import InvalidSpec, ParseError
from ..kinematics import fk_batch, is_rotation
from ..voxelizer import CameraIntrinsics, DepthImage

EPS = 1e-9


@dataclass(frozen=True)
class CapsuleModel:
    """``capsules``: (joint a, joint b, radius mm); palm ellipsoid given in the root frame."""

    capsules: tuple
    palm_center: tuple = (0.0, 0.0, 0.0)
    palm_radii: tuple | None = None

    def __post_init__(self):
        for a, b, r in self.capsules:
            if not r > 0:
                raise InvalidSpec(f"capsule {a}-{b}: radius must be > 0, got {r}")
        if self.palm_radii is not None and not all(r > 0 for r in self.palm_radii):
            raise InvalidSpec("palm radii must be > 0")

    @property
    def max_radius(self):
        rs = [r for _, _, r in self.capsules] + list(self.palm_radii or ())
        return max(rs) if rs else 0.0

    def scaled(self, factor):
        return CapsuleModel(tuple((a, b, r * factor) for a, b, r in self.capsules),
                            tuple(v * factor for v in self.palm_center),
                            None if self.palm_radii is None else tuple(v * factor for v in self.palm_radii))


def parse_capsules(text):
    caps, center, radii = [], (0.0, 0.0, 0.0), None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kv = dict(t.split("=", 1) for t in tok if "=" in t)
        try:
            if tok[0] == "capsule" and len(tok) == 4:
                caps.append((tok[1], tok[2], float(kv["radius"])))
            elif tok[0] == "palm":
                center = tuple(float(v) for v in kv["center"].split(","))
                radii = tuple(float(v) for v in kv["radii"].split(","))
                if len(center) != 3 or len(radii) != 3:
                    raise ValueError
            else:
                raise ParseError("expected 'capsule a b radius=r' or 'palm center=.. radii=..'", lineno, tok[0])
        except (KeyError, ValueError):
            raise ParseError("malformed capsule line", lineno, line) from None
    return CapsuleModel(tuple(caps), center, radii)


def load_capsules(path):
    return parse_capsules(Path(path).read_text())


def default_capsules(model, name="nyu"):
    """Bundled geometry when it matches the skeleton, else 8 mm capsules on every link."""
    try:
        caps = parse_capsules(resources.files("voxhand").joinpath("data").joinpath(f"{name}.caps").read_text())
        if all(a in model.names and b in model.names for a, b, _ in caps.capsules):
            return caps
    except FileNotFoundError:
        pass
    return CapsuleModel(tuple((p, c, 8.0) for p, c in model.links()), (0.0, 0.0, 20.0), (14.0, 40.0, 40.0))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Maps hand-world points to the camera frame: x_cam = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: CameraIntrinsics
    width: int = 128
    height: int = 128

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        if not is_rotation(r):
            raise InvalidSpec("camera rotation must be orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    def __eq__(self, other):
        return (isinstance(other, CameraPose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation) and self.intrinsics == other.intrinsics
                and (self.width, self.height) == (other.width, other.height))


def pixel_rays(k, width, height):
    """Ray directions with unit z for every pixel centre, shape (h, w, 3); t along the ray equals depth."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def _sphere_hit(d, center, r):
    """Nearest positive root of |t d - center| = r for rays from the origin."""
    a = np.einsum("...i,...i", d, d)
    b = -(d @ center)
    c = center @ center - r * r
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / a
    return np.where((disc >= 0) & (t > EPS), t, np.inf)


def capsule_hit(d, a, b, r):
    """Ray parameter of the first hit with capsule (segment a-b, radius r); inf on miss."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = np.minimum(_sphere_hit(d, a, r), _sphere_hit(d, b, r))
    ba = b - a
    baba = ba @ ba
    if baba > EPS:
        oa = -a
        bard = d @ ba
        baoa = ba @ oa
        rdoa = d @ oa
        rdrd = np.einsum("...i,...i", d, d)
        qa = baba * rdrd - bard * bard
        qb = baba * rdoa - baoa * bard
        qc = baba * (oa @ oa) - baoa * baoa - r * r * baba
        disc = qb * qb - qa * qc
        ok = (disc >= 0) & (qa > EPS)
        with np.errstate(invalid="ignore", divide="ignore"):
            tb = (-qb - np.sqrt(disc)) / qa
        y = baoa + tb * bard
        body = ok & (tb > EPS) & (y >= 0) & (y <= baba)
        t = np.where(body, np.minimum(t, tb), t)
    return t


def ellipsoid_hit(d, center, axes):
    """First hit with the ellipsoid {center + axes @ u : |u| <= 1}."""
    inv = np.linalg.inv(axes)
    o = inv @ (-np.asarray(center, dtype=np.float64))
    dl = d @ inv.T
    a = np.einsum("...i,...i", dl, dl)
    b = dl @ o
    c = o @ o - 1.0
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / a
    return np.where((disc >= 0) & (t > EPS), t, np.inf)


def scene_primitives(model, capsules, pose, cam):
    """Camera-frame geometry: list of ('capsule', a, b, r) / ('ellipsoid', center, axes)."""
    rot = cam.rotation @ pose.root_orientation
    pos = cam.rotation @ pose.root_position + cam.translation
    joints = fk_batch(model, rot, pos, pose.angles[None])[0]
    prims = []
    if capsules.palm_radii is not None:
        center = pos + rot @ np.asarray(capsules.palm_center, dtype=np.float64)
        prims.append(("ellipsoid", center, rot @ np.diag(capsules.palm_radii)))
    for a, b, r in capsules.capsules:
        prims.append(("capsule", joints[model.index(a)], joints[model.index(b)], r))
    return prims


def render_depth(model, capsules, pose, cam):
    """Z-buffered depth (mm) of the nearest primitive per pixel; 0 and mask False where nothing is hit."""
    d = pixel_rays(cam.intrinsics, cam.width, cam.height)
    zbuf = np.full(d.shape[:2], np.inf)
    for prim in scene_primitives(model, capsules, pose, cam):
        if prim[0] == "ellipsoid":
            t = ellipsoid_hit(d, prim[1], prim[2])
        else:
            t = capsule_hit(d, prim[1], prim[2], prim[3])
        np.minimum(zbuf, t, out=zbuf)
    mask = np.isfinite(zbuf)
    return DepthImage(np.where(mask, zbuf, 0.0), mask)
