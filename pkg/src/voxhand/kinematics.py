"""Hand skeleton model, forward kinematics, root-frame recovery, bone statistics and PSO-based IK."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import (DegenerateFrame, DimensionMismatch, EmptyDataset, InvalidBounds, InvalidSpec,
                     MissingJoint, ParseError)

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


# --------------------------------------------------------------------------- joint sets

@dataclass(frozen=True, eq=False)
class JointSet:
    """Named 3-D joint positions in mm."""

    names: tuple
    positions: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(names) != len(pos):
            raise DimensionMismatch(f"{len(names)} joint names but {len(pos)} positions")
        if not np.all(np.isfinite(pos)):
            raise DimensionMismatch("joint positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.names

    def __getitem__(self, name):
        try:
            return self.positions[self.names.index(name)]
        except ValueError:
            raise MissingJoint(f"joint {name!r} not present") from None

    def subset(self, names):
        return JointSet(tuple(names), np.array([self[n] for n in names]))

    def transformed(self, rotation=None, translation=None):
        p = self.positions
        if rotation is not None:
            p = p @ np.asarray(rotation).T
        if translation is not None:
            p = p + np.asarray(translation)
        return JointSet(self.names, p)

    def __eq__(self, other):
        if not isinstance(other, JointSet):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.positions, other.positions)

    def __repr__(self):
        return f"JointSet({len(self.names)} joints)"


# --------------------------------------------------------------------------- rotations

def axis_rotation(axis, angle):
    """Rotation matrices about a principal axis; ``angle`` may be an array (returns (..., 3, 3))."""
    a = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(a), np.zeros_like(a)
    if axis == "x":
        m = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == "y":
        m = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    elif axis == "z":
        m = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return np.moveaxis(np.array(m), (0, 1), (-2, -1))


def euler_matrix(axes, angles):
    """Intrinsic composition R = R_axes[0](angles[0]) @ R_axes[1](angles[1]) @ ..."""
    r = np.eye(3)
    for ax, a in zip(axes, angles):
        r = r @ axis_rotation(ax, a)
    return r


def homogeneous(rotation, translation):
    t = np.eye(4)
    t[:3, :3] = rotation
    t[:3, 3] = translation
    return t


def is_rotation(r, tol=1e-9):
    r = np.asarray(r)
    return r.shape == (3, 3) and np.max(np.abs(r.T @ r - np.eye(3))) < tol and abs(np.linalg.det(r) - 1) < tol


# --------------------------------------------------------------------------- skeleton

@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: tuple
    dofs: tuple = ()
    limits: tuple = ()


@dataclass(frozen=True)
class SkeletonModel:
    """Kinematic tree rooted at joint 0 (palm centre).

    ``dofs`` entries are 'rx'/'ry'/'rz' and compose as intrinsic rotations in
    the listed order, which must follow ``euler`` (default Z-X-Y). Limits are
    radians. ``annotation`` maps dataset joint labels to model joint names;
    ``frame`` names the (centre, side1, side2, forward) joints used to recover
    the root orientation.
    """

    joints: tuple
    euler: str = "ZXY"
    annotation: tuple = ()
    frame: tuple = ("C", "W1", "W2", "M1")

    def __post_init__(self):
        if not self.joints:
            raise InvalidSpec("skeleton has no joints")
        if self.joints[0].parent != -1:
            raise InvalidSpec("first joint must be the root")
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise InvalidSpec("duplicate joint names")
        order = self.euler.lower()
        for i, j in enumerate(self.joints):
            if i and not 0 <= j.parent < i:
                raise InvalidSpec(f"joint {j.name}: parent index must precede it")
            if len(j.limits) != len(j.dofs):
                raise InvalidSpec(f"joint {j.name}: {len(j.dofs)} dofs but {len(j.limits)} limits")
            pos = [order.index(d[1]) for d in j.dofs]
            if pos != sorted(pos) or len(set(pos)) != len(pos):
                raise InvalidSpec(f"joint {j.name}: dofs {j.dofs} do not follow euler order {self.euler}")
            for lo, hi in j.limits:
                if lo > hi:
                    raise InvalidSpec(f"joint {j.name}: limit {lo} > {hi}")
            if i and np.linalg.norm(j.offset) <= 0:
                raise InvalidSpec(f"joint {j.name}: bone length must be > 0")
        for label, jn in self.annotation:
            if jn not in names:
                raise InvalidSpec(f"annotation {label} refers to unknown joint {jn}")

    @property
    def names(self):
        return tuple(j.name for j in self.joints)

    @property
    def root(self):
        return self.joints[0].name

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise MissingJoint(f"skeleton has no joint {name!r}") from None

    @property
    def num_angles(self):
        return sum(len(j.dofs) for j in self.joints)

    @property
    def dof(self):
        return 6 + self.num_angles

    @property
    def limits(self):
        """(lo, hi) arrays over the flat angle vector."""
        lim = [l for j in self.joints for l in j.limits]
        if not lim:
            return np.zeros(0), np.zeros(0)
        a = np.array(lim, dtype=np.float64)
        return a[:, 0], a[:, 1]

    def angle_slices(self):
        """Slice of the flat angle vector owned by each joint."""
        out, k = [], 0
        for j in self.joints:
            out.append(slice(k, k + len(j.dofs)))
            k += len(j.dofs)
        return out

    def links(self):
        return [(self.joints[j.parent].name, j.name) for j in self.joints[1:]]

    def bone_lengths(self):
        return {(p, c): float(np.linalg.norm(self.joints[self.index(c)].offset)) for p, c in self.links()}

    def children(self, i):
        return [k for k, j in enumerate(self.joints) if j.parent == i]

    def subtree(self, i):
        out = [i]
        for k in range(i + 1, len(self.joints)):
            if self.joints[k].parent in out:
                out.append(k)
        return out

    @property
    def annotation_labels(self):
        return tuple(l for l, _ in self.annotation) or self.names

    def annotation_joints(self):
        return tuple(j for _, j in self.annotation) or self.names

    def annotate(self, joints):
        """Model joint set -> dataset-labelled joint set (14 NYU / 16 ICVL)."""
        return JointSet(self.annotation_labels, np.array([joints[j] for j in self.annotation_joints()]))

    def resolve(self, name):
        """Dataset label or model joint name -> model joint name."""
        if name in self.names:
            return name
        for label, jn in self.annotation:
            if label == name:
                return jn
        raise MissingJoint(f"{name!r} is neither a model joint nor an annotation label")

    def scaled(self, factor):
        """Every offset multiplied by ``factor`` (scalar or {joint name: factor})."""
        def f(name):
            return factor.get(name, 1.0) if isinstance(factor, dict) else factor
        joints = tuple(replace(j, offset=tuple(float(v) * f(j.name) for v in j.offset)) for j in self.joints)
        return replace(self, joints=joints)

    def with_offsets(self, offsets):
        joints = tuple(replace(j, offset=tuple(float(v) for v in offsets[j.name])) if j.name in offsets else j
                       for j in self.joints)
        return replace(self, joints=joints)

    def with_bone_lengths(self, lengths):
        """Rescale each offset to the given link length, keeping its direction."""
        new = {}
        for (p, c), length in lengths.items():
            off = np.asarray(self.joints[self.index(c)].offset, dtype=np.float64)
            new[c] = off / np.linalg.norm(off) * length
        return self.with_offsets(new)

    def rest_pose(self, root_position=(0.0, 0.0, 0.0), root_orientation=None):
        return HandPose(np.asarray(root_position, dtype=np.float64),
                        np.eye(3) if root_orientation is None else root_orientation,
                        np.zeros(self.num_angles))

    def random_pose(self, rng, root_position=(0.0, 0.0, 0.0), root_orientation=None):
        lo, hi = self.limits
        return HandPose(np.asarray(root_position, dtype=np.float64),
                        np.eye(3) if root_orientation is None else root_orientation,
                        lo + rng.random(lo.shape) * (hi - lo))

    def dumps(self):
        lines = [f"euler {self.euler}", "frame " + " ".join(self.frame)]
        for j in self.joints:
            parent = "-" if j.parent < 0 else self.joints[j.parent].name
            s = f"joint {j.name} parent={parent} offset=" + ",".join(f"{v:.9g}" for v in j.offset)
            if j.dofs:
                s += " dofs=" + ",".join(j.dofs)
                s += " limits=" + ";".join(f"{np.degrees(lo):.12g}..{np.degrees(hi):.12g}" for lo, hi in j.limits)
            lines.append(s)
        lines += [f"annotation {l} {j}" for l, j in self.annotation]
        return "\n".join(lines) + "\n"


def _floats(text, n, lineno, what):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ParseError(f"bad {what}", lineno, text) from None
    if len(vals) != n:
        raise ParseError(f"{what} needs {n} values", lineno, text)
    return vals


def parse_skeleton(text):
    """Parse the line-oriented skeleton definition format (limits in degrees)."""
    joints, annotation = [], []
    euler, frame = "ZXY", ("C", "W1", "W2", "M1")
    index = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "euler":
            if len(tok) != 2 or sorted(tok[1].upper()) != ["X", "Y", "Z"]:
                raise ParseError("euler needs a permutation of XYZ", lineno, line)
            euler = tok[1].upper()
        elif tok[0] == "frame":
            if len(tok) != 5:
                raise ParseError("frame needs 4 joint names", lineno, line)
            frame = tuple(tok[1:])
        elif tok[0] == "annotation":
            if len(tok) != 3:
                raise ParseError("annotation needs <label> <joint>", lineno, line)
            annotation.append((tok[1], tok[2]))
        elif tok[0] == "joint":
            if len(tok) < 2:
                raise ParseError("joint needs a name", lineno, line)
            name = tok[1]
            kv = {}
            for item in tok[2:]:
                if "=" not in item:
                    raise ParseError("expected key=value", lineno, item)
                k, v = item.split("=", 1)
                kv[k] = v
            parent = kv.get("parent", "-")
            if parent == "-":
                pidx = -1
            elif parent in index:
                pidx = index[parent]
            else:
                raise ParseError("unknown or later-defined parent", lineno, parent)
            offset = tuple(_floats(kv.get("offset", "0,0,0"), 3, lineno, "offset"))
            dofs = tuple(d for d in kv.get("dofs", "").split(",") if d)
            for d in dofs:
                if d not in ("rx", "ry", "rz"):
                    raise ParseError("dof must be rx, ry or rz", lineno, d)
            limits = []
            for part in (p for p in kv.get("limits", "").split(";") if p):
                try:
                    lo, hi = (np.radians(float(v)) for v in part.split(".."))
                except ValueError:
                    raise ParseError("limit must be lo..hi", lineno, part) from None
                limits.append((lo, hi))
            if not limits and dofs:
                limits = [(-np.pi, np.pi)] * len(dofs)
            index[name] = len(joints)
            joints.append(Joint(name, pidx, offset, dofs, tuple(limits)))
        else:
            raise ParseError("unknown directive", lineno, tok[0])
    try:
        return SkeletonModel(tuple(joints), euler, tuple(annotation), frame)
    except InvalidSpec as e:
        raise ParseError(str(e)) from None


def load_skeleton(path):
    return parse_skeleton(Path(path).read_text())


def default_skeleton(name="nyu"):
    """Bundled skeletons: 'nyu' (30 DOF, 14 annotated joints) or 'icvl' (16 joints)."""
    text = resources.files("voxhand").joinpath("data").joinpath(f"{name}.skel").read_text()
    return parse_skeleton(text)


# --------------------------------------------------------------------------- poses and FK

@dataclass(frozen=True, eq=False)
class HandPose:
    root_position: np.ndarray
    root_orientation: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        p = np.array(self.root_position, dtype=np.float64).reshape(3)
        r = np.array(self.root_orientation, dtype=np.float64).reshape(3, 3)
        a = np.array(self.angles, dtype=np.float64).reshape(-1)
        if not is_rotation(r):
            raise DimensionMismatch("root orientation must be orthonormal with determinant +1")
        for arr in (p, r, a):
            arr.setflags(write=False)
        object.__setattr__(self, "root_position", p)
        object.__setattr__(self, "root_orientation", r)
        object.__setattr__(self, "angles", a)

    def transformed(self, rotation, translation):
        """Pose seen from a frame where x' = rotation @ x + translation."""
        rot = np.asarray(rotation)
        return HandPose(rot @ self.root_position + translation, rot @ self.root_orientation, self.angles)


def _check_pose(model, pose):
    if pose.angles.shape != (model.num_angles,):
        raise DimensionMismatch(f"pose has {pose.angles.size} angles, skeleton needs {model.num_angles}")


def local_transforms(model, angles):
    """Per-joint 4x4 transforms D = [rotation(angles) | offset] relative to the parent frame."""
    out = []
    for j, sl in zip(model.joints, model.angle_slices()):
        rot = euler_matrix([d[1] for d in j.dofs], angles[sl])
        out.append(homogeneous(rot, j.offset))
    return out


def fk_batch(model, root_rotation, root_position, angles, joints=None):
    """Vectorised FK: angles (p, n) -> positions (p, J, 3).

    ``joints`` optionally restricts evaluation to a set of joint indices whose
    ancestors (other than the root) are all included; other rows are NaN.
    """
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    p = angles.shape[0]
    nj = len(model.joints)
    wanted = range(nj) if joints is None else sorted(set(joints) | {0})
    pos = np.full((p, nj, 3), np.nan)
    rot = {}
    slices = model.angle_slices()
    for i in wanted:
        j = model.joints[i]
        if j.parent < 0:
            rg = np.broadcast_to(np.asarray(root_rotation, dtype=np.float64), (p, 3, 3))
            pos[:, i] = root_position
        else:
            rp = rot[j.parent]
            pos[:, i] = pos[:, j.parent] + rp @ np.asarray(j.offset, dtype=np.float64)
            rg = rp
        for d, col in zip(j.dofs, range(slices[i].start, slices[i].stop)):
            rg = rg @ axis_rotation(d[1], angles[:, col])
        rot[i] = rg
    return pos


def forward_kinematics(model, pose):
    """Every model joint's position: translation of D_root @ D_1 @ ... @ D_k."""
    _check_pose(model, pose)
    pos = fk_batch(model, pose.root_orientation, pose.root_position, pose.angles[None])[0]
    return JointSet(model.names, pos)


def clamp_pose(model, pose):
    _check_pose(model, pose)
    lo, hi = model.limits
    return HandPose(pose.root_position, pose.root_orientation, np.clip(pose.angles, lo, hi))


# --------------------------------------------------------------------------- root frame, offsets, bone lengths

def root_frame_from_joints(j, frame=("C", "W1", "W2", "M1"), eps=1e-6):
    """Root orientation [r_x, r_y, r_z] from palm centre, the two wrist sides and the middle-finger root.

    r_x = (W1 - C) x (W2 - C), r_z = M1 - C made orthogonal to r_x, r_y = r_z x r_x.
    """
    c, w1, w2, m1 = (j[n] for n in frame)
    rx = np.cross(w1 - c, w2 - c)
    rz = m1 - c
    nx = np.linalg.norm(rx)
    if nx < eps or np.linalg.norm(rz) < eps:
        raise DegenerateFrame("palm / wrist joints are collinear or coincident")
    rx = rx / nx
    rz = rz - (rz @ rx) * rx
    nz = np.linalg.norm(rz)
    if nz < eps:
        raise DegenerateFrame("middle-finger root is parallel to the palm normal")
    rz = rz / nz
    ry = np.cross(rz, rx)
    return np.column_stack([rx, ry, rz])


def relative_offsets_from_joints(model, j, rotation):
    """Canonical offsets: root-adjacent joints (O - O(C)) R, finger joints (0, 0, |O(k) - O(parent)|)."""
    out = {}
    root = model.root
    for joint in model.joints[1:]:
        name = joint.name
        parent = model.joints[joint.parent].name
        if name not in j or parent not in j:
            raise MissingJoint(f"offset of {name} needs joints {parent} and {name}")
        if parent == root:
            out[name] = (j[name] - j[root]) @ rotation
        else:
            out[name] = np.array([0.0, 0.0, np.linalg.norm(j[name] - j[parent])])
    return out


@dataclass(frozen=True)
class BoneStats:
    mean: dict
    std: dict


def estimate_bone_lengths(dataset, model):
    """Per-link mean and sample standard deviation (ddof=1, 0 for one frame) of inter-joint distances."""
    if not dataset:
        raise EmptyDataset("no frames to estimate bone lengths from")
    first = dataset[0]
    links = [(p, c) for p, c in model.links() if p in first and c in first]
    if not links:
        raise MissingJoint("frames contain no linked joint pair of the skeleton")
    d = np.empty((len(dataset), len(links)))
    for f, frame in enumerate(dataset):
        for k, (p, c) in enumerate(links):
            d[f, k] = np.linalg.norm(frame[c] - frame[p])
    mean = d.mean(axis=0)
    std = d.std(axis=0, ddof=1) if len(dataset) > 1 else np.zeros(len(links))
    return BoneStats(dict(zip(links, mean)), dict(zip(links, std)))


# --------------------------------------------------------------------------- PSO

@dataclass(frozen=True)
class PsoConfig:
    swarm: int = 64
    iterations: int = 300
    inertia: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    seed: int = 0

    def __post_init__(self):
        if self.swarm < 2:
            raise InvalidSpec(f"swarm must have >= 2 particles, got {self.swarm}")
        if self.iterations < 0:
            raise InvalidSpec(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class PsoResult:
    x: np.ndarray
    cost: float
    history: np.ndarray = field(repr=False)


def pso_minimize(objective, lo, hi, cfg=None, vectorized=False):
    """Global-best particle swarm minimisation inside the box [lo, hi].

    With ``vectorized`` the objective receives the whole swarm (p, d) and
    returns p costs. ``history[t]`` is the best cost after t iterations.
    """
    cfg = cfg or PsoConfig()
    lo = np.asarray(lo, dtype=np.float64).reshape(-1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1)
    if lo.shape != hi.shape or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
        raise InvalidBounds("bounds must be finite with lo <= hi")
    f = objective if vectorized else (lambda xs: np.array([objective(x) for x in xs]))
    rng = np.random.default_rng(cfg.seed)
    span = hi - lo
    x = lo + rng.random((cfg.swarm, lo.size)) * span
    v = np.zeros_like(x)
    cost = np.asarray(f(x), dtype=np.float64)
    pbest, pcost = x.copy(), cost.copy()
    g = int(np.argmin(pcost))
    gbest, gcost = pbest[g].copy(), float(pcost[g])
    history = [gcost]
    for _ in range(cfg.iterations):
        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
        v = cfg.inertia * v + cfg.c1 * r1 * (pbest - x) + cfg.c2 * r2 * (gbest - x)
        v = np.clip(v, -span, span)
        x = np.clip(x + v, lo, hi)
        cost = np.asarray(f(x), dtype=np.float64)
        better = cost < pcost
        pbest[better] = x[better]
        pcost[better] = cost[better]
        g = int(np.argmin(pcost))
        if pcost[g] < gcost:
            gbest, gcost = pbest[g].copy(), float(pcost[g])
        history.append(gcost)
    return PsoResult(gbest, gcost, np.array(history))


# --------------------------------------------------------------------------- IK

@dataclass
class IkResult:
    pose: HandPose
    residual: float
    history: np.ndarray = field(repr=False)


def _target_rows(model, target):
    idx, pts = [], []
    for name in target.names:
        try:
            mj = model.resolve(name)
        except MissingJoint:
            continue
        idx.append(model.index(mj))
        pts.append(target[name])
    if not idx:
        raise MissingJoint("target shares no joints with the skeleton")
    return np.array(idx), np.array(pts)


def ik_solve(model, target, cfg=None, objective="mean", decompose=True, polish=True):
    """Fit joint angles to ``target`` with the root pinned to the target's palm frame.

    The root sits at the target's centre joint with orientation from
    root_frame_from_joints; PSO then searches the angle box. The cost is the
    mean joint distance (``objective='mean'``) or the sum of squared
    distances (``'sum_squared'``). With ``decompose`` each independent
    sub-chain of the root is optimised by its own swarm; the costs add up to
    the same total, so the optimum is unchanged. ``polish`` refines each
    swarm's best with a bounded Powell search; ``history`` tracks the swarms.
    """
    cfg = cfg or PsoConfig()
    frame_names = []
    for n in model.frame:
        for cand in [n] + [l for l, j in model.annotation if j == n]:
            if cand in target:
                frame_names.append(cand)
                break
        else:
            raise MissingJoint(f"target lacks frame joint {n}")
    rot = root_frame_from_joints(target, tuple(frame_names))
    root_pos = np.array(target[frame_names[0]])
    idx, pts = _target_rows(model, target)
    n = len(idx)
    lo, hi = model.limits
    slices = model.angle_slices()

    def cost_of(pos, rows):
        d = pos[:, idx[rows]] - pts[rows]
        if objective == "mean":
            return np.linalg.norm(d, axis=-1).sum(axis=-1) / n
        if objective == "sum_squared":
            return np.sum(d * d, axis=(-2, -1))
        raise ValueError(f"unknown objective {objective!r}")

    angles = np.zeros(model.num_angles)
    if decompose:
        groups = []
        for child in model.children(0):
            sub = model.subtree(child)
            cols = np.concatenate([np.arange(slices[i].start, slices[i].stop) for i in sub]).astype(int)
            groups.append((sub, cols))
    else:
        groups = [(list(range(len(model.joints))), np.arange(model.num_angles))]

    history = np.zeros(cfg.iterations + 1)
    covered = np.zeros(n, dtype=bool)
    for gi, (sub, cols) in enumerate(groups):
        rows = np.isin(idx, sub)
        covered |= rows
        if not rows.any():
            continue
        if cols.size == 0:
            pos = fk_batch(model, rot, root_pos, angles[None], sub)
            history += cost_of(pos, rows)[0]
            continue

        def f(xs, cols=cols, sub=sub, rows=rows):
            full = np.zeros((len(xs), model.num_angles))
            full[:, cols] = xs
            return cost_of(fk_batch(model, rot, root_pos, full, sub), rows)

        sub_cfg = replace(cfg, seed=cfg.seed + gi) if decompose else cfg
        res = pso_minimize(f, lo[cols], hi[cols], sub_cfg, vectorized=True)
        best = res.x
        if polish:
            # swarms tend to stall against a limit; a bounded local search finishes the job
            opt = minimize(lambda a: float(f(a[None])[0]), res.x, method="Powell",
                           bounds=list(zip(lo[cols], hi[cols])))
            if opt.fun < res.cost:
                best = np.clip(opt.x, lo[cols], hi[cols])
        angles[cols] = best
        history += res.history
    if not covered.all():
        # the root joint itself (no chain owns it)
        pos = fk_batch(model, rot, root_pos, angles[None], [0])
        history += cost_of(pos, ~covered)[0]

    pose = clamp_pose(model, HandPose(root_pos, rot, angles))
    pos = fk_batch(model, rot, root_pos, pose.angles[None])
    residual = float(np.linalg.norm(pos[0, idx] - pts, axis=-1).mean())
    return IkResult(pose, residual, history)
