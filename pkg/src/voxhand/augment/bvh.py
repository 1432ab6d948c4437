"""Biovision hierarchy (BVH) encoding of hand poses."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import ChannelMismatch, DimensionMismatch, InvalidScale, InvalidSpec, ParseError
from ..kinematics import HandPose, Joint, SkeletonModel

ROT_CHANNEL = {"rx": "Xrotation", "ry": "Yrotation", "rz": "Zrotation"}
CHANNEL_DOF = {v: k for k, v in ROT_CHANNEL.items()}
POS_CHANNELS = ("Xposition", "Yposition", "Zposition")


@dataclass(frozen=True)
class BvhJoint:
    name: str
    parent: int
    offset: tuple
    channels: tuple
    end_site: tuple | None = None


@dataclass(frozen=True, eq=False)
class BvhDocument:
    joints: tuple
    frames: np.ndarray
    frame_time: float = 1.0 / 30

    def __post_init__(self):
        nch = self.num_channels
        frames = np.array(self.frames, dtype=np.float64).reshape(-1, nch) if nch else \
            np.zeros((len(self.frames), 0))
        if not np.all(np.isfinite([v for j in self.joints for v in j.offset])):
            raise InvalidSpec("BVH offsets must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def num_channels(self):
        return sum(len(j.channels) for j in self.joints)

    def dumps(self):
        lines = ["HIERARCHY"]
        children = {i: [] for i in range(len(self.joints))}
        for i, j in enumerate(self.joints):
            if j.parent >= 0:
                children[j.parent].append(i)

        def emit(i, depth):
            j = self.joints[i]
            pad = "  " * depth
            lines.append(f"{pad}{'ROOT' if j.parent < 0 else 'JOINT'} {j.name}")
            lines.append(f"{pad}{{")
            lines.append(f"{pad}  OFFSET " + " ".join(f"{v:.6f}" for v in j.offset))
            lines.append(f"{pad}  CHANNELS {len(j.channels)}" + "".join(f" {c}" for c in j.channels))
            for k in children[i]:
                emit(k, depth + 1)
            if not children[i]:
                end = j.end_site if j.end_site is not None else (0.0, 0.0, 0.0)
                lines.append(f"{pad}  End Site")
                lines.append(f"{pad}  {{")
                lines.append(f"{pad}    OFFSET " + " ".join(f"{v:.6f}" for v in end))
                lines.append(f"{pad}  }}")
            lines.append(f"{pad}}}")

        emit(0, 0)
        lines.append("MOTION")
        lines.append(f"Frames: {len(self.frames)}")
        lines.append(f"Frame Time: {self.frame_time:.6f}")
        for row in self.frames:
            lines.append(" ".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"

    def skeleton(self, template=None):
        """SkeletonModel from the hierarchy; limits/annotation/frame copied from ``template`` when given."""
        root_rot = [c for c in self.joints[0].channels if c in CHANNEL_DOF]
        euler = "".join(CHANNEL_DOF[c][1].upper() for c in root_rot) or "ZXY"
        if sorted(euler) != ["X", "Y", "Z"]:
            raise InvalidSpec(f"root must carry three rotation channels, got {root_rot}")
        joints = []
        tmpl = {j.name: j for j in template.joints} if template is not None else {}
        for i, bj in enumerate(self.joints):
            dofs = () if i == 0 else tuple(CHANNEL_DOF[c] for c in bj.channels)
            t = tmpl.get(bj.name)
            limits = t.limits if t is not None and t.dofs == dofs else ((-np.pi, np.pi),) * len(dofs)
            joints.append(Joint(bj.name, bj.parent, tuple(bj.offset), dofs, tuple(limits)))
        kw = {}
        if template is not None:
            names = {j.name for j in joints}
            kw["annotation"] = tuple((l, j) for l, j in template.annotation if j in names)
            kw["frame"] = template.frame
        return SkeletonModel(tuple(joints), euler, **kw)

    def poses(self):
        root = self.joints[0]
        pos_idx = [root.channels.index(c) for c in POS_CHANNELS]
        rot_idx = [k for k, c in enumerate(root.channels) if c in CHANNEL_DOF]
        seq = "".join(CHANNEL_DOF[root.channels[k]][1].upper() for k in rot_idx)
        n0 = len(root.channels)
        out = []
        for row in self.frames:
            rot = Rotation.from_euler(seq, row[rot_idx], degrees=True).as_matrix()
            out.append(HandPose(row[pos_idx], rot, np.radians(row[n0:])))
        return out


def _root_channels(euler):
    return POS_CHANNELS + tuple(f"{a}rotation" for a in euler.upper())


def pose_to_bvh(model, poses, frame_time=1.0 / 30):
    """Hierarchy from the skeleton's canonical offsets, one MOTION row per pose (degrees)."""
    joints = []
    for i, j in enumerate(model.joints):
        if i == 0:
            ch = _root_channels(model.euler)
        else:
            ch = tuple(ROT_CHANNEL[d] for d in j.dofs)
        joints.append(BvhJoint(j.name, j.parent, tuple(float(v) for v in j.offset), ch))
    rows = []
    for k, p in enumerate(poses):
        if p.angles.shape != (model.num_angles,):
            raise DimensionMismatch(f"pose {k} has {p.angles.size} angles, skeleton needs {model.num_angles}")
        eul = Rotation.from_matrix(p.root_orientation).as_euler(model.euler.upper(), degrees=True)
        rows.append(np.concatenate([p.root_position, eul, np.degrees(p.angles)]))
    frames = np.array(rows) if rows else np.zeros((0, 6 + model.num_angles))
    return BvhDocument(tuple(joints), frames, frame_time)


def rescale_bones(doc, factors):
    """Multiply OFFSETs of non-root joints by a global factor or per-joint {name: factor}."""
    def f(name):
        v = factors.get(name, 1.0) if isinstance(factors, dict) else factors
        if not v > 0:
            raise InvalidScale(f"scale factor for {name} must be > 0, got {v}")
        return float(v)

    if isinstance(factors, dict):
        unknown = set(factors) - {j.name for j in doc.joints}
        if unknown:
            raise InvalidScale(f"unknown joints in scale factors: {sorted(unknown)}")
    joints = []
    for i, j in enumerate(doc.joints):
        s = f(j.name)
        if i == 0:
            joints.append(j)
            continue
        end = None if j.end_site is None else tuple(v * s for v in j.end_site)
        joints.append(replace(j, offset=tuple(v * s for v in j.offset), end_site=end))
    return BvhDocument(tuple(joints), doc.frames.copy(), doc.frame_time)


# --------------------------------------------------------------------------- parsing

class _Tokens:
    def __init__(self, text):
        self.toks = []
        for lineno, line in enumerate(text.splitlines(), 1):
            for t in line.split():
                self.toks.append((t, lineno))
        self.i = 0

    def peek(self):
        return self.toks[self.i][0] if self.i < len(self.toks) else None

    def line(self):
        return self.toks[self.i][1] if self.i < len(self.toks) else (self.toks[-1][1] if self.toks else 1)

    def next(self, what):
        if self.i >= len(self.toks):
            raise ParseError(f"unexpected end of input, expected {what}")
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, word):
        t, ln = self.next(word)
        if t != word:
            raise ParseError(f"expected {word!r}", ln, t)

    def number(self, what):
        t, ln = self.next(what)
        try:
            v = float(t)
        except ValueError:
            raise ParseError(f"expected a number for {what}", ln, t) from None
        if not np.isfinite(v):
            raise ParseError(f"non-finite {what}", ln, t)
        return v

    def integer(self, what):
        t, ln = self.next(what)
        try:
            v = int(t)
        except ValueError:
            raise ParseError(f"expected an integer for {what}", ln, t) from None
        if v < 0:
            raise ParseError(f"negative {what}", ln, t)
        return v


def _parse_joint(tk, joints, parent, is_root):
    name, ln = tk.next("joint name")
    if name in {j.name for j in joints}:
        raise ParseError("duplicate joint name", ln, name)
    tk.expect("{")
    tk.expect("OFFSET")
    offset = tuple(tk.number("offset") for _ in range(3))
    tk.expect("CHANNELS")
    n = tk.integer("channel count")
    channels = []
    for _ in range(n):
        c, cl = tk.next("channel name")
        allowed = (POS_CHANNELS if is_root else ()) + tuple(CHANNEL_DOF)
        if c not in allowed:
            raise ParseError("unsupported channel", cl, c)
        channels.append(c)
    if is_root and (sorted(c for c in channels if c in POS_CHANNELS) != sorted(POS_CHANNELS)
                    or len([c for c in channels if c in CHANNEL_DOF]) != 3):
        raise ParseError("root needs 3 position and 3 rotation channels", ln, name)
    idx = len(joints)
    joints.append(BvhJoint(name, parent, offset, tuple(channels)))
    has_child = False
    while True:
        t = tk.peek()
        if t == "JOINT":
            tk.next("JOINT")
            _parse_joint(tk, joints, idx, False)
            has_child = True
        elif t == "End":
            tk.next("End")
            tk.expect("Site")
            tk.expect("{")
            tk.expect("OFFSET")
            end = tuple(tk.number("end offset") for _ in range(3))
            tk.expect("}")
            if any(end):
                joints[idx] = replace(joints[idx], end_site=end)
        elif t == "}":
            tk.next("}")
            break
        else:
            raise ParseError("expected JOINT, End Site or '}'", tk.line(), t)
    return has_child


def parse_bvh_document(text):
    """Parse BVH text. The text must end with a newline, which catches files cut inside the last number."""
    if not text.endswith("\n"):
        raise ParseError("input does not end with a newline (truncated file?)", text.count("\n") + 1)
    tk = _Tokens(text)
    tk.expect("HIERARCHY")
    tk.expect("ROOT")
    joints = []
    _parse_joint(tk, joints, -1, True)
    tk.expect("MOTION")
    tk.expect("Frames:")
    nframes = tk.integer("frame count")
    tk.expect("Frame")
    tk.expect("Time:")
    frame_time = tk.number("frame time")
    nch = sum(len(j.channels) for j in joints)

    rows, row_lines = [], {}
    for tok, ln in tk.toks[tk.i:]:
        row_lines.setdefault(ln, []).append(tok)
    for k, (ln, toks) in enumerate(sorted(row_lines.items())):
        if len(toks) != nch:
            raise ChannelMismatch(f"MOTION row {k} has {len(toks)} values, hierarchy declares {nch}", ln)
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            bad = next(t for t in toks if not _is_float(t))
            raise ParseError(f"non-numeric value in MOTION row {k}", ln, bad) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"non-finite value in MOTION row {k}", ln)
        rows.append(vals)
    if len(rows) != nframes:
        raise ParseError(f"header declares {nframes} frames but {len(rows)} rows follow", tk.line())
    frames = np.array(rows) if rows else np.zeros((0, nch))
    return BvhDocument(tuple(joints), frames, frame_time)


def _is_float(t):
    try:
        float(t)
        return True
    except ValueError:
        return False


def parse_bvh(text, template=None):
    """BVH text -> (SkeletonModel, list of HandPose). Angles are converted to radians."""
    doc = parse_bvh_document(text)
    try:
        model = doc.skeleton(template)
    except InvalidSpec as e:
        raise ParseError(str(e)) from None
    return model, doc.poses()
