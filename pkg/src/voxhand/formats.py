"""Binary and text file formats: D3D1 depth, T3D1 TSDF, W3D1 weights, joints CSV, dataset manifests."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidSpec, ParseError
from .kinematics import JointSet
from .voxelizer import DepthImage, TsdfVolume, VoxelGridSpec


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"short read: {what} needs {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected):
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, n, what):
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float64)

    def end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def _read_bytes(src):
    if isinstance(src, (bytes, bytearray)):
        return bytes(src)
    return Path(src).read_bytes()


# --------------------------------------------------------------------------- depth

def encode_depth(img):
    d = np.clip(np.rint(img.depth), 0, 65535).astype("<u2")
    return (b"D3D1" + struct.pack("<II", img.width, img.height) + d.tobytes()
            + img.mask.astype(np.uint8).tobytes())


def decode_depth(data):
    r = _Reader(data)
    r.magic(b"D3D1")
    w, h = r.u32("width"), r.u32("height")
    depth = np.frombuffer(r.take(2 * w * h, "depth"), dtype="<u2").reshape(h, w)
    mask_at = r.pos
    mask = np.frombuffer(r.take(w * h, "mask"), dtype=np.uint8).reshape(h, w)
    bad = np.flatnonzero(mask > 1)
    if bad.size:
        raise FormatError(f"mask byte {mask.flat[bad[0]]} is not 0/1", mask_at + int(bad[0]))
    r.end()
    return DepthImage(depth.astype(np.float64), mask.astype(bool))


def load_depth(path):
    return decode_depth(_read_bytes(path))


def save_depth(path, img):
    Path(path).write_bytes(encode_depth(img))


# --------------------------------------------------------------------------- tsdf

def encode_tsdf(vol):
    s = vol.spec
    head = b"T3D1" + struct.pack("<I", s.resolution)
    head += np.array([s.voxel_size, s.truncation, *vol.origin], dtype="<f4").tobytes()
    return head + vol.values.astype("<f4").tobytes()


def decode_tsdf(data):
    r = _Reader(data)
    r.magic(b"T3D1")
    res = r.u32("resolution")
    vs, tr, ox, oy, oz = r.f32(5, "header")
    values = r.f32(res ** 3, "values")
    r.end()
    try:
        spec = VoxelGridSpec(int(res), float(vs), float(tr))
        return TsdfVolume(spec, (ox, oy, oz), values)
    except InvalidSpec as e:
        raise FormatError(str(e), 4) from None


def load_tsdf(path):
    return decode_tsdf(_read_bytes(path))


def save_tsdf(path, vol):
    Path(path).write_bytes(encode_tsdf(vol))


# --------------------------------------------------------------------------- weights

def encode_weights(state):
    """``state``: ordered (layer name, [arrays]) pairs."""
    out = [b"W3D1", struct.pack("<I", len(state))]
    for name, tensors in state:
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.asarray(t)
            out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            out.append(t.astype("<f4").tobytes())
    return b"".join(out)


def decode_weights(data):
    r = _Reader(data)
    r.magic(b"W3D1")
    state = []
    for _ in range(r.u32("layer count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        tensors = []
        for _ in range(r.u32("tensor count")):
            rank = r.u32("rank")
            shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            tensors.append(r.f32(n, f"{name} values").reshape(shape))
        state.append((name, tensors))
    r.end()
    return state


def save_weights(path, state):
    Path(path).write_bytes(encode_weights(state))


def load_weights(path):
    return decode_weights(_read_bytes(path))


# --------------------------------------------------------------------------- joints csv

def joints_csv(frames):
    """Frames of JointSets sharing one name list -> CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not frames:
        w.writerow(["frame"])
        return buf.getvalue()
    names = frames[0].names
    w.writerow(["frame"] + [f"{n}_{a}" for n in names for a in "xyz"])
    for i, f in enumerate(frames):
        if f.names != names:
            raise InvalidSpec(f"frame {i} joint names differ from frame 0")
        w.writerow([i] + [f"{v:.6f}" for v in f.positions.reshape(-1)])
    return buf.getvalue()


def parse_joints_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:1] != ["frame"]:
        raise ParseError("joints CSV must start with a 'frame' header", 1)
    cols = rows[0][1:]
    if len(cols) % 3:
        raise ParseError("joint columns must come in x,y,z triples", 1)
    names = []
    for k in range(0, len(cols), 3):
        base = cols[k][:-2]
        if [cols[k], cols[k + 1], cols[k + 2]] != [f"{base}_x", f"{base}_y", f"{base}_z"]:
            raise ParseError("bad joint column triple", 1, ",".join(cols[k:k + 3]))
        names.append(base)
    frames = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(cols) + 1:
            raise ParseError(f"expected {len(cols) + 1} fields, got {len(row)}", lineno)
        try:
            vals = np.array([float(v) for v in row[1:]])
        except ValueError:
            raise ParseError("non-numeric value", lineno) from None
        frames.append(JointSet(tuple(names), vals.reshape(-1, 3)))
    return frames


def save_joints(path, frames):
    Path(path).write_text(joints_csv(frames))


def load_joints(path):
    return parse_joints_csv(Path(path).read_text())


# --------------------------------------------------------------------------- manifests

@dataclass(frozen=True)
class SampleRecord:
    depth: Path
    joints: Path
    scale: float = 1.0
    cam: tuple = (0.0,) * 6
    clean: Path | None = None

    def line(self, base=None):
        def rel(p):
            return Path(p).relative_to(base).as_posix() if base else Path(p).as_posix()
        s = f"depth={rel(self.depth)} joints={rel(self.joints)} scale={self.scale:.6f} cam=" \
            + ",".join(f"{v:.6f}" for v in self.cam)
        if self.clean is not None:
            s += f" clean={rel(self.clean)}"
        return s


def manifest_text(records, base=None):
    return "".join(r.line(base) + "\n" for r in records)


def parse_manifest(text, base=None):
    base = Path(base) if base else Path(".")
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kv = {}
        for item in line.split():
            if "=" not in item:
                raise ParseError("expected key=value", lineno, item)
            k, v = item.split("=", 1)
            kv[k] = v
        if "depth" not in kv or "joints" not in kv:
            raise ParseError("sample needs depth= and joints=", lineno)
        try:
            scale = float(kv.get("scale", 1.0))
            cam = tuple(float(v) for v in kv["cam"].split(",")) if "cam" in kv else (0.0,) * 6
        except ValueError:
            raise ParseError("bad number", lineno) from None
        if len(cam) != 6:
            raise ParseError("cam needs 6 values", lineno, kv["cam"])
        out.append(SampleRecord(base / kv["depth"], base / kv["joints"], scale, cam,
                                base / kv["clean"] if "clean" in kv else None))
    return out


def load_manifest(path):
    """Parse a manifest file; every referenced file must exist."""
    path = Path(path)
    recs = parse_manifest(path.read_text(), path.parent)
    for r in recs:
        for p in (r.depth, r.joints, r.clean):
            if p is not None and not p.is_file():
                raise InvalidSpec(f"{path}: referenced file {p} does not exist")
    return recs
