"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import InvalidSpec, ParseError
from .kinematics import PsoConfig, default_skeleton, load_skeleton
from .nets import PRESETS, PoseTargetCodec
from .voxelizer import CameraIntrinsics, VoxelGridSpec


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(v) for v in str(s).split(","))


# key: (parser, default, help). None defaults for grid/train keys mean "take from the preset".
KEYS = {
    "preset": (str, "full", "network/grid preset: full or toy (--toy selects toy)"),
    "seed": (int, 0, "global seed for synthesis, initialisation, shuffling and PSO"),
    "skeleton": (str, "nyu", "bundled skeleton name (nyu, icvl) or path to a skeleton file"),
    "capsules": (str, "", "capsule geometry file; empty = bundled/default"),
    "fx": (float, 200.0, "depth camera focal length x (px)"),
    "fy": (float, 200.0, "depth camera focal length y (px)"),
    "cx": (float, 63.5, "principal point x (px)"),
    "cy": (float, 63.5, "principal point y (px)"),
    "grid_resolution": (int, None, "voxels per side"),
    "grid_voxel_size": (float, None, "voxel edge (mm)"),
    "grid_truncation": (float, None, "TSDF truncation distance (mm)"),
    "codec_half_extent": (float, 150.0, "joint offsets are divided by this (mm) before regression"),
    "refine": (_bool, True, "use the refine network before pose regression when its weights are given"),
    "train_epochs": (int, None, "training epochs"),
    "train_batch_size": (int, None, "mini-batch size"),
    "train_learning_rate": (float, None, "learning rate"),
    "train_momentum": (float, None, "SGD momentum"),
    "train_optimizer": (str, None, "sgd or adam"),
    "pso_swarm": (int, 64, "PSO particles"),
    "pso_iterations": (int, 300, "PSO iterations"),
    "pso_inertia": (float, 0.729, "PSO inertia weight"),
    "pso_c1": (float, 1.49445, "PSO cognitive weight"),
    "pso_c2": (float, 1.49445, "PSO social weight"),
    "synth_scales": (_floats, (0.85, 0.95, 1.0, 1.1, 1.2), "comma-separated skeleton scale factors"),
    "synth_azimuth": (_floats, (-60.0, 60.0), "camera azimuth range (deg)"),
    "synth_elevation": (_floats, (-40.0, 40.0), "camera elevation range (deg)"),
    "synth_distance": (_floats, (400.0, 900.0), "camera distance range (mm)"),
    "synth_size": (int, 128, "rendered image width and height (px)"),
    "synth_holes": (_bool, True, "also write hole-corrupted depth (clean render kept for refine pairs)"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)
    base: Path = Path(".")

    def __post_init__(self):
        unknown = set(self.values) - set(KEYS)
        if unknown:
            raise InvalidSpec(f"unknown config keys: {sorted(unknown)}")
        # build every derived object once so bad values fail at load time
        if self.get("preset") not in PRESETS:
            raise InvalidSpec(f"preset must be one of {sorted(PRESETS)}")
        for build in (lambda: self.grid, lambda: self.train_config("pose"), lambda: self.pso,
                      lambda: self.intrinsics, lambda: self.codec, lambda: self.skeleton):
            build()
        if self.get("capsules") and not self.path("capsules").is_file():
            raise InvalidSpec(f"capsule file {self.path('capsules')} does not exist")
        sc = self.get("synth_scales")
        if not sc or any(not s > 0 for s in sc):
            raise InvalidSpec("synth_scales must be positive")
        for k in ("synth_azimuth", "synth_elevation", "synth_distance"):
            if len(self.get(k)) != 2:
                raise InvalidSpec(f"{k} needs two values lo,hi")

    def get(self, key):
        return self.values.get(key, KEYS[key][1])

    def path(self, key):
        p = Path(self.get(key))
        return p if p.is_absolute() else self.base / p

    def with_values(self, **kw):
        return RunConfig({**self.values, **kw}, self.base)

    @property
    def preset(self):
        return PRESETS[self.get("preset")]

    @property
    def grid(self):
        g = self.preset.grid
        return VoxelGridSpec(self.get("grid_resolution") or g.resolution,
                             self.get("grid_voxel_size") or g.voxel_size,
                             self.get("grid_truncation") or g.truncation)

    def train_config(self, which):
        base = self.preset.refine_train if which == "refine" else self.preset.pose_train
        kw = {}
        for k in ("epochs", "batch_size", "learning_rate", "momentum", "optimizer"):
            v = self.get(f"train_{k}")
            if v is not None:
                kw[k] = v
        kw["rng_seed"] = self.get("seed")
        return replace(base, **kw)

    @property
    def pso(self):
        return PsoConfig(self.get("pso_swarm"), self.get("pso_iterations"), self.get("pso_inertia"),
                         self.get("pso_c1"), self.get("pso_c2"), self.get("seed"))

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.get("fx"), self.get("fy"), self.get("cx"), self.get("cy"))

    @property
    def codec(self):
        return PoseTargetCodec(self.get("codec_half_extent"))

    @property
    def skeleton(self):
        name = self.get("skeleton")
        if name in ("nyu", "icvl"):
            return default_skeleton(name)
        p = self.path("skeleton")
        if not p.is_file():
            raise InvalidSpec(f"skeleton file {p} does not exist")
        return load_skeleton(p)


def parse_config(text, overrides=None, base="."):
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno, line)
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ParseError("unknown key", lineno, k)
        try:
            vals[k] = KEYS[k][0](v)
        except ValueError as e:
            raise ParseError(f"bad value for {k}: {e}", lineno, v) from None
    vals.update(overrides or {})
    return RunConfig(vals, Path(base))


def load_config(path=None, overrides=None):
    if path is None:
        return RunConfig(dict(overrides or {}))
    path = Path(path)
    if not path.is_file():
        raise InvalidSpec(f"config file {path} does not exist")
    return parse_config(path.read_text(), overrides, path.parent)


def describe_keys():
    lines = []
    for k, (_, default, help_) in KEYS.items():
        d = "preset" if default is None else (",".join(map(str, default)) if isinstance(default, tuple) else default)
        lines.append(f"  {k:<22} {help_} [default: {d}]")
    return "\n".join(lines)
