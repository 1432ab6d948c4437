"""TSDF refinement FCN and pose regression network: assembly, training, inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd3d as ag
from .errors import EmptyDataset, InvalidJointCount, InvalidSpec, ShapeMismatch
from .kinematics import JointSet
from .voxelizer import TsdfVolume, VoxelGridSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    skip_links: tuple = ()
    output: str = "volume"
    in_channels: int = 1

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise InvalidSpec(f"{self.name}: duplicate layer names")
        for src, dst in self.skip_links:
            if src not in names or dst not in names:
                raise InvalidSpec(f"{self.name}: skip link {src}->{dst} references unknown layer")
            if names.index(src) >= names.index(dst):
                raise InvalidSpec(f"{self.name}: skip source {src} must precede {dst}")

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)


def _conv(name, cin, cout, kernel=3, pad=1, act="relu"):
    out = [LayerSpec("conv3d", name, {"in": cin, "out": cout, "kernel": kernel, "stride": 1, "padding": pad})]
    if act:
        out.append(LayerSpec(act, f"{name}_{act}"))
    return out


def build_refine_net(base_channels=32, final_channels=None):
    """Encoder-decoder FCN with two pooling levels and channel-concatenation skips.

    Channel plan for base 32: 32,32 | pool | 64,64 | pool | 128,128 | up |
    64,64 | up | 32,16,1. Encoder maps right before each pooling are
    concatenated right after the matching up-pooling.
    """
    c1, c2, c3 = base_channels, 2 * base_channels, 4 * base_channels
    cf = final_channels or max(1, base_channels // 2)
    layers = []
    layers += _conv("enc1a", 1, c1) + _conv("enc1b", c1, c1)
    layers.append(LayerSpec("maxpool3d", "pool1", {"kernel": 2, "stride": 2}))
    layers += _conv("enc2a", c1, c2) + _conv("enc2b", c2, c2)
    layers.append(LayerSpec("maxpool3d", "pool2", {"kernel": 2, "stride": 2}))
    layers += _conv("mid_a", c2, c3) + _conv("mid_b", c3, c3)
    layers.append(LayerSpec("uppool3d", "up1", {"factor": 2}))
    layers.append(LayerSpec("concat", "cat1", {"source": "enc2b_relu"}))
    layers += _conv("dec1a", c3 + c2, c2) + _conv("dec1b", c2, c2)
    layers.append(LayerSpec("uppool3d", "up2", {"factor": 2}))
    layers.append(LayerSpec("concat", "cat2", {"source": "enc1b_relu"}))
    layers += _conv("dec2a", c2 + c1, c1) + _conv("dec2b", c1, cf)
    layers += _conv("out", cf, 1, act="tanh")
    return NetworkSpec("refine", tuple(layers),
                       skip_links=(("enc2b_relu", "cat1"), ("enc1b_relu", "cat2")),
                       output="volume")


def build_pose_net(num_joints, conv_channels=8, fc_width=2048, dropout=0.5, kernel=5):
    """Two conv(5^3, pad 2)+pool+ReLU stages, then FC-dropout-FC-dropout-FC(3 * joints)."""
    if int(num_joints) != num_joints or num_joints < 1:
        raise InvalidJointCount(f"num_joints must be a positive integer, got {num_joints}")
    pad = kernel // 2
    layers = [
        LayerSpec("conv3d", "conv1", {"in": 1, "out": conv_channels, "kernel": kernel, "stride": 1, "padding": pad}),
        LayerSpec("maxpool3d", "pool1", {"kernel": 2, "stride": 2}),
        LayerSpec("relu", "conv1_relu"),
        LayerSpec("conv3d", "conv2", {"in": conv_channels, "out": conv_channels, "kernel": kernel, "stride": 1, "padding": pad}),
        LayerSpec("maxpool3d", "pool2", {"kernel": 2, "stride": 2}),
        LayerSpec("relu", "conv2_relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", {"out": fc_width}),
        LayerSpec("relu", "fc1_relu"),
        LayerSpec("dropout", "drop1", {"fraction": dropout}),
        LayerSpec("dense", "fc2", {"out": fc_width}),
        LayerSpec("relu", "fc2_relu"),
        LayerSpec("dropout", "drop2", {"fraction": dropout}),
        LayerSpec("dense", "fc3", {"out": 3 * int(num_joints)}),
    ]
    return NetworkSpec("pose", tuple(layers), output="joints")


def _make_layer(ls, in_shape):
    o = ls.options
    if ls.kind == "conv3d":
        return ag.Conv3d(o["in"], o["out"], o["kernel"], o["stride"], o["padding"], name=ls.name)
    if ls.kind == "maxpool3d":
        return ag.MaxPool3d(o["kernel"], o["stride"], name=ls.name)
    if ls.kind == "uppool3d":
        return ag.UpPool3d(o["factor"], name=ls.name)
    if ls.kind == "concat":
        return ag.Concat(o["source"], name=ls.name)
    if ls.kind == "flatten":
        return ag.Flatten(name=ls.name)
    if ls.kind == "dense":
        if len(in_shape) != 2:
            raise ShapeMismatch(f"{ls.name}: dense layer needs a flattened input, got {in_shape}")
        return ag.Dense(in_shape[1], o["out"], name=ls.name)
    if ls.kind == "dropout":
        return ag.Dropout(o["fraction"], name=ls.name)
    if ls.kind == "relu":
        return ag.ReLU(name=ls.name)
    if ls.kind == "tanh":
        return ag.Tanh(name=ls.name)
    raise InvalidSpec(f"unknown layer kind {ls.kind!r}")


def infer_shapes(spec, input_shape):
    """Per-layer output shapes (batch 1) for an input of shape (channels, d, h, w)."""
    return Network(spec, input_shape, init=False).shapes


class Network:
    """Instantiated network: layer objects, parameters, forward/backward with skip routing."""

    def __init__(self, spec, input_shape, seed=0, dtype=np.float64, init=True):
        self.spec = spec
        self.input_shape = tuple(int(s) for s in input_shape)
        if self.input_shape[0] != spec.in_channels:
            raise ShapeMismatch(f"{spec.name}: expects {spec.in_channels} input channels, got {self.input_shape[0]}")
        self.dtype = np.dtype(dtype)
        self.layers = []
        self.shapes = []
        saved = {}
        sources = {s for s, _ in spec.skip_links}
        shape = (1,) + self.input_shape
        for ls in spec.layers:
            layer = _make_layer(ls, shape)
            if isinstance(layer, ag.Concat):
                skip = saved[layer.source]
                if skip[0] != shape[0] or skip[2:] != shape[2:]:
                    raise ShapeMismatch(f"{ls.name}: skip {layer.source} shape {skip} incompatible with {shape}")
                shape = (shape[0], shape[1] + skip[1]) + tuple(shape[2:])
            else:
                shape = layer.output_shape(shape)
            if ls.name in sources:
                saved[ls.name] = shape
            self.layers.append(layer)
            self.shapes.append(shape)
        self.output_shape = shape
        self._sources = sources
        if init:
            self.initialize(seed)

    def initialize(self, seed):
        rng = np.random.default_rng(seed)
        trainable = [l for l in self.layers if l.param_names]
        for i, layer in enumerate(trainable):
            # the tanh output layer gets a Xavier-like gain, everything else He
            gain = 1.0 if i == len(trainable) - 1 else 2.0
            layer.init(rng, gain)
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(self.dtype)
        self.reseed_dropout(seed)

    def reseed_dropout(self, seed):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ag.Dropout):
                layer.reseed([int(seed), i])

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"{self.spec.name}: input shape {x.shape[1:]} != expected {self.input_shape}")
        saved = {}
        for layer in self.layers:
            if isinstance(layer, ag.Concat):
                x = layer.forward(x, saved[layer.source], train)
            else:
                x = layer.forward(x, train)
            if layer.name in self._sources:
                saved[layer.name] = x
        return x

    __call__ = forward

    def backward(self, g):
        pending = {}
        for layer in reversed(self.layers):
            if layer.name in pending:
                g = g + pending.pop(layer.name)
            if isinstance(layer, ag.Concat):
                (g, g_skip), _ = ag.layer_backward(layer, layer.tape, g)
                pending[layer.source] = pending.get(layer.source, 0) + g_skip
            else:
                g = layer.backward(g)
        return g

    def parameters(self):
        return [(l, k) for l in self.layers for k in l.param_names]

    def param_arrays(self):
        return [l.params[k] for l, k in self.parameters()]

    def grad_arrays(self):
        return [l.grads[k] for l, k in self.parameters()]

    def num_params(self):
        return sum(l.num_params() for l in self.layers)

    def state(self):
        """Ordered (layer name, [tensors]) pairs, the unit stored in W3D1 checkpoints."""
        return [(l.name, [l.params[k] for k in l.param_names]) for l in self.layers if l.param_names]

    def load_state(self, state):
        mine = {l.name: l for l in self.layers if l.param_names}
        names = [n for n, _ in state]
        if sorted(names) != sorted(mine):
            raise ShapeMismatch(f"{self.spec.name}: checkpoint layers {names} != network layers {list(mine)}")
        for name, tensors in state:
            layer = mine[name]
            if len(tensors) != len(layer.param_names):
                raise ShapeMismatch(f"{name}: expected {len(layer.param_names)} tensors, got {len(tensors)}")
            for k, t in zip(layer.param_names, tensors):
                if tuple(t.shape) != layer.params[k].shape:
                    raise ShapeMismatch(f"{name}.{k}: checkpoint shape {tuple(t.shape)} != {layer.params[k].shape}")
                layer.params[k] = np.array(t, dtype=self.dtype)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 6
    learning_rate: float = 1e-4
    momentum: float = 0.9
    rng_seed: int = 0
    loss: str = "l2"
    optimizer: str = "sgd"
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidSpec(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidSpec(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise InvalidSpec(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.loss != "l2":
            raise InvalidSpec(f"unsupported loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidSpec(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass(frozen=True)
class PoseTargetCodec:
    half_extent: float = 150.0

    def __post_init__(self):
        if not self.half_extent > 0:
            raise InvalidSpec(f"half_extent must be > 0, got {self.half_extent}")

    def encode(self, offsets):
        """COM-relative joint offsets (n, 3) in mm -> flat normalised target."""
        return np.asarray(offsets, dtype=np.float64).reshape(-1) / self.half_extent

    def decode(self, vec):
        return np.asarray(vec, dtype=np.float64).reshape(-1, 3) * self.half_extent


@dataclass(frozen=True)
class Preset:
    """Named network/grid/training configuration."""

    name: str
    grid: VoxelGridSpec
    refine_base: int
    pose_conv: int
    pose_fc: int
    pose_dropout: float
    refine_train: TrainConfig
    pose_train: TrainConfig


PRESETS = {
    "full": Preset("full", VoxelGridSpec(60, 5.0, 50.0), refine_base=32, pose_conv=8, pose_fc=2048,
                    pose_dropout=0.5, refine_train=TrainConfig(), pose_train=TrainConfig()),
    # toy: sized for a single laptop core; dropout is off because the toy run is an overfit check
    "toy": Preset("toy", VoxelGridSpec(24, 12.5, 50.0), refine_base=4, pose_conv=8, pose_fc=256,
                  pose_dropout=0.0,
                  refine_train=TrainConfig(epochs=40, batch_size=2, learning_rate=3e-4, optimizer="adam"),
                  pose_train=TrainConfig(epochs=100, batch_size=6, learning_rate=5e-4, optimizer="adam")),
}


def refine_network(preset, seed=0):
    r = preset.grid.resolution
    return Network(build_refine_net(preset.refine_base), (1, r, r, r), seed=seed,
                   dtype=preset.refine_train.dtype)


def pose_network(preset, num_joints, seed=0):
    r = preset.grid.resolution
    spec = build_pose_net(num_joints, preset.pose_conv, preset.pose_fc, preset.pose_dropout)
    return Network(spec, (1, r, r, r), seed=seed, dtype=preset.pose_train.dtype)


@dataclass
class TrainResult:
    network: Network
    losses: list


def _as_input(v):
    if isinstance(v, TsdfVolume):
        return v.values[None]
    a = np.asarray(v, dtype=np.float64)
    return a if a.ndim == 4 else a[None]


def train(net, dataset, cfg=None, input_shape=None, on_epoch=None):
    """Mini-batch training with the L2 loss.

    ``net`` is a Network or a NetworkSpec (instantiated from cfg.rng_seed).
    The sample order for each epoch is a permutation drawn from a generator
    seeded once by cfg.rng_seed, so runs are reproducible. Returns the trained
    network and the per-epoch mean training loss.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise EmptyDataset("training dataset is empty")
    xs = np.stack([_as_input(x) for x, _ in dataset])
    if isinstance(net, NetworkSpec):
        net = Network(net, input_shape or xs.shape[1:], seed=cfg.rng_seed, dtype=cfg.dtype)
    ys = [np.asarray(t.values if isinstance(t, TsdfVolume) else t, dtype=np.float64) for _, t in dataset]
    ys = np.stack([y.reshape(net.output_shape[1:]) if y.size == int(np.prod(net.output_shape[1:])) else y
                   for y in ys])
    if tuple(xs.shape[1:]) != net.input_shape:
        raise ShapeMismatch(f"inputs {xs.shape[1:]} do not match network input {net.input_shape}")
    if tuple(ys.shape[1:]) != tuple(net.output_shape[1:]):
        raise ShapeMismatch(f"targets {ys.shape[1:]} do not match network output {net.output_shape[1:]}")
    xs = xs.astype(net.dtype)
    ys = ys.astype(net.dtype)

    net.reseed_dropout(cfg.rng_seed)
    first = net.layers[0]
    saved_flag = getattr(first, "input_grad", None)
    if saved_flag is not None:
        first.input_grad = False  # the gradient w.r.t. the TSDF itself is never used here
    try:
        losses = _fit(net, xs, ys, cfg, on_epoch)
    finally:
        if saved_flag is not None:
            first.input_grad = saved_flag
    return TrainResult(net, losses)


def _fit(net, xs, ys, cfg, on_epoch):
    rng = np.random.default_rng(cfg.rng_seed)
    opt = ag.Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    velocity = None
    losses = []
    n = len(xs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = net.forward(xs[idx], train=True)
            loss, g = ag.l2_loss(pred, ys[idx])
            total += loss * len(idx)
            net.backward(g.astype(net.dtype))
            if cfg.learning_rate == 0:
                continue
            if opt is not None:
                opt.step(net.param_arrays(), net.grad_arrays())
            else:
                velocity = ag.sgd_momentum_step(net.param_arrays(), net.grad_arrays(),
                                                cfg.learning_rate, cfg.momentum, velocity)
        losses.append(total / n)
        log.debug("%s epoch %d loss %.6g", net.spec.name, epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, losses[-1])
    return losses


def train_joint(refine, pose, dataset, cfg=None, refine_targets=None, refine_weight=1.0, on_epoch=None):
    """Train the refine and pose networks end to end on raw TSDFs.

    The pose loss is backpropagated through the refine net. When
    ``refine_targets`` (one TSDF per sample) is given, the reconstruction loss
    times ``refine_weight`` is added. Both networks are updated in place;
    returns the per-epoch mean total loss.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise EmptyDataset("training dataset is empty")
    if refine.output_shape[1:] != pose.input_shape:
        raise ShapeMismatch(f"refine output {refine.output_shape[1:]} does not feed pose input {pose.input_shape}")
    if refine_targets is not None and len(refine_targets) != len(dataset):
        raise ShapeMismatch(f"{len(refine_targets)} refine targets for {len(dataset)} samples")
    xs = np.stack([_as_input(x) for x, _ in dataset]).astype(refine.dtype)
    ys = np.stack([np.asarray(t, dtype=np.float64).reshape(pose.output_shape[1:]) for _, t in dataset])
    ys = ys.astype(pose.dtype)
    rs = None if refine_targets is None else np.stack([_as_input(t) for t in refine_targets]).astype(refine.dtype)
    if tuple(xs.shape[1:]) != refine.input_shape:
        raise ShapeMismatch(f"inputs {xs.shape[1:]} do not match network input {refine.input_shape}")

    refine.reseed_dropout(cfg.rng_seed)
    pose.reseed_dropout(cfg.rng_seed + 1)
    first = refine.layers[0]
    saved_flag = first.input_grad
    first.input_grad = False
    rng = np.random.default_rng(cfg.rng_seed)
    opt = ag.Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    velocity = None
    losses = []
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(xs))
            total = 0.0
            for start in range(0, len(xs), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                mid = refine.forward(xs[idx], train=True)
                loss, g = ag.l2_loss(pose.forward(mid, train=True), ys[idx])
                g_mid = pose.backward(g.astype(pose.dtype))
                if rs is not None:
                    rloss, rg = ag.l2_loss(mid, rs[idx])
                    loss += refine_weight * rloss
                    g_mid = g_mid + refine_weight * rg.astype(refine.dtype)
                refine.backward(g_mid.astype(refine.dtype))
                total += loss * len(idx)
                if cfg.learning_rate == 0:
                    continue
                params = refine.param_arrays() + pose.param_arrays()
                grads = refine.grad_arrays() + pose.grad_arrays()
                if opt is not None:
                    opt.step(params, grads)
                else:
                    velocity = ag.sgd_momentum_step(params, grads, cfg.learning_rate, cfg.momentum, velocity)
            losses.append(total / len(xs))
            log.debug("joint epoch %d loss %.6g", epoch + 1, losses[-1])
            if on_epoch is not None:
                on_epoch(epoch + 1, losses[-1])
    finally:
        first.input_grad = saved_flag
    return losses


def refine_tsdf(net, raw):
    if (1,) + raw.values.shape != net.input_shape:
        raise ShapeMismatch(f"volume of resolution {raw.spec.resolution} does not match network input {net.input_shape}")
    out = net.forward(raw.values[None, None])[0, 0]
    return TsdfVolume(raw.spec, raw.origin, np.clip(out.astype(np.float64), -1.0, 1.0))


def predict_joints(net, vol, codec=None, names=None):
    """Regress COM-relative joints and return them in camera-frame mm."""
    codec = codec or PoseTargetCodec()
    width = net.output_shape[1]
    if names is not None and width != 3 * len(names):
        raise ShapeMismatch(f"network emits {width} values but {len(names)} joints were requested")
    if (1,) + vol.values.shape != net.input_shape:
        raise ShapeMismatch(f"volume of resolution {vol.spec.resolution} does not match network input {net.input_shape}")
    out = net.forward(vol.values[None, None])[0]
    return decode_joints(out, vol.origin, codec, names)


def decode_joints(vec, origin, codec, names=None):
    pos = codec.decode(vec) + np.asarray(origin, dtype=np.float64)
    names = names or [f"j{i}" for i in range(len(pos))]
    return JointSet(tuple(names), pos)


def encode_joints(joints, origin, codec):
    return codec.encode(joints.positions - np.asarray(origin, dtype=np.float64))


def with_dropout(spec, fraction):
    """Copy of a pose NetworkSpec with every dropout fraction replaced."""
    layers = tuple(replace(l, options={"fraction": fraction}) if l.kind == "dropout" else l
                   for l in spec.layers)
    return replace(spec, layers=layers)
