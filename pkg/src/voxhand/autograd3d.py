"""Forward/backward kernels for the volumetric networks.

Tensors are plain numpy arrays laid out (batch, channel, depth, height, width),
width fastest. Every layer caches what its backward pass needs in a
``LayerTape`` on the forward call; ``layer_backward`` consumes it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidFraction, ShapeMismatch, TapeMismatch

AXES = ("depth", "height", "width")


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeMismatch(f"expected 3 extents, got {v!r}")
    return t


def _check_5d(x, what="input"):
    if x.ndim != 5:
        raise ShapeMismatch(f"{what} must be 5-D (batch, channel, depth, height, width), got shape {x.shape}")


def conv_output_extent(n, kernel, stride, pad):
    return (n + 2 * pad - kernel) // stride + 1


# unfolded (im2col) matrices larger than this many elements per sample fall back
# to accumulating one kernel offset at a time
COL_BUDGET = 1 << 24


def _im2col(xp, kernel, stride, out_ext):
    """Unfold padded ``xp`` (n, c, ...) into (c*kd*kh*kw, n*do*ho*wo), one kernel offset per row block."""
    n, c = xp.shape[:2]
    do, ho, wo = out_ext
    sd, sh, sw = stride
    cols = np.empty((c,) + tuple(kernel) + (n, do, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            for k in range(kernel[2]):
                cols[:, i, j, k] = xt[:, :, i:i + sd * (do - 1) + 1:sd, j:j + sh * (ho - 1) + 1:sh,
                                      k:k + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * int(np.prod(kernel)), -1)


def _batch_chunks(n, per_sample):
    step = max(1, COL_BUDGET // max(per_sample, 1))
    return [slice(a, min(a + step, n)) for a in range(0, n, step)]


# --------------------------------------------------------------------------- conv3d

def conv3d_forward(x, w, b, stride=1, padding=0):
    """Cross-correlation of ``x`` with ``w`` (out, in, kd, kh, kw) plus bias."""
    _check_5d(x)
    stride, padding = _triple(stride), _triple(padding)
    n, c = x.shape[:2]
    o, ci = w.shape[:2]
    kernel = w.shape[2:]
    if c != ci:
        raise ShapeMismatch(f"channel axis: input has {c} channels, weights expect {ci}")
    if b.shape != (o,):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {o} output channels")
    out_ext = []
    for ax, n_in, k, s, p in zip(AXES, x.shape[2:], kernel, stride, padding):
        e = conv_output_extent(n_in, k, s, p)
        if e < 1:
            raise ShapeMismatch(f"{ax} axis: extent {n_in} too small for kernel {k} with padding {p}")
        out_ext.append(e)
    do, ho, wo = out_ext
    per_sample = c * int(np.prod(kernel)) * do * ho * wo
    if per_sample <= COL_BUDGET:
        xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
        wm = w.reshape(o, -1)
        y = np.empty((n, o, do, ho, wo), dtype=np.result_type(x, w))
        for sl in _batch_chunks(n, per_sample):
            part = wm @ _im2col(xp[sl], kernel, stride, out_ext)
            part += b[:, None]
            y[sl] = part.reshape(o, -1, do, ho, wo).transpose(1, 0, 2, 3, 4)
        return y

    xc = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding)).transpose(1, 0, 2, 3, 4)
    out = np.zeros((o, n * do * ho * wo), dtype=np.result_type(x, w))
    sd, sh, sw = stride
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            for k in range(kernel[2]):
                patch = xc[:, :, i:i + sd * (do - 1) + 1:sd, j:j + sh * (ho - 1) + 1:sh,
                           k:k + sw * (wo - 1) + 1:sw].reshape(c, -1)
                out += w[:, :, i, j, k] @ patch
    y = out.reshape(o, n, do, ho, wo).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(y + b.reshape(1, o, 1, 1, 1))


def conv3d_backward(x, w, g, stride=1, padding=0, input_grad=True):
    """Gradients (input, weight, bias) of conv3d_forward given upstream ``g``.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    stride, padding = _triple(stride), _triple(padding)
    n, c = x.shape[:2]
    o = w.shape[0]
    kernel = w.shape[2:]
    do, ho, wo = g.shape[2:]
    sd, sh, sw = stride
    per_sample = c * int(np.prod(kernel)) * do * ho * wo
    if per_sample <= COL_BUDGET and stride == (1, 1, 1) and all(p < k for p, k in zip(padding, kernel)):
        xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
        gw = np.zeros((o, w[0].size), dtype=np.result_type(w, g))
        for sl in _batch_chunks(n, per_sample):
            gc = g[sl].transpose(1, 0, 2, 3, 4).reshape(o, -1)
            gw += gc @ _im2col(xp[sl], kernel, stride, (do, ho, wo)).T
        gw = gw.reshape(w.shape)
        if not input_grad:
            return None, gw, g.sum(axis=(0, 2, 3, 4))
        # input gradient of a unit-stride correlation = full correlation with the flipped kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx = conv3d_forward(g, wf, np.zeros(c, dtype=wf.dtype), 1, tuple(k - 1 - p for p, k in zip(padding, kernel)))
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    xc = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding)).transpose(1, 0, 2, 3, 4)
    gxc = np.zeros(xc.shape, dtype=np.result_type(x, g))
    gc = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    gw = np.zeros(w.shape, dtype=np.result_type(w, g))
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            for k in range(kernel[2]):
                sl = (slice(None), slice(None), slice(i, i + sd * (do - 1) + 1, sd),
                      slice(j, j + sh * (ho - 1) + 1, sh), slice(k, k + sw * (wo - 1) + 1, sw))
                patch = xc[sl].reshape(c, -1)
                gw[:, :, i, j, k] = gc @ patch.T
                gxc[sl] += (w[:, :, i, j, k].T @ gc).reshape(c, n, do, ho, wo)
    pd, ph, pw = padding
    dp, hp, wp = xc.shape[2:]
    gx = gxc[:, :, pd:dp - pd, ph:hp - ph, pw:wp - pw].transpose(1, 0, 2, 3, 4)
    gb = g.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------- pooling

def maxpool3d_forward(x, kernel=2, stride=2):
    """Window maxima; returns (output, argmax) with argmax the flat index within each window.

    Ties resolve to the lowest flat index.
    """
    _check_5d(x)
    kernel, stride = _triple(kernel), _triple(stride)
    for ax, n_in, k, s in zip(AXES, x.shape[2:], kernel, stride):
        if n_in < k or (n_in - k) % s:
            raise ShapeMismatch(f"{ax} axis: extent {n_in} not tiled by kernel {k} stride {s}")
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]]
    flat = win.reshape(win.shape[:5] + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool3d_backward(g, arg, input_shape, kernel=2, stride=2):
    kernel, stride = _triple(kernel), _triple(stride)
    n, c, d, h, w = input_shape
    do, ho, wo = g.shape[2:]
    a, bb, cc = np.unravel_index(arg, kernel)
    zd = np.arange(do).reshape(1, 1, do, 1, 1) * stride[0] + a
    zh = np.arange(ho).reshape(1, 1, 1, ho, 1) * stride[1] + bb
    zw = np.arange(wo).reshape(1, 1, 1, 1, wo) * stride[2] + cc
    nc = np.arange(n * c).reshape(n, c, 1, 1, 1)
    flat_idx = ((nc * d + zd) * h + zh) * w + zw
    gx = np.bincount(flat_idx.ravel(), weights=g.ravel(), minlength=n * c * d * h * w)
    return gx.reshape(input_shape).astype(g.dtype, copy=False)


def uppool3d_forward(x, factor=2):
    """Nearest-neighbour up-sampling: every voxel fills a ``factor``-shaped block."""
    _check_5d(x)
    factor = _triple(factor)
    if min(factor) < 1:
        raise ShapeMismatch(f"up-pooling factor must be >= 1 per axis, got {factor}")
    y = x
    for axis, f in zip((2, 3, 4), factor):
        if f > 1:
            y = np.repeat(y, f, axis=axis)
    return np.ascontiguousarray(y)


def uppool3d_backward(g, factor=2):
    fd, fh, fw = _triple(factor)
    n, c, d, h, w = g.shape
    return g.reshape(n, c, d // fd, fd, h // fh, fh, w // fw, fw).sum(axis=(3, 5, 7))


# --------------------------------------------------------------------------- misc layers

def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"cannot concatenate shapes {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(g, channels_a):
    return g[:, :channels_a], g[:, channels_a:]


def dense_forward(x, w, b):
    """Affine map y = x @ w + b for x of shape (batch, features), w (features, outputs)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense input {x.shape} incompatible with weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
    return x @ w + b


def dense_backward(x, w, g):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def tanh(x):
    return np.tanh(x)


def activation_forward(x, kind):
    kind = kind.lower()
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout_mask(shape, fraction, rng):
    if not 0 <= fraction < 1:
        raise InvalidFraction(f"dropout fraction must be in [0, 1), got {fraction}")
    if fraction == 0:
        return np.ones(shape, dtype=bool)
    return rng.random(shape) >= fraction


def dropout_forward(x, fraction, mode="train", rng_seed=None):
    """Inverted dropout. Returns (output, mask); the mask is None in infer mode."""
    if not 0 <= fraction < 1:
        raise InvalidFraction(f"dropout fraction must be in [0, 1), got {fraction}")
    if mode == "infer" or fraction == 0:
        return x.copy(), None
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = dropout_mask(x.shape, fraction, rng)
    return x * mask / (1.0 - fraction), mask


def l2_loss(pred, target):
    """Mean over the batch of the squared Euclidean distance; returns (loss, d loss / d pred)."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


# --------------------------------------------------------------------------- layer objects

@dataclass
class LayerTape:
    input_shape: tuple
    output_shape: tuple
    cache: dict = field(default_factory=dict)


class Layer:
    """Base layer. ``params`` maps tensor names to arrays, ``grads`` mirrors it after backward."""

    kind = "layer"
    param_names = ()

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = {}
        self.grads = {}
        self.tape = None

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x, train=False):
        y, cache = self._forward(x, train)
        self.tape = LayerTape(tuple(x.shape), tuple(y.shape), cache)
        return y

    def backward(self, g):
        gx, grads = layer_backward(self, self.tape, g)
        self.grads = grads
        return gx

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv3d(Layer):
    kind = "conv3d"
    param_names = ("weight", "bias")
    input_grad = True  # a network's first layer turns this off: nothing consumes it

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=1, name=None):
        super().__init__(name)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _triple(kernel)
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeMismatch(f"invalid conv geometry kernel={self.kernel} stride={self.stride} padding={self.padding}")
        self.params = {
            "weight": np.zeros((self.out_channels, self.in_channels) + self.kernel),
            "bias": np.zeros(self.out_channels),
        }

    def init(self, rng, gain=2.0):
        fan_in = self.in_channels * int(np.prod(self.kernel))
        self.params["weight"] = rng.normal(0.0, np.sqrt(gain / fan_in), self.params["weight"].shape)
        self.params["bias"] = np.zeros(self.out_channels)

    def output_shape(self, s):
        if len(s) != 5 or s[1] != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected {self.in_channels} input channels, got shape {tuple(s)}")
        ext = tuple(conv_output_extent(n, k, st, p)
                    for n, k, st, p in zip(s[2:], self.kernel, self.stride, self.padding))
        if min(ext) < 1:
            raise ShapeMismatch(f"{self.name}: spatial extents {tuple(s[2:])} too small")
        return (s[0], self.out_channels) + ext

    def _forward(self, x, train):
        y = conv3d_forward(x, self.params["weight"], self.params["bias"], self.stride, self.padding)
        return y, {"x": x}


class MaxPool3d(Layer):
    kind = "maxpool3d"

    def __init__(self, kernel=2, stride=2, name=None):
        super().__init__(name)
        self.kernel = _triple(kernel)
        self.stride = _triple(stride)

    def output_shape(self, s):
        for ax, n, k, st in zip(AXES, s[2:], self.kernel, self.stride):
            if n < k or (n - k) % st:
                raise ShapeMismatch(f"{self.name}: {ax} extent {n} not tiled by kernel {k} stride {st}")
        return tuple(s[:2]) + tuple((n - k) // st + 1 for n, k, st in zip(s[2:], self.kernel, self.stride))

    def _forward(self, x, train):
        y, arg = maxpool3d_forward(x, self.kernel, self.stride)
        return y, {"argmax": arg}


class UpPool3d(Layer):
    kind = "uppool3d"

    def __init__(self, factor=2, name=None):
        super().__init__(name)
        self.factor = _triple(factor)

    def output_shape(self, s):
        return tuple(s[:2]) + tuple(n * f for n, f in zip(s[2:], self.factor))

    def _forward(self, x, train):
        return uppool3d_forward(x, self.factor), {}


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features, name=None):
        super().__init__(name)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params = {"weight": np.zeros((self.in_features, self.out_features)),
                       "bias": np.zeros(self.out_features)}

    def init(self, rng, gain=2.0):
        self.params["weight"] = rng.normal(0.0, np.sqrt(gain / self.in_features), self.params["weight"].shape)
        self.params["bias"] = np.zeros(self.out_features)

    def output_shape(self, s):
        if len(s) != 2 or s[1] != self.in_features:
            raise ShapeMismatch(f"{self.name}: expected (batch, {self.in_features}), got {tuple(s)}")
        return (s[0], self.out_features)

    def _forward(self, x, train):
        return dense_forward(x, self.params["weight"], self.params["bias"]), {"x": x}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, s):
        return (s[0], int(np.prod(s[1:])))

    def _forward(self, x, train):
        return x.reshape(x.shape[0], -1), {}


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x, train):
        return relu(x), {"positive": x > 0}


class Tanh(Layer):
    kind = "tanh"

    def _forward(self, x, train):
        y = tanh(x)
        return y, {"y": y}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, fraction=0.5, seed=0, name=None):
        super().__init__(name)
        if not 0 <= fraction < 1:
            raise InvalidFraction(f"dropout fraction must be in [0, 1), got {fraction}")
        self.fraction = float(fraction)
        self.reseed(seed)

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def _forward(self, x, train):
        if not train or self.fraction == 0:
            return x.copy(), {"mask": None}
        mask = dropout_mask(x.shape, self.fraction, self.rng)
        return x * mask / (1.0 - self.fraction), {"mask": mask}


class Concat(Layer):
    """Channel concatenation of the running tensor (first) with a saved skip tensor."""

    kind = "concat"

    def __init__(self, source, name=None):
        super().__init__(name)
        self.source = source

    def forward(self, x, skip, train=False):
        y = concat_channels(x, skip)
        self.tape = LayerTape(tuple(x.shape), tuple(y.shape), {"channels_a": x.shape[1]})
        return y


def layer_backward(layer, tape, g):
    """Input gradient and parameter gradients of ``layer`` for upstream gradient ``g``.

    For Concat the input gradient is the pair (running-branch grad, skip grad).
    """
    if tape is None:
        raise TapeMismatch(f"{layer.name}: backward called without a recorded forward pass")
    if tuple(g.shape) != tape.output_shape:
        raise TapeMismatch(f"{layer.name}: upstream gradient shape {g.shape} != recorded output {tape.output_shape}")
    c = tape.cache
    if isinstance(layer, Conv3d):
        gx, gw, gb = conv3d_backward(c["x"], layer.params["weight"], g, layer.stride, layer.padding,
                                     layer.input_grad)
        return gx, {"weight": gw, "bias": gb}
    if isinstance(layer, MaxPool3d):
        return maxpool3d_backward(g, c["argmax"], tape.input_shape, layer.kernel, layer.stride), {}
    if isinstance(layer, UpPool3d):
        return uppool3d_backward(g, layer.factor), {}
    if isinstance(layer, Dense):
        gx, gw, gb = dense_backward(c["x"], layer.params["weight"], g)
        return gx, {"weight": gw, "bias": gb}
    if isinstance(layer, Flatten):
        return g.reshape(tape.input_shape), {}
    if isinstance(layer, ReLU):
        return g * c["positive"], {}
    if isinstance(layer, Tanh):
        return g * (1.0 - c["y"] ** 2), {}
    if isinstance(layer, Dropout):
        if c["mask"] is None:
            return g.copy(), {}
        return g * c["mask"] / (1.0 - layer.fraction), {}
    if isinstance(layer, Concat):
        return split_channels(g, c["channels_a"]), {}
    raise TypeError(f"no backward rule for {type(layer).__name__}")


# --------------------------------------------------------------------------- optimizers

def sgd_momentum_step(params, grads, lr, momentum=0.9, state=None):
    """In-place momentum SGD: v <- momentum * v + g; p <- p - lr * v. Returns the velocities."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameter tensors but {len(grads)} gradients")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeMismatch(f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape} disagree")
        v *= momentum
        v += g
        p -= lr * v
    return state


class Adam:
    """Adam update, selectable in TrainConfig as optimizer='adam'."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        a = self.lr * np.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= a * m / (np.sqrt(v) + self.eps)
