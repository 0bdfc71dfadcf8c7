"""
Minimal numpy neural-network engine.

Layers are described by :class:`LayerSpec` and evaluated by hand-derived
forward/backward kernels. Images use NCHW layout; dense layers take
``(batch, features)``. A :class:`Model` holds one parameter dict per layer
(empty for parameter-free layers) in layer order, which is also the order
used by checkpoints and the optimizer.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, NonFiniteError, StateError

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")

    def to_text(self):
        if self.kind == "dense":
            return f"dense {self.in_features} {self.out_features}"
        if self.kind == "conv2d":
            return (f"conv2d {self.in_channels} {self.out_channels} "
                    f"{self.kernel} {self.stride} {self.padding}")
        if self.kind == "maxpool2d":
            return f"maxpool2d {self.kernel} {self.stride}"
        return self.kind

    @classmethod
    def from_text(cls, text):
        parts = text.split()
        if not parts:
            raise ConfigurationError("empty layer description")
        kind, args = parts[0], parts[1:]
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ConfigurationError(f"bad layer description {text!r}") from None
        expected = {"dense": 2, "conv2d": 5, "maxpool2d": 2, "relu": 0, "flatten": 0}
        if kind not in expected or len(nums) != expected[kind]:
            raise ConfigurationError(f"bad layer description {text!r}")
        if kind == "dense":
            return dense(*nums)
        if kind == "conv2d":
            return conv2d(*nums)
        if kind == "maxpool2d":
            return maxpool2d(*nums)
        return cls(kind)


def dense(in_features, out_features):
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv2d(in_channels, out_channels, kernel, stride=1, padding=0):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def relu():
    return LayerSpec("relu")


def maxpool2d(kernel, stride=None):
    return LayerSpec("maxpool2d", kernel=kernel, stride=kernel if stride is None else stride)


def flatten():
    return LayerSpec("flatten")


def mlp_specs(in_features, hidden, n_classes):
    """Dense/ReLU stack: ``in -> hidden[0] -> ... -> n_classes``."""
    specs, width = [], in_features
    for h in hidden:
        specs += [dense(width, h), relu()]
        width = h
    specs.append(dense(width, n_classes))
    return specs


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(specs: Sequence[LayerSpec], input_shape, complete=True) -> List[Tuple[int, ...]]:
    """Validate a layer stack and return the per-sample output shape of each layer.

    Raises :class:`ConfigurationError` naming the first incompatible layer.
    ``complete=False`` accepts a partial stack that does not yet end in logits.
    """
    shape = tuple(int(s) for s in input_shape)
    if not shape or any(s <= 0 for s in shape):
        raise ConfigurationError(f"invalid input shape {shape}")
    shapes = [] if specs or complete else [shape]
    for i, spec in enumerate(specs):
        where = f"layer {i} ({spec.to_text()})"
        if spec.kind == "dense":
            if len(shape) != 1 or shape[0] != spec.in_features:
                raise ConfigurationError(f"{where}: expects ({spec.in_features},) input, got {shape}")
            if spec.out_features <= 0:
                raise ConfigurationError(f"{where}: out_features must be positive")
            shape = (spec.out_features,)
        elif spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ConfigurationError(f"{where}: expects {spec.in_channels} input channels, got {shape}")
            if spec.kernel <= 0 or spec.stride <= 0 or spec.padding < 0 or spec.out_channels <= 0:
                raise ConfigurationError(f"{where}: invalid conv geometry")
            h = _conv_out(shape[1], spec.kernel, spec.stride, spec.padding)
            w = _conv_out(shape[2], spec.kernel, spec.stride, spec.padding)
            if h <= 0 or w <= 0:
                raise ConfigurationError(f"{where}: kernel larger than padded input {shape}")
            shape = (spec.out_channels, h, w)
        elif spec.kind == "maxpool2d":
            if len(shape) != 3:
                raise ConfigurationError(f"{where}: expects (C, H, W) input, got {shape}")
            if spec.kernel <= 0 or spec.stride <= 0:
                raise ConfigurationError(f"{where}: invalid pooling geometry")
            h = _conv_out(shape[1], spec.kernel, spec.stride, 0)
            w = _conv_out(shape[2], spec.kernel, spec.stride, 0)
            if h <= 0 or w <= 0:
                raise ConfigurationError(f"{where}: window larger than input {shape}")
            shape = (shape[0], h, w)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    if complete and (not shapes or len(shapes[-1]) != 1):
        raise ConfigurationError("model must end in a (num_classes,) output")
    return shapes


class Model:
    """Layer stack plus parameters.

    ``depth_tag`` is the capacity label used to order expert pools.
    """

    def __init__(self, layers, params, input_shape, depth_tag=0, seed=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        self.params = params
        self.depth_tag = int(depth_tag)
        self.seed = seed
        self._cache = None
        if len(params) != len(self.layers):
            raise ConfigurationError("one parameter dict per layer required")
        for i, (spec, p) in enumerate(zip(self.layers, params)):
            for name, shape in _param_shapes(spec).items():
                if name not in p or p[name].shape != shape:
                    raise ConfigurationError(f"layer {i}: parameter {name!r} must have shape {shape}")

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def dtype(self):
        for p in self.params:
            for v in p.values():
                return v.dtype
        return np.dtype(np.float32)

    def parameters(self):
        """Yield ``(layer_index, name, array)`` in canonical order."""
        for i, p in enumerate(self.params):
            for name in ("W", "b"):
                if name in p:
                    yield i, name, p[name]

    def n_parameters(self):
        return sum(a.size for _, _, a in self.parameters())

    def copy(self):
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return Model(self.layers, params, self.input_shape, self.depth_tag, self.seed)

    def checksum(self):
        """Content hash of the parameters (used to audit expert freezing)."""
        import hashlib
        h = hashlib.sha256()
        for _, _, a in self.parameters():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"Model(depth_tag={self.depth_tag}, layers={len(self.layers)}, params={self.n_parameters()})"


def _param_shapes(spec):
    if spec.kind == "dense":
        return {"W": (spec.in_features, spec.out_features), "b": (spec.out_features,)}
    if spec.kind == "conv2d":
        return {"W": (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
                "b": (spec.out_channels,)}
    return {}


def init_weights(specs, seed, input_shape, depth_tag=0, dtype=np.float32):
    """Build a model with fan-in scaled uniform weights and zero biases.

    Weights are drawn from ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``.
    """
    infer_shapes(specs, input_shape)
    gen = np.random.default_rng(seed)
    params = []
    for spec in specs:
        p = {}
        shapes = _param_shapes(spec)
        if shapes:
            w_shape = shapes["W"]
            fan_in = w_shape[0] if spec.kind == "dense" else int(np.prod(w_shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p["W"] = gen.uniform(-bound, bound, size=w_shape).astype(dtype)
            p["b"] = np.zeros(shapes["b"], dtype=dtype)
        params.append(p)
    return Model(specs, params, input_shape, depth_tag=depth_tag, seed=seed)


# -- layer kernels -----------------------------------------------------------

def _conv_windows(xp, k, s):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]  # (N, C, Ho, Wo, k, k)


def _conv_forward(spec, p, x):
    pad = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _conv_windows(xp, spec.kernel, spec.stride)
    out = np.tensordot(win, p["W"], axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2) + p["b"][None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, xp.shape, win)


def _conv_backward(spec, p, cache, g):
    x_shape, xp_shape, win = cache
    k, s, pad = spec.kernel, spec.stride, spec.padding
    dW = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    db = g.sum(axis=(0, 2, 3))
    # (N, O, Ho, Wo) x (O, C, k, k) -> (N, Ho, Wo, C, k, k)
    dwin = np.tensordot(g.transpose(0, 2, 3, 1), p["W"], axes=([3], [0]))
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]] if pad else dxp
    return dx, {"W": dW, "b": db}


def _pool_forward(spec, x):
    k, s = spec.kernel, spec.stride
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(spec, cache, g):
    x_shape, arg = cache
    k, s = spec.kernel, spec.stride
    dx = np.zeros(x_shape, dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += g * (arg == i * k + j)
    return dx


def _layer_forward(spec, p, x):
    if spec.kind == "dense":
        return x @ p["W"] + p["b"], x
    if spec.kind == "relu":
        return np.maximum(x, 0), x > 0
    if spec.kind == "conv2d":
        return _conv_forward(spec, p, x)
    if spec.kind == "maxpool2d":
        return _pool_forward(spec, x)
    return x.reshape(x.shape[0], -1), x.shape


def _layer_backward(spec, p, cache, g):
    if spec.kind == "dense":
        return g @ p["W"].T, {"W": cache.T @ g, "b": g.sum(axis=0)}
    if spec.kind == "relu":
        return g * cache, {}
    if spec.kind == "conv2d":
        return _conv_backward(spec, p, cache, g)
    if spec.kind == "maxpool2d":
        return _pool_backward(spec, cache, g), {}
    return g.reshape(cache), {}


def forward(model: Model, batch, cache=True):
    """Return logits ``(batch, num_classes)``.

    With ``cache=True`` the intermediate activations are kept on the model for
    a following :func:`backward`; frozen experts are evaluated with
    ``cache=False`` so they are never mutated.
    """
    x = np.asarray(batch, dtype=model.dtype)
    if x.shape[1:] != model.input_shape:
        raise ConfigurationError(
            f"layer 0 ({model.layers[0].to_text()}): batch shape {x.shape[1:]} "
            f"does not match model input {model.input_shape}")
    caches = []
    for spec, p in zip(model.layers, model.params):
        x, c = _layer_forward(spec, p, x)
        caches.append(c)
    model._cache = caches if cache else None
    return x


def backward(model: Model, loss_grad):
    """Gradients of the loss w.r.t. every parameter, as a list of dicts.

    Parameters are not modified.
    """
    if model._cache is None:
        raise StateError("backward called before forward (or forward ran with cache=False)")
    g = np.asarray(loss_grad, dtype=model.dtype)
    grads: List[dict] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        g, grads[i] = _layer_backward(model.layers[i], model.params[i], model._cache[i], g)
    return grads


def predict_logits(model: Model, X, batch_size=1024):
    """Logits for a whole array, evaluated in chunks without caching."""
    X = np.asarray(X)
    out = [forward(model, X[i:i + batch_size], cache=False) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=model.dtype)


# -- optimisation --------------------------------------------------------------

@dataclass
class OptimizerState:
    buffers: List[dict]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True

    @classmethod
    def for_model(cls, model, momentum=0.9, weight_decay=1e-4, nesterov=True):
        buffers = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
        return cls(buffers, momentum, weight_decay, nesterov)


def sgd_step(model: Model, grads, opt: OptimizerState, lr):
    """One SGD update with L2 weight decay and (Nesterov) momentum, in place.

    Per parameter ``p`` with gradient ``g``::

        g   = g + weight_decay * p
        buf = momentum * buf + g
        d   = g + momentum * buf   if nesterov else buf
        p  -= lr * d
    """
    for i, (p, g) in enumerate(zip(model.params, grads)):
        for name, gv in g.items():
            if not np.all(np.isfinite(gv)):
                raise NonFiniteError(f"non-finite gradient in layer {i} ({model.layers[i].kind}) {name}")
            if gv.shape != p[name].shape:
                raise ConfigurationError(f"gradient shape {gv.shape} != parameter shape {p[name].shape}")
    dtype = model.dtype.type
    mu, wd, lr = dtype(opt.momentum), dtype(opt.weight_decay), dtype(lr)
    for p, g, buf in zip(model.params, grads, opt.buffers):
        for name, gv in g.items():
            param = p[name]
            d = gv + wd * param if opt.weight_decay else gv.copy()
            b = buf[name]
            b *= mu
            b += d
            if opt.nesterov:
                d = d + mu * b
            else:
                d = b
            param -= lr * d


@dataclass(frozen=True)
class LRSchedule:
    initial: float = 0.1
    milestones: Tuple[int, ...] = (12, 36, 48)
    factor: float = 0.1

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError(f"milestones must be strictly increasing: {ms}")
        object.__setattr__(self, "milestones", ms)


def lr_at(schedule: LRSchedule, epoch):
    """Step schedule: ``initial * factor ** (number of milestones <= epoch)``."""
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial * schedule.factor ** passed
