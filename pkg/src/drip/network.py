"""Small CNN engine: layer specs, forward/backward passes, SGD training, checkpoints.

Everything runs in float64. Parameters are drawn from numpy's PCG64 bit
generator seeded with the training seed (Glorot-uniform weights, zero
biases); the same generator then drives the per-epoch shuffles, so a
``(spec, dataset order, epochs, learning_rate, seed)`` tuple fully pins the
trained parameters for a given kernel backend.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ParseError, RejectedInputError

CHECKPOINT_MAGIC = b"DRIPMDL\x00"
CHECKPOINT_VERSION = 1
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int = 0  # 0 means "same as window"

    @property
    def step(self):
        return self.stride or self.window


@dataclass(frozen=True)
class Dense:
    out_features: int


_LAYER_TYPES = {"conv2d": Conv2d, "relu": ReLU, "maxpool": MaxPool, "dense": Dense}
_LAYER_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus input shape ``(C, H, W)`` and class count.

    ``tap`` is the index of the conv layer whose raw output feeds Grad-CAM;
    ``None`` picks the last conv layer.
    """

    input_shape: tuple
    layers: tuple
    class_count: int
    tap: int = None
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise RejectedInputError(f"input_shape must be three positive ints, got {self.input_shape}")
        if self.class_count < 1:
            raise RejectedInputError("class_count must be positive")
        if not self.layers:
            raise RejectedInputError("network has no layers")
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _output_shape(layer, shape, i)
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))
        if not isinstance(self.layers[-1], Dense) or shapes[-1] != (self.class_count,):
            raise RejectedInputError("last layer must be dense with class_count outputs")
        convs = [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2d)]
        if not convs:
            raise RejectedInputError("network needs at least one conv2d layer to tap")
        if self.tap is None:
            object.__setattr__(self, "tap", convs[-1])
        elif not (0 <= self.tap < len(self.layers)) or not isinstance(self.layers[self.tap], Conv2d):
            raise RejectedInputError(f"tap index {self.tap} does not refer to a conv2d layer")

    @property
    def tap_shape(self):
        return self.shapes[self.tap]

    def to_dict(self):
        layers = []
        for layer in self.layers:
            entry = {"type": _LAYER_NAMES[type(layer)]}
            entry.update(layer.__dict__)
            layers.append(entry)
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "tap": self.tap,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in _LAYER_TYPES:
                raise RejectedInputError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**entry))
        return cls(tuple(d["input_shape"]), tuple(layers), int(d["class_count"]), d.get("tap"))


def _output_shape(layer, shape, index):
    if isinstance(layer, Conv2d):
        if len(shape) != 3:
            raise RejectedInputError(f"layer {index}: conv2d needs a (C, H, W) input")
        if layer.stride < 1 or layer.padding < 0 or layer.kernel < 1 or layer.out_channels < 1:
            raise RejectedInputError(f"layer {index}: bad conv2d hyper-parameters {layer}")
        c, h, w = shape
        ho = kernels.out_size(h, layer.kernel, layer.stride, layer.padding)
        wo = kernels.out_size(w, layer.kernel, layer.stride, layer.padding)
        if ho < 1 or wo < 1:
            raise RejectedInputError(f"layer {index}: conv2d output would be empty")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise RejectedInputError(f"layer {index}: maxpool needs a (C, H, W) input")
        if layer.window < 1 or layer.step < 1:
            raise RejectedInputError(f"layer {index}: bad maxpool hyper-parameters {layer}")
        c, h, w = shape
        ho = (h - layer.window) // layer.step + 1
        wo = (w - layer.window) // layer.step + 1
        if ho < 1 or wo < 1:
            raise RejectedInputError(f"layer {index}: maxpool window larger than input")
        return (c, ho, wo)
    if isinstance(layer, Dense):
        if layer.out_features < 1:
            raise RejectedInputError(f"layer {index}: dense needs positive out_features")
        return (layer.out_features,)
    raise RejectedInputError(f"layer {index}: unsupported layer {layer!r}")


def default_spec(input_shape, class_count):
    """Two conv blocks and a linear head; the tap is the second conv."""
    return NetworkSpec(
        input_shape,
        (
            Conv2d(6, 3, padding=1),
            ReLU(),
            MaxPool(2),
            Conv2d(8, 3, padding=1),
            ReLU(),
            MaxPool(2),
            Dense(class_count),
        ),
        class_count,
    )


@dataclass(frozen=True)
class TrainedModel:
    spec: NetworkSpec
    parameters: tuple  # per layer: (weight, bias) or ()
    seed: int
    epochs: int

    def __post_init__(self):
        if len(self.parameters) != len(self.spec.layers):
            raise RejectedInputError("parameter count does not match layer count")
        params = []
        for i in range(len(self.spec.layers)):
            p = tuple(np.array(a, dtype=np.float64) for a in self.parameters[i])
            expected = _param_shapes(self.spec, i)
            if tuple(a.shape for a in p) != expected:
                raise RejectedInputError(f"layer {i}: parameter shapes {[a.shape for a in p]} != {expected}")
            for a in p:
                a.flags.writeable = False
            params.append(p)
        object.__setattr__(self, "parameters", tuple(params))

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for p in self.parameters:
            for a in p:
                h.update(a.astype("<f8").tobytes())
        return h.hexdigest()


def _param_shapes(spec, i):
    layer = spec.layers[i]
    in_shape = spec.input_shape if i == 0 else spec.shapes[i - 1]
    if isinstance(layer, Conv2d):
        return ((layer.out_channels, in_shape[0], layer.kernel, layer.kernel), (layer.out_channels,))
    if isinstance(layer, Dense):
        return ((layer.out_features, int(np.prod(in_shape))), (layer.out_features,))
    return ()


def make_rng(seed):
    """PCG64 generator; ``seed`` is an int or a sequence of ints (counter-derived seeds)."""
    if isinstance(seed, (int, np.integer)):
        seed = int(seed)
    else:
        seed = [int(s) for s in seed]
    return np.random.Generator(np.random.PCG64(seed))


def init_parameters(spec, rng):
    params = []
    for i, layer in enumerate(spec.layers):
        shapes = _param_shapes(spec, i)
        if not shapes:
            params.append(())
            continue
        wshape, bshape = shapes
        if isinstance(layer, Conv2d):
            area = layer.kernel * layer.kernel
            fan_in, fan_out = wshape[1] * area, wshape[0] * area
        else:
            fan_out, fan_in = wshape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append((rng.uniform(-limit, limit, size=wshape), np.zeros(bshape)))
    return params


def initialize(spec, seed):
    """Untrained model: the parameters ``train`` starts from for this seed."""
    return TrainedModel(spec, tuple(init_parameters(spec, make_rng(seed))), int(seed), 0)


# ---------------------------------------------------------------- passes


def _check_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise RejectedInputError(f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} != {spec.input_shape}")
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("input contains NaN or Inf")
    return np.ascontiguousarray(x)


def _check_single(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise RejectedInputError(f"input shape {x.shape} != {spec.input_shape}")
    return _check_batch(spec, x[None])


def _run(spec, params, x):
    """Forward pass over a batch; returns logits, tap output and per-layer caches."""
    caches = []
    tap_out = None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            w, b = params[i]
            y = kernels.conv2d_forward(x, w, b, layer.stride, layer.padding)
            caches.append(x)
        elif isinstance(layer, ReLU):
            y = np.maximum(x, 0.0)
            caches.append(x > 0.0)
        elif isinstance(layer, MaxPool):
            y, arg = kernels.maxpool_forward(x, layer.window, layer.step)
            caches.append((x.shape, arg))
        else:
            w, b = params[i]
            flat = x.reshape(x.shape[0], -1)
            y = flat @ w.T + b
            caches.append((x.shape, flat))
        if i == spec.tap:
            tap_out = y
        x = y
    return x, tap_out, caches


def _backward(spec, params, caches, grad, stop=-1):
    """Propagate ``grad`` (w.r.t. the logits) down to the output of layer ``stop``.

    Returns ``(grad_at_stop_output, param_grads)``; ``stop=-1`` runs to the input.
    """
    pgrads = [()] * len(spec.layers)
    for i in range(len(spec.layers) - 1, stop, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Conv2d):
            w, _ = params[i]
            dx, dw, db = kernels.conv2d_backward(cache, w, np.ascontiguousarray(grad), layer.stride, layer.padding)
            pgrads[i] = (dw, db)
            grad = dx
        elif isinstance(layer, ReLU):
            grad = grad * cache
        elif isinstance(layer, MaxPool):
            in_shape, arg = cache
            grad = kernels.maxpool_backward(np.ascontiguousarray(grad), arg, in_shape, layer.window, layer.step)
        else:
            w, _ = params[i]
            in_shape, flat = cache
            pgrads[i] = (grad.T @ flat, grad.sum(axis=0))
            grad = (grad @ w).reshape(in_shape)
    return grad, pgrads


def forward_batch(model, inputs):
    """Pre-softmax logits ``(N, class_count)`` for a batch ``(N, C, H, W)``."""
    x = _check_batch(model.spec, inputs)
    return _run(model.spec, model.parameters, x)[0]


def forward(model, input):
    x = _check_single(model.spec, input)
    return _run(model.spec, model.parameters, x)[0][0]


def forward_with_tap(model, input):
    """Logits plus the raw output of the tap conv layer, shape ``spec.tap_shape``."""
    x = _check_single(model.spec, input)
    logits, tap_out, _ = _run(model.spec, model.parameters, x)
    return logits[0], tap_out[0]


def tap_gradients(model, inputs, class_indices):
    """Batched Grad-CAM raw material.

    For each row ``n`` returns the tap feature maps and d(logit[class_n])/d(maps).
    Samples do not interact in the forward pass, so back-propagating the sum of
    the selected logits yields every per-sample gradient at once.
    """
    spec = model.spec
    x = _check_batch(spec, inputs)
    classes = np.asarray(class_indices, dtype=np.int64).reshape(-1)
    if classes.shape[0] != x.shape[0]:
        raise RejectedInputError("one class index per input is required")
    if classes.size and (classes.min() < 0 or classes.max() >= spec.class_count):
        raise RejectedInputError(f"class index out of range [0, {spec.class_count})")
    logits, tap_out, caches = _run(spec, model.parameters, x)
    seed = np.zeros_like(logits)
    seed[np.arange(x.shape[0]), classes] = 1.0
    grad, _ = _backward(spec, model.parameters, caches, seed, stop=spec.tap)
    return logits, tap_out, grad


def grad_wrt_feature_map(model, input, class_index):
    x = _check_single(model.spec, input)
    if not (0 <= int(class_index) < model.spec.class_count):
        raise RejectedInputError(f"class index {class_index} out of range [0, {model.spec.class_count})")
    return tap_gradients(model, x, [int(class_index)])[2][0]


# ---------------------------------------------------------------- training


def softmax_cross_entropy(logits, labels):
    """Mean loss and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_and_grads(model, inputs, labels):
    """Loss and parameter gradients for one batch (used by training and grad checks)."""
    x = _check_batch(model.spec, inputs)
    logits, _, caches = _run(model.spec, model.parameters, x)
    loss, g = softmax_cross_entropy(logits, labels)
    _, pgrads = _backward(model.spec, model.parameters, caches, g)
    return loss, pgrads


def train(spec, dataset, epochs, learning_rate, seed, batch_size=DEFAULT_BATCH_SIZE, init=None):
    """Mini-batch SGD on softmax cross-entropy.

    Starts from the seeded Glorot init, or from ``init`` (a TrainedModel with
    the same spec) when fine-tuning; the seed still drives the shuffles.
    """
    n = len(dataset)
    if n == 0:
        raise RejectedInputError("cannot train on an empty dataset")
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= spec.class_count:
        raise RejectedInputError("label outside [0, class_count)")
    if epochs < 0 or batch_size < 1:
        raise RejectedInputError("epochs must be >= 0 and batch_size >= 1")
    inputs = _check_batch(spec, dataset.inputs)
    rng = make_rng(seed)
    params = [list(p) for p in init_parameters(spec, rng)]
    if init is not None:
        if init.spec != spec:
            raise RejectedInputError("fine-tuning needs a model with the same spec")
        params = [[np.array(a) for a in p] for p in init.parameters]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, _, caches = _run(spec, params, inputs[idx])
            _, g = softmax_cross_entropy(logits, labels[idx])
            _, pgrads = _backward(spec, params, caches, g)
            for p, dp in zip(params, pgrads):
                for j in range(len(p)):
                    p[j] = p[j] - learning_rate * dp[j]
    return TrainedModel(spec, tuple(tuple(p) for p in params), int(seed), int(epochs))


def accuracy(model, dataset, batch_size=256):
    if len(dataset) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(dataset), batch_size):
        logits = forward_batch(model, dataset.inputs[start:start + batch_size])
        hits += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return hits / len(dataset)


# ---------------------------------------------------------------- checkpoints


def save_model(model, path):
    """Write the checkpoint container described in docs/formats.md."""
    blobs = []
    entries = []
    for i, p in enumerate(model.parameters):
        for name, a in zip(("weight", "bias"), p):
            entries.append({"layer": i, "name": name, "shape": list(a.shape)})
            blobs.append(a.astype("<f8").tobytes())
    header = json.dumps(
        {"spec": model.spec.to_dict(), "seed": model.seed, "epochs": model.epochs, "blobs": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_model(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError("magic", "not a model checkpoint")
    if len(data) < 16:
        raise ParseError("header", "truncated checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ParseError("version", f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError("header", str(exc)) from None
    spec = NetworkSpec.from_dict(header["spec"])
    params = [[] for _ in spec.layers]
    offset = 16 + hlen
    for entry in header["blobs"]:
        count = int(np.prod(entry["shape"]))
        end = offset + 8 * count
        if end > len(data):
            raise ParseError("blobs", "truncated parameter data")
        a = np.frombuffer(data[offset:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        params[entry["layer"]].append(a)
        offset = end
    if offset != len(data):
        raise ParseError("blobs", "trailing bytes after parameter data")
    return TrainedModel(spec, tuple(tuple(p) for p in params), header["seed"], header["epochs"])
