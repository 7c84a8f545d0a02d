"""Bias-free MLP / conv-bottom networks with full forward traces and per-layer gradients.

A model is a flat list of weighted layers. Every layer except the last is
followed by a ReLU; the last is the activation-free classifier. Layers before
``bottom_start`` form the optional feature extractor (FC or Conv blocks); the
bottom stack is one FC-ReLU or Conv-ReLU stack, a run of FC-ReLU stacks, and
the final FC. Layer indices are 0-based positions in ``Model.layers``.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn

POSITIVE_UNIFORM = "positive_uniform"
KAIMING_UNIFORM = "kaiming_uniform"
INIT_SCHEMES = (POSITIVE_UNIFORM, KAIMING_UNIFORM)

POSITIVE_LOW, POSITIVE_HIGH = 0.01, 0.2


class SpecError(ValueError):
    """Model specification violates the bottom-stack structure."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``input_shape`` is ``(D,)`` for vector inputs or ``(C, H, W)`` for images.
    ``extractor`` lists the layers applied before the bottom stack: an int is an
    FC-ReLU of that width, a triple ``(out_channels, kernel_h, kernel_w)`` is a
    Conv-ReLU block. With ``first_stack="conv"`` the bottom
    starts with a Conv-ReLU whose kernel spans the whole remaining spatial
    extent (1x1 output) and ``conv_channels`` kernels; otherwise ``hidden[0]``
    is the width of the first FC-ReLU stack.
    """

    input_shape: tuple
    hidden: tuple
    n_classes: int
    first_stack: str = "fc"
    conv_channels: int = 0
    extractor: tuple = ()

    @classmethod
    def mlp(cls, input_dim, hidden, n_classes, extractor=()):
        return cls(
            input_shape=(int(input_dim),),
            hidden=tuple(hidden),
            n_classes=n_classes,
            extractor=tuple(extractor),
        )

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
            "first_stack": self.first_stack,
            "conv_channels": self.conv_channels,
            "extractor": [e if isinstance(e, int) else list(e) for e in self.extractor],
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {"input_shape", "hidden", "n_classes", "first_stack", "conv_channels", "extractor"}
        unknown = set(d) - allowed
        if unknown:
            raise SpecError(f"unknown model keys: {sorted(unknown)}")
        return cls(
            input_shape=tuple(d["input_shape"]),
            hidden=tuple(d.get("hidden", ())),
            n_classes=int(d["n_classes"]),
            first_stack=d.get("first_stack", "fc"),
            conv_channels=int(d.get("conv_channels", 0)),
            extractor=tuple(
                int(e) if isinstance(e, int) else tuple(e) for e in d.get("extractor", ())
            ),
        )

    def layer_shapes(self):
        """Weight shapes of every layer and the index where the bottom stack starts."""
        if self.n_classes < 2:
            raise SpecError("n_classes must be at least 2")
        if self.first_stack not in ("fc", "conv"):
            raise SpecError(f"first_stack must be 'fc' or 'conv', got {self.first_stack!r}")
        if any(int(s) < 1 for s in self.input_shape):
            raise SpecError(f"invalid input shape {self.input_shape}")
        shapes = []
        shape = tuple(int(s) for s in self.input_shape)
        for entry in self.extractor:
            if isinstance(entry, (int, np.integer)):
                shapes.append((int(entry), int(np.prod(shape))))
                shape = (int(entry),)
                continue
            cout, kh, kw = entry
            if len(shape) != 3:
                raise SpecError("conv extractor needs (C, H, W) input")
            c, h, w = shape
            if kh > h or kw > w:
                raise SpecError(f"extractor kernel {kh}x{kw} larger than feature map {h}x{w}")
            shapes.append((cout, c, kh, kw))
            shape = (cout, h - kh + 1, w - kw + 1)
        bottom_start = len(shapes)

        widths = list(self.hidden)
        if self.first_stack == "conv":
            if len(shape) != 3:
                raise SpecError("conv first stack needs (C, H, W) features")
            if self.conv_channels < 1:
                raise SpecError("conv first stack needs conv_channels >= 1")
            c, h, w = shape
            shapes.append((self.conv_channels, c, h, w))
            fan_in = self.conv_channels
        else:
            if not widths:
                raise SpecError("fc first stack needs at least one hidden width")
            fan_in = int(np.prod(shape))
            shapes.append((widths[0], fan_in))
            fan_in = widths.pop(0)
        for width in widths + [self.n_classes]:
            if width > fan_in:
                raise SpecError(
                    f"bridge layer {width}x{fan_in} widens; out_features must be <= in_features"
                )
            shapes.append((width, fan_in))
            fan_in = width
        return shapes, bottom_start


@dataclass(frozen=True)
class Layer:
    kind: str  # "fc" or "conv"
    weight: np.ndarray
    relu: bool


@dataclass
class Model:
    spec: ModelSpec
    layers: list
    bottom_start: int
    init: str = POSITIVE_UNIFORM
    seed: Optional[int] = None

    @property
    def n_classes(self):
        return self.spec.n_classes

    @property
    def depth(self):
        return len(self.layers)

    @property
    def final_index(self):
        return len(self.layers) - 1

    @property
    def penultimate_index(self):
        return len(self.layers) - 2

    def weight(self, index):
        return self.layers[index].weight

    def weights(self):
        return [layer.weight for layer in self.layers]


def _kaiming_uniform(rng, shape):
    # PyTorch default for Linear/Conv2d: kaiming_uniform_(a=sqrt(5)) -> bound 1/sqrt(fan_in)
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(spec, init=POSITIVE_UNIFORM, seed=0):
    """Materialize weights. Bottom layers follow ``init``; extractor layers are Kaiming-uniform."""
    if init not in INIT_SCHEMES:
        raise SpecError(f"unknown init scheme {init!r}")
    shapes, bottom_start = spec.layer_shapes()
    rng = np.random.default_rng(seed)
    layers = []
    for i, shape in enumerate(shapes):
        if i >= bottom_start and init == POSITIVE_UNIFORM:
            w = rng.uniform(POSITIVE_LOW, POSITIVE_HIGH, size=shape)
        else:
            w = _kaiming_uniform(rng, shape)
        kind = "conv" if len(shape) == 4 else "fc"
        layers.append(Layer(kind=kind, weight=w, relu=i < len(shapes) - 1))
    return Model(spec=spec, layers=layers, bottom_start=bottom_start, init=init, seed=seed)


def model_from_weights(spec, weights, init=POSITIVE_UNIFORM):
    """Wrap explicit weight arrays (used by tests and hand-built oracles)."""
    shapes, bottom_start = spec.layer_shapes()
    if len(weights) != len(shapes):
        raise SpecError(f"expected {len(shapes)} weight arrays, got {len(weights)}")
    layers = []
    for i, (shape, w) in enumerate(zip(shapes, weights)):
        w = np.array(w, dtype=np.float64)
        if w.shape != tuple(shape):
            raise SpecError(f"layer {i}: weight shape {w.shape} != {tuple(shape)}")
        if not np.all(np.isfinite(w)):
            raise SpecError(f"layer {i}: non-finite weights")
        layers.append(Layer(kind="conv" if w.ndim == 4 else "fc", weight=w, relu=i < len(shapes) - 1))
    return Model(spec=spec, layers=layers, bottom_start=bottom_start, init=init)


@dataclass
class ForwardTrace:
    """Per-layer values for a batch; index ``l`` matches ``Model.layers[l]``.

    ``inputs[l]`` is the layer input as the layer consumes it (flattened for FC),
    ``z[l]`` the pre-activation and ``a[l]`` the post-ReLU output (equal to
    ``z[l]`` for the final layer).
    """

    inputs: list
    z: list
    a: list
    probs: np.ndarray

    @property
    def logits(self):
        return self.z[-1]

    @property
    def batch_size(self):
        return self.probs.shape[0]


@dataclass
class Gradients:
    """Batch-averaged weight gradients plus per-sample intermediate gradients."""

    weight: list
    grad_z: list
    grad_a: list
    grad_input: list = field(default_factory=list)

    @property
    def logits(self):
        """Per-sample gradient w.r.t. the output logits, shape (B, C)."""
        return self.grad_z[-1]


def forward(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    expected = tuple(model.spec.input_shape)
    if x.shape[1:] != expected:
        raise nn.DimensionError(f"input batch shape {x.shape[1:]} != model input {expected}")
    inputs, zs, acts = [], [], []
    for layer in model.layers:
        if layer.kind == "fc":
            x = x.reshape(x.shape[0], -1)
            z = nn.batch_fc_forward(layer.weight, x)
        else:
            z = nn.batch_conv_forward(layer.weight, x)
        inputs.append(x)
        zs.append(z)
        x = nn.relu_forward(z) if layer.relu else z
        acts.append(x)
    return ForwardTrace(inputs=inputs, z=zs, a=acts, probs=nn.softmax(zs[-1]))


def backward(model, trace, labels):
    """Gradients of the mean cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (trace.batch_size,):
        raise nn.DimensionError(f"labels shape {labels.shape} != ({trace.batch_size},)")
    grad = trace.probs - nn.one_hot(labels, model.n_classes)  # per-sample dL/dz^[L]
    n = len(model.layers)
    weight, grad_z, grad_a, grad_in = [None] * n, [None] * n, [None] * n, [None] * n
    for l in range(n - 1, -1, -1):
        layer = model.layers[l]
        if layer.relu:
            grad_a[l] = grad
            grad = nn.relu_backward(trace.z[l], grad)
        else:
            grad_a[l] = grad
        grad_z[l] = grad
        x = trace.inputs[l]
        if layer.kind == "fc":
            weight[l], grad_x = nn.batch_fc_backward(layer.weight, x, grad)
        else:
            weight[l], grad_x = nn.batch_conv_backward(layer.weight, x, grad)
        grad_in[l] = grad_x
        if l > 0:
            grad = grad_x.reshape(trace.a[l - 1].shape)
    return Gradients(weight=weight, grad_z=grad_z, grad_a=grad_a, grad_input=grad_in)


def per_sample_weight_grad(model, trace, grads, index, n):
    """Weight gradient of sample ``n`` alone at layer ``index``."""
    layer = model.layers[index]
    if layer.kind == "fc":
        return np.outer(grads.grad_z[index][n], trace.inputs[index][n])
    return nn.conv_backward_weights(layer.weight, trace.inputs[index][n], grads.grad_z[index][n])


def mean_loss(model, batch, labels):
    trace = forward(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    z = trace.logits - trace.logits.max(axis=1, keepdims=True)
    logp = z[np.arange(len(labels)), labels] - np.log(np.exp(z).sum(axis=1))
    return float(-logp.mean())
