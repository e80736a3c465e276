"""Small dense-array network core with exact parameter and input gradients.

Arrays are plain ``numpy.ndarray`` objects. Images are laid out (B, C, H, W).
Models default to float32; ``Model.astype(np.float64)`` gives a copy used for
finite-difference checks.

Layer menu: dense, conv2d (explicit ``stride`` and zero ``padding``; no "same"
inference), relu, maxpool2x2 (stride 2, even spatial dims), flatten.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Input or layer shapes are incompatible."""


class NumericError(FloatingPointError):
    """A non-finite value (NaN/Inf) was produced."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"
    n_params = 0

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, rng, dtype):
        return []

    def forward(self, x, params):
        raise NotImplementedError

    def backward(self, dy, cache, params, need_dx, need_params):
        raise NotImplementedError

    def describe(self):
        return self.kind


class Dense(Layer):
    kind = "dense"
    n_params = 2

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = int(n_in), int(n_out)

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"{self.describe()} expects input ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def init_params(self, rng, dtype):
        w = rng.standard_normal((self.n_out, self.n_in)) * math.sqrt(2.0 / self.n_in)
        return [w.astype(dtype), np.zeros(self.n_out, dtype=dtype)]

    def forward(self, x, params):
        w, b = params
        return x @ w.T + b, x

    def backward(self, dy, cache, params, need_dx, need_params):
        w, _ = params
        grads = [dy.T @ cache, dy.sum(axis=0)] if need_params else None
        dx = dy @ w if need_dx else None
        return dx, grads

    def describe(self):
        return f"dense({self.n_in}->{self.n_out})"


class Conv2d(Layer):
    kind = "conv2d"
    n_params = 2

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0):
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.k, self.stride, self.padding = int(kernel_size), int(stride), int(padding)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(
                f"{self.describe()} expects input (C={self.c_in}, H, W), got {tuple(in_shape)}"
            )
        _, h, w = in_shape
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.describe()} kernel larger than padded input {tuple(in_shape)}")
        return (self.c_out, oh, ow)

    def init_params(self, rng, dtype):
        fan_in = self.c_in * self.k * self.k
        w = rng.standard_normal((self.c_out, self.c_in, self.k, self.k)) * math.sqrt(2.0 / fan_in)
        return [w.astype(dtype), np.zeros(self.c_out, dtype=dtype)]

    def forward(self, x, params):
        w, b = params
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        B, _, H, W = xp.shape
        oh = (H - self.k) // self.stride + 1
        ow = (W - self.k) // self.stride + 1
        cols = kernels.im2col(xp, self.k, self.stride)
        y = cols @ w.reshape(self.c_out, -1).T + b
        y = y.reshape(B, oh, ow, self.c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, xp.shape)

    def backward(self, dy, cache, params, need_dx, need_params):
        w, _ = params
        cols, padded_shape = cache
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        grads = None
        if need_params:
            grads = [(dy2.T @ cols).reshape(w.shape), dy2.sum(axis=0)]
        dx = None
        if need_dx:
            dcols = dy2 @ w.reshape(self.c_out, -1)
            dx = kernels.col2im(dcols, padded_shape, self.k, self.stride)
            p = self.padding
            if p:
                dx = dx[:, :, p:-p, p:-p]
        return dx, grads

    def describe(self):
        return (
            f"conv2d({self.c_in}->{self.c_out}, k={self.k}, "
            f"stride={self.stride}, padding={self.padding})"
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, params, need_dx, need_params):
        return (dy * cache if need_dx else None), None


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"maxpool2x2 needs (C, H, W) with even H, W, got {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x, params):
        return kernels.maxpool2x2_forward(x)

    def backward(self, dy, cache, params, need_dx, need_params):
        return (kernels.maxpool2x2_backward(dy, cache) if need_dx else None), None


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params, need_dx, need_params):
        return (dy.reshape(cache) if need_dx else None), None


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    layers: list
    params: list
    input_shape: tuple
    num_classes: int
    pixel_domain: tuple = (0.0, 1.0)
    name: str = "model"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.describe()}): {exc}") from None
        if shape != (self.num_classes,):
            raise ShapeError(f"model output shape {shape} != ({self.num_classes},)")
        expected = sum(layer.n_params for layer in self.layers)
        if len(self.params) != expected:
            raise ShapeError(f"expected {expected} parameter arrays, got {len(self.params)}")

    @classmethod
    def build(cls, layers, input_shape, num_classes, seed=0, dtype=np.float32, **kw):
        rng = np.random.default_rng(seed)
        params = []
        shape = tuple(input_shape)
        for i, layer in enumerate(layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.describe()}): {exc}") from None
            params.extend(layer.init_params(rng, dtype))
        return cls(list(layers), params, tuple(input_shape), num_classes, **kw)

    @property
    def dtype(self):
        return self.params[0].dtype if self.params else np.dtype(np.float32)

    def n_parameters(self):
        return int(sum(p.size for p in self.params))

    def copy(self):
        return Model(
            self.layers, [p.copy() for p in self.params], self.input_shape,
            self.num_classes, self.pixel_domain, self.name,
        )

    def astype(self, dtype):
        m = self.copy()
        m.params = [p.astype(dtype) for p in m.params]
        return m

    def layer_params(self):
        """Yield (layer, its parameter list) pairs in order."""
        i = 0
        for layer in self.layers:
            yield layer, self.params[i : i + layer.n_params]
            i += layer.n_params

    def clamp(self, x):
        lo, hi = self.pixel_domain
        return np.clip(x, lo, hi)


def lenet(seed=0, dtype=np.float32):
    """MNIST preset: conv5(1->16) pool conv5(16->32) pool dense(512->128) dense(128->10)."""
    layers = [
        Conv2d(1, 16, 5), ReLU(), MaxPool2x2(),
        Conv2d(16, 32, 5), ReLU(), MaxPool2x2(),
        Flatten(), Dense(32 * 4 * 4, 128), ReLU(), Dense(128, 10),
    ]
    return Model.build(layers, (1, 28, 28), 10, seed=seed, dtype=dtype, name="lenet")


def smallconv_cifar(seed=0, dtype=np.float32):
    """CIFAR-10 preset: 4 conv3 (pad 1) layers in two pooled stages, then dense(4096->256->10)."""
    layers = [
        Conv2d(3, 32, 3, padding=1), ReLU(),
        Conv2d(32, 32, 3, padding=1), ReLU(), MaxPool2x2(),
        Conv2d(32, 64, 3, padding=1), ReLU(),
        Conv2d(64, 64, 3, padding=1), ReLU(), MaxPool2x2(),
        Flatten(), Dense(64 * 8 * 8, 256), ReLU(), Dense(256, 10),
    ]
    return Model.build(layers, (3, 32, 32), 10, seed=seed, dtype=dtype, name="smallconv_cifar")


PRESETS = {"lenet": lenet, "smallconv_cifar": smallconv_cifar}


# ---------------------------------------------------------------------------
# forward / loss / backward
# ---------------------------------------------------------------------------


def _check_input(model, x):
    x = np.asarray(x)
    if x.ndim != len(model.input_shape) + 1 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"input shape {tuple(x.shape)} does not match model input (B, {model.input_shape}) "
            f"at layer 0 ({model.layers[0].describe()})"
        )
    return np.ascontiguousarray(x, dtype=model.dtype)


def _forward(model, x, keep):
    caches = []
    for layer, params in model.layer_params():
        x, cache = layer.forward(x, params)
        if keep:
            caches.append(cache)
    return x, caches


def forward(model: Model, x) -> np.ndarray:
    """Logits of shape (B, num_classes)."""
    logits, _ = _forward(model, _check_input(model, x), keep=False)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def predict(model: Model, x, chunk=1000) -> np.ndarray:
    """argmax labels, evaluated in chunks."""
    x = np.asarray(x)
    return np.concatenate(
        [forward(model, x[i : i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)]
    ) if len(x) else np.zeros(0, dtype=np.int64)


def cross_entropy(logits, labels):
    """Per-example softmax cross-entropy and the softmax probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    ce = np.log(s[:, 0]) - z[np.arange(len(labels)), labels]
    return ce, ez / s


def _check_labels(model, labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return labels.astype(np.int64)


def loss(model: Model, x, labels, beta=math.inf):
    """Clipped cross-entropy: returns (mean, per_example) with per_example = min(CE, beta)."""
    logits = forward(model, x)
    labels = _check_labels(model, labels, len(logits))
    ce, _ = cross_entropy(logits, labels)
    per = np.minimum(ce, beta).astype(logits.dtype)
    return float(per.mean()), per


class Gradients(NamedTuple):
    mean_loss: float
    per_example: np.ndarray
    logits: np.ndarray
    grad_params: list | None
    grad_input: np.ndarray | None


def value_and_grad(model: Model, x, labels, beta=math.inf, need_params=True, need_input=True):
    """Clipped mean loss with its gradients (and the logits) from one backward pass.

    Examples whose cross-entropy is >= beta contribute exactly zero to both
    gradients.
    """
    x = _check_input(model, x)
    logits, caches = _forward(model, x, keep=True)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    B = len(logits)
    labels = _check_labels(model, labels, B)
    ce, probs = cross_entropy(logits, labels)
    active = ce < beta
    per = np.minimum(ce, beta).astype(logits.dtype)

    dy = probs
    dy[np.arange(B), labels] -= 1
    dy *= (active / B).astype(dy.dtype)[:, None]

    n_layers = len(model.layers)
    grads = [None] * len(model.params)
    offsets = np.cumsum([0] + [layer.n_params for layer in model.layers])
    # lowest layer the backward sweep has to reach
    if need_input:
        lowest = 0
    elif need_params:
        lowest = min((i for i, lay in enumerate(model.layers) if lay.n_params), default=n_layers)
    else:
        lowest = n_layers
    for i in range(n_layers - 1, lowest - 1, -1):
        layer = model.layers[i]
        params = model.params[offsets[i] : offsets[i + 1]]
        dy, g = layer.backward(dy, caches[i], params, need_input or i > lowest, need_params)
        if g is not None:
            grads[offsets[i] : offsets[i + 1]] = g
    return Gradients(
        float(per.mean()),
        per,
        logits,
        grads if need_params else None,
        dy if need_input else None,
    )


def backward(model: Model, x, labels, beta=math.inf):
    """(grad_params, grad_input) of the clipped mean loss, computed in one pass."""
    g = value_and_grad(model, x, labels, beta)
    return g.grad_params, g.grad_input


def logit_jacobian(model: Model, x):
    """Logits (K,) and d logits / d x of shape (K, *input_shape) for one example."""
    x = _check_input(model, np.asarray(x)[None])
    K = model.num_classes
    xs = np.repeat(x, K, axis=0)
    logits, caches = _forward(model, xs, keep=True)
    dy = np.eye(K, dtype=logits.dtype)
    for (layer, params), cache in zip(reversed(list(model.layer_params())), reversed(caches)):
        dy, _ = layer.backward(dy, cache, params, True, False)
    return logits[0], dy


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
RULES = ("sgd", "momentum_sgd", "adam", "sign")


@dataclass
class OptimizerState:
    """Per-variable optimizer state. ``momentum`` is only used by momentum_sgd."""

    rule: str
    lr: float
    shape: tuple
    momentum: float = 0.9
    dtype: object = np.float32
    velocity: np.ndarray | None = field(default=None, repr=False)
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown update rule {self.rule!r}; choose from {RULES}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.shape = tuple(self.shape)
        if self.rule == "momentum_sgd" and self.velocity is None:
            self.velocity = np.zeros(self.shape, dtype=self.dtype)
        if self.rule == "adam" and self.m is None:
            self.m = np.zeros(self.shape, dtype=self.dtype)
            self.v = np.zeros(self.shape, dtype=self.dtype)


def apply_update(variable, grad, state: OptimizerState, ascent=False):
    """One optimizer step; returns the new variable (inputs are not modified).

    ``momentum_sgd`` follows ``g <- mu*g - grad; w <- w + lr*g`` for descent
    (``+ grad`` for ascent).
    """
    if grad.shape != state.shape or variable.shape != state.shape:
        raise ShapeError(f"optimizer state shape {state.shape} vs grad {grad.shape}")
    sgn = 1.0 if ascent else -1.0
    dt = variable.dtype.type
    lr = dt(state.lr)
    if state.rule == "sgd":
        return variable + dt(sgn) * lr * grad
    if state.rule == "sign":
        return variable + dt(sgn) * lr * np.sign(grad)
    if state.rule == "momentum_sgd":
        state.velocity = dt(state.momentum) * state.velocity + dt(sgn) * grad
        return variable + lr * state.velocity
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grad * grad
    mhat = state.m / (1 - ADAM_BETA1**state.t)
    vhat = state.v / (1 - ADAM_BETA2**state.t)
    return (variable + sgn * state.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(variable.dtype)


def model_optimizer(model, lr, momentum=0.9, rule="momentum_sgd"):
    return [OptimizerState(rule, lr, p.shape, momentum, p.dtype) for p in model.params]


def step_model(model, grads, states, lr=None):
    """Descent step on every parameter in place of ``model.params``."""
    for i, (p, g, st) in enumerate(zip(model.params, grads, states)):
        if lr is not None:
            st.lr = lr
        model.params[i] = apply_update(p, g, st, ascent=False)
