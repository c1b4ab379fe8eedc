"""Small dense/conv network with per-example gradients.

Everything is float64 numpy and pure: forward and backward never mutate
their inputs, an SGD step returns a fresh parameter set.  Backward is
available per example (needed for example-level clipping and noising)
and as a single vectorized pass over a batch (used as an independent
cross-check and for fast evaluation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .streams import RandomStream

ARCH_NAMES = ("mlp-tiny", "mlp-2h", "cnn-small")

_HIDDEN = {"mlp-tiny": (16,), "mlp-2h": (32, 16)}


@dataclass(frozen=True, eq=False)
class Dense:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)


@dataclass(frozen=True, eq=False)
class Conv2D:
    """3x3 valid convolution, stride 1, channels-last."""

    w: np.ndarray  # (kh, kw, c_in, c_out)
    b: np.ndarray  # (c_out,)


@dataclass(frozen=True, eq=False)
class Relu:
    pass


@dataclass(frozen=True, eq=False)
class MaxPool2:
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""


@dataclass(frozen=True, eq=False)
class Flatten:
    pass


Layer = Dense | Conv2D | Relu | MaxPool2 | Flatten


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int


@dataclass(frozen=True, eq=False)
class ArchSpec:
    """Architecture descriptor: family name, input shape, class count."""

    name: str
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if self.name not in ARCH_NAMES:
            raise ValueError(f"unknown architecture {self.name!r}, expected one of {ARCH_NAMES}")
        shape = tuple(int(d) for d in self.input_shape)
        object.__setattr__(self, "input_shape", shape)
        if not shape or any(d <= 0 for d in shape):
            raise ValueError(f"input_shape must be non-empty positive dims, got {shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass(frozen=True, eq=False)
class LayerGrad:
    w: np.ndarray
    b: np.ndarray


@dataclass(frozen=True, eq=False)
class GradientUpdate:
    """Per-layer gradients (or parameter deltas) for the trainable layers.

    layer_norms caches the flattened L2 norm of each layer, weights and
    bias together, since clipping consults it repeatedly.
    """

    layers: tuple[LayerGrad, ...]
    layer_norms: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        norms = tuple(
            float(np.sqrt(np.sum(g.w * g.w) + np.sum(g.b * g.b))) for g in self.layers
        )
        object.__setattr__(self, "layer_norms", norms)


def trainable_layers(model: ModelParams) -> tuple[Layer, ...]:
    return tuple(layer for layer in model.layers if isinstance(layer, (Dense, Conv2D)))


def parameter_count(model: ModelParams) -> int:
    return sum(layer.w.size + layer.b.size for layer in trainable_layers(model))


def _he_uniform(shape: tuple[int, ...], fan_in: int, stream: RandomStream) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return stream.generator().uniform(-limit, limit, size=shape)


def build_model(arch: ArchSpec, seed: int) -> ModelParams:
    """Construct a model with seeded fan-in-scaled uniform weights, zero biases."""
    stream = RandomStream(seed)
    layers: list[Layer] = []
    t = 0  # index of the next trainable layer, used as the init address

    def dense(fan_in: int, fan_out: int) -> Dense:
        nonlocal t
        w = _he_uniform((fan_in, fan_out), fan_in, stream.child("init", t))
        t += 1
        return Dense(w, np.zeros(fan_out))

    def conv(c_in: int, c_out: int) -> Conv2D:
        nonlocal t
        w = _he_uniform((3, 3, c_in, c_out), 9 * c_in, stream.child("init", t))
        t += 1
        return Conv2D(w, np.zeros(c_out))

    if arch.name in _HIDDEN:
        if len(arch.input_shape) > 1:
            layers.append(Flatten())
        dims = [int(np.prod(arch.input_shape)), *_HIDDEN[arch.name], arch.num_classes]
        for i in range(len(dims) - 1):
            layers.append(dense(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(Relu())
    else:  # cnn-small
        if len(arch.input_shape) != 3:
            raise ValueError("cnn-small expects a (height, width, channels) input shape")
        h, w, c = arch.input_shape
        for c_out in (16, 32):
            layers.append(conv(c, c_out))
            layers.append(Relu())
            layers.append(MaxPool2())
            h, w, c = (h - 2) // 2, (w - 2) // 2, c_out
            if h < 1 or w < 1:
                raise ValueError(f"input {arch.input_shape} too small for cnn-small")
        layers.append(Flatten())
        layers.append(dense(h * w * c, arch.num_classes))

    return ModelParams(tuple(layers), arch.input_shape, arch.num_classes)


def _as_batch(model: ModelParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None, ...], True
    if x.shape[1:] == model.input_shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")


def _pool_forward(a: np.ndarray):
    n, h, w, c = a.shape
    ph, pw = h // 2, w // 2
    if ph == 0 or pw == 0:
        raise ValueError(f"activation {a.shape} too small for 2x2 pooling")
    windows = (
        a[:, : 2 * ph, : 2 * pw, :]
        .reshape(n, ph, 2, pw, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ph, pw, c, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (idx, a.shape)


def _pool_backward(g: np.ndarray, cache) -> np.ndarray:
    idx, in_shape = cache
    n, h, w, c = in_shape
    ph, pw = h // 2, w // 2
    flat = np.zeros((n, ph, pw, c, 4))
    np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
    dx = np.zeros(in_shape)
    dx[:, : 2 * ph, : 2 * pw, :] = (
        flat.reshape(n, ph, pw, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ph, 2 * pw, c)
    )
    return dx


def _run_forward(model: ModelParams, x_batch: np.ndarray):
    """Returns (scores, caches); caches hold what backward needs per layer."""
    a = x_batch
    caches: list = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            if a.ndim != 2:
                raise ValueError(f"dense layer expects flat activations, got shape {a.shape}")
            caches.append(a)
            a = a @ layer.w + layer.b
        elif isinstance(layer, Conv2D):
            windows = sliding_window_view(a, (3, 3), axis=(1, 2))  # (n, oh, ow, c, 3, 3)
            caches.append((windows, a.shape))
            a = np.einsum("nxyckl,klcf->nxyf", windows, layer.w) + layer.b
        elif isinstance(layer, Relu):
            mask = a > 0
            caches.append(mask)
            a = np.maximum(a, 0.0)
        elif isinstance(layer, MaxPool2):
            a, cache = _pool_forward(a)
            caches.append(cache)
        else:  # Flatten
            caches.append(a.shape)
            a = a.reshape(a.shape[0], -1)
    if a.ndim != 2 or a.shape[1] != model.num_classes:
        raise ValueError(f"model produced scores of shape {a.shape}, expected (*, {model.num_classes})")
    return a, caches


def _conv_input_grad(layer: Conv2D, g: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    dx = np.zeros(in_shape)
    oh, ow = g.shape[1], g.shape[2]
    for ki in range(3):
        for kj in range(3):
            dx[:, ki : ki + oh, kj : kj + ow, :] += np.einsum("nxyf,cf->nxyc", g, layer.w[ki, kj])
    return dx


def _run_backward(model: ModelParams, caches: list, seed: np.ndarray) -> GradientUpdate:
    """Backpropagate d(objective)/d(scores) = seed; gradients sum over the batch."""
    g = seed
    grads: list[LayerGrad] = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        if isinstance(layer, Dense):
            a = cache
            grads.append(LayerGrad(a.T @ g, g.sum(axis=0)))
            g = g @ layer.w.T
        elif isinstance(layer, Conv2D):
            windows, in_shape = cache
            dw = np.einsum("nxyckl,nxyf->klcf", windows, g)
            grads.append(LayerGrad(dw, g.sum(axis=(0, 1, 2))))
            g = _conv_input_grad(layer, g, in_shape)
        elif isinstance(layer, Relu):
            g = g * cache
        elif isinstance(layer, MaxPool2):
            g = _pool_backward(g, cache)
        else:  # Flatten
            g = g.reshape(cache)
    grads.reverse()
    return GradientUpdate(tuple(grads))


def _run_backward_per_example(model: ModelParams, caches: list, seed: np.ndarray) -> np.ndarray:
    """Like _run_backward but keeps the batch axis: returns (n, param_count).

    Row e is example e's full flattened gradient, laid out like
    flatten_update.  One vectorized pass instead of n separate ones,
    which is what makes finite-difference probing of many inputs cheap.
    """
    n = seed.shape[0]
    g = seed
    blocks: list[np.ndarray] = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        if isinstance(layer, Dense):
            a = cache
            dw = np.einsum("ni,nf->nif", a, g).reshape(n, -1)
            blocks.append(g)  # bias grad
            blocks.append(dw)
            g = g @ layer.w.T
        elif isinstance(layer, Conv2D):
            windows, in_shape = cache
            dw = np.einsum("nxyckl,nxyf->nklcf", windows, g).reshape(n, -1)
            blocks.append(g.sum(axis=(1, 2)))
            blocks.append(dw)
            g = _conv_input_grad(layer, g, in_shape)
        elif isinstance(layer, Relu):
            g = g * cache
        elif isinstance(layer, MaxPool2):
            g = _pool_backward(g, cache)
        else:  # Flatten
            g = g.reshape(cache)
    blocks.reverse()
    return np.concatenate(blocks, axis=1)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_scores(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Pre-softmax class scores; accepts a single input or a batch."""
    batch, single = _as_batch(model, x)
    scores, _ = _run_forward(model, batch)
    return scores[0] if single else scores


def forward(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities; accepts a single input or a batch."""
    scores = forward_scores(model, x)
    log_p = _log_softmax(scores[None, :] if scores.ndim == 1 else scores)
    probs = np.exp(log_p)
    return probs[0] if scores.ndim == 1 else probs


def _check_labels(model: ModelParams, ys: np.ndarray):
    if ys.size and (ys.min() < 0 or ys.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes}), got range "
                         f"[{ys.min()}, {ys.max()}]")


def example_loss_gradient(model: ModelParams, x: np.ndarray, y: int) -> tuple[float, GradientUpdate]:
    """Cross-entropy loss and gradient for one example."""
    batch, single = _as_batch(model, x)
    if not single:
        raise ValueError("example_loss_gradient takes a single example; use batch_loss_gradient")
    ys = np.asarray([y])
    _check_labels(model, ys)
    scores, caches = _run_forward(model, batch)
    log_p = _log_softmax(scores)
    loss = -log_p[0, y]
    seed = np.exp(log_p)
    seed[0, y] -= 1.0
    return float(loss), _run_backward(model, caches, seed)


def batch_loss_gradient(model: ModelParams, xs: np.ndarray, ys) -> tuple[float, GradientUpdate]:
    """Mean cross-entropy loss and gradient over a batch, in one vectorized pass."""
    batch, _ = _as_batch(model, np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    if len(ys) != batch.shape[0]:
        raise ValueError(f"{batch.shape[0]} inputs but {len(ys)} labels")
    _check_labels(model, ys)
    scores, caches = _run_forward(model, batch)
    log_p = _log_softmax(scores)
    n = batch.shape[0]
    loss = -log_p[np.arange(n), ys].mean()
    seed = np.exp(log_p)
    seed[np.arange(n), ys] -= 1.0
    return float(loss), _run_backward(model, caches, seed / n)


def per_example_flat_gradients(model: ModelParams, xs: np.ndarray, ys) -> np.ndarray:
    """Flattened cross-entropy gradient of every example in one pass.

    Returns an (n, parameter_count) array whose rows match
    flatten_update(example_loss_gradient(...)) for each example.
    """
    batch, _ = _as_batch(model, np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    if len(ys) != batch.shape[0]:
        raise ValueError(f"{batch.shape[0]} inputs but {len(ys)} labels")
    _check_labels(model, ys)
    scores, caches = _run_forward(model, batch)
    seed = np.exp(_log_softmax(scores))
    seed[np.arange(batch.shape[0]), ys] -= 1.0
    return _run_backward_per_example(model, caches, seed)


def score_seed_gradient(model: ModelParams, x: np.ndarray, seed: np.ndarray) -> GradientUpdate:
    """Gradient of seed . scores(x) with respect to the parameters.

    seed is a vector over classes (or a batch of them); gradients sum
    over the batch.  This generalizes backward beyond the cross-entropy
    objective (margins, score differences, ...).
    """
    batch, single = _as_batch(model, x)
    seed = np.asarray(seed, dtype=np.float64)
    if single:
        seed = seed[None, :]
    if seed.shape != (batch.shape[0], model.num_classes):
        raise ValueError(f"seed shape {seed.shape} does not match ({batch.shape[0]}, {model.num_classes})")
    _, caches = _run_forward(model, batch)
    return _run_backward(model, caches, seed)


def evaluate_accuracy(model: ModelParams, xs: np.ndarray, ys) -> float:
    scores = forward_scores(model, np.asarray(xs, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64).reshape(-1)
    return float((scores.argmax(axis=1) == ys).mean())


# --- gradient / update arithmetic -------------------------------------------


def _check_same_structure(a: GradientUpdate, b: GradientUpdate):
    if len(a.layers) != len(b.layers):
        raise ValueError(f"updates have {len(a.layers)} vs {len(b.layers)} layers")
    for ga, gb in zip(a.layers, b.layers):
        if ga.w.shape != gb.w.shape or ga.b.shape != gb.b.shape:
            raise ValueError(f"layer shape mismatch: {ga.w.shape} vs {gb.w.shape}")


def grad_add(a: GradientUpdate, b: GradientUpdate) -> GradientUpdate:
    _check_same_structure(a, b)
    return GradientUpdate(tuple(LayerGrad(ga.w + gb.w, ga.b + gb.b) for ga, gb in zip(a.layers, b.layers)))


def grad_scale(a: GradientUpdate, s: float) -> GradientUpdate:
    return GradientUpdate(tuple(LayerGrad(g.w * s, g.b * s) for g in a.layers))


def grad_mean(grads) -> GradientUpdate:
    grads = list(grads)
    if not grads:
        raise ValueError("cannot average an empty list of updates")
    for g in grads[1:]:
        _check_same_structure(grads[0], g)
    n = len(grads)
    ws = [g.w.copy() for g in grads[0].layers]
    bs = [g.b.copy() for g in grads[0].layers]
    for g in grads[1:]:
        for m, layer in enumerate(g.layers):
            ws[m] += layer.w
            bs[m] += layer.b
    return GradientUpdate(tuple(LayerGrad(w / n, b / n) for w, b in zip(ws, bs)))


def update_norm(update: GradientUpdate) -> float:
    """Global L2 norm over every coordinate of the update."""
    return float(np.sqrt(sum(n * n for n in update.layer_norms)))


def flatten_update(update: GradientUpdate) -> np.ndarray:
    parts = []
    for g in update.layers:
        parts.append(g.w.ravel())
        parts.append(g.b.ravel())
    return np.concatenate(parts)


def update_like(model: ModelParams, flat: np.ndarray) -> GradientUpdate:
    """Reshape a flat vector into an update matching the model's trainable layers."""
    flat = np.asarray(flat, dtype=np.float64).ravel()
    if flat.size != parameter_count(model):
        raise ValueError(f"flat vector has {flat.size} entries, model has {parameter_count(model)}")
    grads = []
    pos = 0
    for layer in trainable_layers(model):
        w = flat[pos : pos + layer.w.size].reshape(layer.w.shape)
        pos += layer.w.size
        b = flat[pos : pos + layer.b.size].reshape(layer.b.shape)
        pos += layer.b.size
        grads.append(LayerGrad(w, b))
    return GradientUpdate(tuple(grads))


def apply_update(model: ModelParams, update: GradientUpdate, scale: float = 1.0) -> ModelParams:
    """New model with scale * update added to each trainable layer."""
    if len(update.layers) != len(trainable_layers(model)):
        raise ValueError(f"update has {len(update.layers)} layers, model has "
                         f"{len(trainable_layers(model))} trainable layers")
    new_layers: list[Layer] = []
    it = iter(update.layers)
    for layer in model.layers:
        if isinstance(layer, Dense):
            g = next(it)
            if g.w.shape != layer.w.shape:
                raise ValueError(f"update shape {g.w.shape} does not match layer {layer.w.shape}")
            new_layers.append(Dense(layer.w + scale * g.w, layer.b + scale * g.b))
        elif isinstance(layer, Conv2D):
            g = next(it)
            if g.w.shape != layer.w.shape:
                raise ValueError(f"update shape {g.w.shape} does not match layer {layer.w.shape}")
            new_layers.append(Conv2D(layer.w + scale * g.w, layer.b + scale * g.b))
        else:
            new_layers.append(layer)
    return ModelParams(tuple(new_layers), model.input_shape, model.num_classes)


def sgd_step(model: ModelParams, grad: GradientUpdate, lr: float) -> ModelParams:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return apply_update(model, grad, -lr)


def model_delta(after: ModelParams, before: ModelParams) -> GradientUpdate:
    """Per-layer parameter difference after - before."""
    la, lb = trainable_layers(after), trainable_layers(before)
    if len(la) != len(lb):
        raise ValueError("models have different layer counts")
    grads = []
    for a, b in zip(la, lb):
        if a.w.shape != b.w.shape:
            raise ValueError(f"layer shape mismatch: {a.w.shape} vs {b.w.shape}")
        grads.append(LayerGrad(a.w - b.w, a.b - b.b))
    return GradientUpdate(tuple(grads))


def models_equal_bitwise(a: ModelParams, b: ModelParams) -> bool:
    la, lb = trainable_layers(a), trainable_layers(b)
    if len(la) != len(lb):
        return False
    return all(
        np.array_equal(x.w, y.w) and np.array_equal(x.b, y.b) for x, y in zip(la, lb)
    )


def has_nonfinite(model: ModelParams) -> bool:
    return any(
        not (np.isfinite(layer.w).all() and np.isfinite(layer.b).all())
        for layer in trainable_layers(model)
    )
