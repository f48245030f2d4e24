"""From-scratch CNN primitives: layers, backprop, and SGD with momentum.

Everything runs on float64 numpy arrays.  A batch is an (n, channels,
rows, cols) array; convolution is cross-correlation with stride 1 and no
padding, pooling is 2x2 max with stride 2 (trailing odd rows/cols are
dropped), and the terminal layer is always a softmax producing per-class
probabilities.  ``forward`` keeps an activation cache so ``backward`` can
return exact analytic gradients of the mean cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOSS_CLAMP = 1e-12


class NonFiniteGradientError(RuntimeError):
    """An optimizer step was aborted because a gradient was not finite."""


# ---------------------------------------------------------------------------
# Layer definitions


@dataclass
class Conv:
    out_channels: int
    kernel: tuple[int, int]
    weights: np.ndarray  # (out, in, kh, kw)
    biases: np.ndarray  # (out,)


@dataclass
class Relu:
    pass


@dataclass
class MaxPool:
    size: int = 2
    stride: int = 2


@dataclass
class Lrn:
    radius: int = 2
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0


@dataclass
class Flatten:
    pass


@dataclass
class Dense:
    out_features: int
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)


@dataclass
class Softmax:
    pass


_PARAM_TYPES = (Conv, Dense)


@dataclass
class CnnModel:
    """Ordered layers plus the input geometry they were built for."""

    layers: list
    input_shape: tuple[int, int, int]  # (channels, rows, cols)
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        softmax_at = [i for i, l in enumerate(self.layers) if isinstance(l, Softmax)]
        if softmax_at != [len(self.layers) - 1]:
            raise ValueError("model needs exactly one terminal Softmax layer")
        infer_shapes(self.layers, self.input_shape)  # raises on mismatch

    def param_layers(self):
        """(index, name, layer) for every parameterized layer, in order."""
        counts = {Conv: 0, Dense: 0}
        out = []
        for i, layer in enumerate(self.layers):
            for cls, tag in ((Conv, "conv"), (Dense, "dense")):
                if isinstance(layer, cls):
                    counts[cls] += 1
                    out.append((i, f"{tag}{counts[cls]}", layer))
        return out

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays in a fixed traversal order."""
        out = []
        for _, _, layer in self.param_layers():
            out.extend([layer.weights, layer.biases])
        return out


def infer_shapes(layers, input_shape) -> list[tuple]:
    """Output shape after each layer; raises ValueError when a layer
    cannot accept its input geometry."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            c, h, w = shape
            kh, kw = layer.kernel
            if layer.weights.shape != (layer.out_channels, c, kh, kw):
                raise ValueError(
                    f"layer {i}: conv weights {layer.weights.shape} do not "
                    f"match ({layer.out_channels}, {c}, {kh}, {kw})"
                )
            if h < kh or w < kw:
                raise ValueError(f"layer {i}: {h}x{w} input smaller than kernel")
            shape = (layer.out_channels, h - kh + 1, w - kw + 1)
        elif isinstance(layer, MaxPool):
            c, h, w = shape
            if h < layer.size or w < layer.size:
                raise ValueError(f"layer {i}: {h}x{w} input too small to pool")
            shape = (c, h // layer.stride, w // layer.stride)
        elif isinstance(layer, (Relu, Lrn)):
            pass
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ValueError(f"layer {i}: dense needs flattened input")
            if layer.weights.shape != (layer.out_features, shape[0]):
                raise ValueError(
                    f"layer {i}: dense weights {layer.weights.shape} do not "
                    f"match ({layer.out_features}, {shape[0]})"
                )
            shape = (layer.out_features,)
        elif isinstance(layer, Softmax):
            if len(shape) != 1:
                raise ValueError(f"layer {i}: softmax needs a feature vector")
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# Forward / backward per layer


def _conv_forward(layer: Conv, x):
    n, c, h, w = x.shape
    kh, kw = layer.kernel
    h2, w2 = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h2 * w2, c * kh * kw)
    wmat = layer.weights.reshape(layer.out_channels, -1)
    out = cols @ wmat.T + layer.biases
    out = out.reshape(n, h2, w2, layer.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols)


def _conv_backward(layer: Conv, grad_out, cache):
    (n, c, h, w), cols = cache
    kh, kw = layer.kernel
    h2, w2 = h - kh + 1, w - kw + 1
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h2 * w2, layer.out_channels)
    gw = (g.T @ cols).reshape(layer.weights.shape)
    gb = g.sum(axis=0)
    dcols = g @ layer.weights.reshape(layer.out_channels, -1)
    dcols = dcols.reshape(n, h2, w2, c, kh, kw)
    dx = np.zeros((n, c, h, w))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + h2, j : j + w2] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return dx, gw, gb


def _pool_forward(layer: MaxPool, x):
    n, c, h, w = x.shape
    s = layer.stride
    h2, w2 = h // s, w // s
    core = x[:, :, : h2 * s, : w2 * s]
    win = core.reshape(n, c, h2, s, w2, s).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, s * s)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _pool_backward(layer: MaxPool, grad_out, cache):
    (n, c, h, w), idx = cache
    s = layer.stride
    h2, w2 = h // s, w // s
    dwin = np.zeros((n, c, h2, w2, s * s))
    np.put_along_axis(dwin, idx[..., None], grad_out[..., None], axis=-1)
    core = dwin.reshape(n, c, h2, w2, s, s).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((n, c, h, w))
    dx[:, :, : h2 * s, : w2 * s] = core.reshape(n, c, h2 * s, w2 * s)
    return dx


def _sliding_channel_sum(x, radius, axis=1):
    count = x.shape[axis]
    cs = np.cumsum(x, axis=axis)
    zero = np.zeros_like(np.take(cs, [0], axis=axis))
    cs = np.concatenate([zero, cs], axis=axis)
    hi = np.minimum(np.arange(count) + radius + 1, count)
    lo = np.maximum(np.arange(count) - radius, 0)
    return np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis)


def _lrn_forward(layer: Lrn, x, axis=1):
    sq = _sliding_channel_sum(x * x, layer.radius, axis=axis)
    denom = layer.k + layer.alpha * sq
    scale = denom ** (-layer.beta)
    return x * scale, (x, denom, scale)


def _lrn_backward(layer: Lrn, grad_out, cache, axis=1):
    x, denom, scale = cache
    inner = _sliding_channel_sum(grad_out * x / denom * scale, layer.radius, axis=axis)
    return grad_out * scale - 2.0 * layer.alpha * layer.beta * x * inner


def lrn_forward(
    x: np.ndarray,
    radius: int = 2,
    alpha: float = 1e-4,
    beta: float = 0.75,
    k: float = 2.0,
) -> np.ndarray:
    """Cross-channel response normalization of one (channels, rows, cols)
    tensor: ``b_c = a_c / (k + alpha * sum_{|c'-c| <= radius} a_{c'}^2)^beta``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (channels, rows, cols), got shape {x.shape}")
    out, _ = _lrn_forward(Lrn(radius=radius, alpha=alpha, beta=beta, k=k), x, axis=0)
    return out


# ---------------------------------------------------------------------------
# Whole-model forward / backward


def _as_batch(batch, input_shape):
    if isinstance(batch, np.ndarray) and batch.ndim == 4:
        arr = np.asarray(batch, dtype=np.float64)
    else:
        tensors = []
        for t in batch:
            t = np.asarray(t, dtype=np.float64)
            if t.ndim == 2:
                t = t[None, :, :]
            tensors.append(t)
        if not tensors:
            raise ValueError("empty batch")
        arr = np.stack(tensors)
    if arr.shape[1:] != tuple(input_shape):
        raise ValueError(
            f"batch shape {arr.shape[1:]} does not match model input "
            f"{tuple(input_shape)}"
        )
    return arr


def forward(model: CnnModel, batch) -> tuple[np.ndarray, list]:
    """Run the net on a batch (list of tensors or an (n, c, h, w) array).

    Returns the (n, num_classes) softmax probabilities and the activation
    cache consumed by :func:`backward`.
    """
    x = _as_batch(batch, model.input_shape)
    cache: list = []
    for layer in model.layers:
        if isinstance(layer, Conv):
            x, c = _conv_forward(layer, x)
            cache.append(c)
        elif isinstance(layer, Relu):
            mask = x > 0
            x = np.maximum(x, 0.0)
            cache.append(mask)
        elif isinstance(layer, MaxPool):
            x, c = _pool_forward(layer, x)
            cache.append(c)
        elif isinstance(layer, Lrn):
            x, c = _lrn_forward(layer, x)
            cache.append(c)
        elif isinstance(layer, Flatten):
            cache.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            cache.append(x)
            x = x @ layer.weights.T + layer.biases
        elif isinstance(layer, Softmax):
            z = x - x.max(axis=1, keepdims=True)
            e = np.exp(z)
            x = e / e.sum(axis=1, keepdims=True)
            cache.append(x)
    return x, cache


def loss(probs: np.ndarray, label: int) -> float:
    """Cross-entropy of one probability vector against its class index.

    Probabilities are clamped at 1e-12 before the log; the reported model
    score for a mini-batch is the mean of these per-sample values.
    """
    probs = np.asarray(probs, dtype=np.float64)
    return float(-np.log(max(probs[label], LOSS_CLAMP)))


def batch_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a batch of probability rows."""
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, LOSS_CLAMP)).mean())


@dataclass
class GradientSet:
    """Per-layer (weight, bias) gradients; None for parameter-free layers."""

    layers: list


def backward(model: CnnModel, cache: list, labels) -> GradientSet:
    """Analytic gradients of the mean cross-entropy for one batch.

    The combined softmax + cross-entropy gradient at the logits is
    ``(probs - one_hot) / batch_size``.
    """
    labels = np.asarray(labels)
    if len(cache) != len(model.layers):
        raise ValueError("cache does not match the model's layer count")
    probs = cache[-1]
    n = probs.shape[0]
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for a batch of {n}")
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads: list = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Softmax):
            continue  # folded into the cross-entropy gradient above
        if isinstance(layer, Dense):
            x = cache[i]
            gw = grad.T @ x
            gb = grad.sum(axis=0)
            grads[i] = (gw, gb)
            grad = grad @ layer.weights
        elif isinstance(layer, Flatten):
            grad = grad.reshape(cache[i])
        elif isinstance(layer, Relu):
            grad = grad * cache[i]
        elif isinstance(layer, Lrn):
            grad = _lrn_backward(layer, grad, cache[i])
        elif isinstance(layer, MaxPool):
            grad = _pool_backward(layer, grad, cache[i])
        elif isinstance(layer, Conv):
            grad, gw, gb = _conv_backward(layer, grad, cache[i])
            grads[i] = (gw, gb)
    return GradientSet(layers=grads)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    """SGD-with-momentum state: one velocity per parameter tensor."""

    learning_rate: float
    momentum: float = 0.9
    l2: float = 5e-4
    velocities: list = field(default_factory=list)

    @classmethod
    def for_model(
        cls, model: CnnModel, learning_rate: float = 1e-4,
        momentum: float = 0.9, l2: float = 5e-4,
    ) -> "OptimizerState":
        vel = [np.zeros_like(p) for p in model.parameters()]
        return cls(learning_rate=learning_rate, momentum=momentum, l2=l2,
                   velocities=vel)


def sgd_momentum_step(
    state: OptimizerState, model: CnnModel, grads: GradientSet
) -> None:
    """One in-place update: g' = g + l2*w; v <- rho*v - lr*g'; w <- w + v."""
    params = model.parameters()
    flat_grads = []
    for i, layer in enumerate(model.layers):
        if grads.layers[i] is not None:
            flat_grads.extend(grads.layers[i])
    if len(flat_grads) != len(params):
        raise ValueError("gradient set does not match the model's parameters")
    for j, (p, g) in enumerate(zip(params, flat_grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {j}: grad shape {g.shape} != {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in parameter tensor {j}; step aborted"
            )
    for p, g, v in zip(params, flat_grads, state.velocities):
        g_reg = g + state.l2 * p
        v *= state.momentum
        v -= state.learning_rate * g_reg
        p += v


# ---------------------------------------------------------------------------
# Model construction


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def make_conv(rng, in_channels, out_channels, kernel=(5, 5)) -> Conv:
    kh, kw = kernel
    fan_in = in_channels * kh * kw
    return Conv(
        out_channels=out_channels,
        kernel=(kh, kw),
        weights=_he_normal(rng, (out_channels, in_channels, kh, kw), fan_in),
        biases=np.zeros(out_channels),
    )


def make_dense(rng, in_features, out_features) -> Dense:
    return Dense(
        out_features=out_features,
        weights=_he_normal(rng, (out_features, in_features), in_features),
        biases=np.zeros(out_features),
    )


def build_recognition_model(
    input_dims: tuple[int, int],
    num_classes: int,
    kernels: int = 50,
    kernel_size: int = 5,
    seed: int = 0,
) -> CnnModel:
    """The two-stage recognition net: conv/ReLU/LRN/pool, conv/ReLU/pool,
    then a dense softmax classifier.

    Weights draw from N(0, sqrt(2/fan_in)) with the given seed; biases
    start at zero.
    """
    rows, cols = input_dims
    k = kernel_size
    after1 = ((rows - k + 1) // 2, (cols - k + 1) // 2)
    after2 = ((after1[0] - k + 1) // 2, (after1[1] - k + 1) // 2)
    if rows < k or cols < k or after1[0] < k or after1[1] < k or min(after2) < 1:
        raise ValueError(
            f"{rows}x{cols} input too small for two {k}x{k} convolutions "
            "with 2x2 pooling"
        )
    rng = np.random.default_rng(seed)
    conv1 = make_conv(rng, 1, kernels, (k, k))
    conv2 = make_conv(rng, kernels, kernels, (k, k))
    features = kernels * after2[0] * after2[1]
    dense = make_dense(rng, features, num_classes)
    layers = [
        conv1, Relu(), Lrn(), MaxPool(),
        conv2, Relu(), MaxPool(),
        Flatten(), dense, Softmax(),
    ]
    return CnnModel(
        layers=layers,
        input_shape=(1, rows, cols),
        num_classes=num_classes,
        seed=seed,
    )
