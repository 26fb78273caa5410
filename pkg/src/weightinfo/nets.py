"""Dense feed-forward networks with analytic backpropagation.

Everything is 64-bit and operates on a single flat parameter vector so that
gradients, Fisher buffers and samplers can treat the whole network as one
point in R^D.  Parameter layout per layer: weight matrix (in x out) in row-major
order, then the bias vector, layers from input to output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("linear", "tanh", "relu", "sigmoid")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dense classifier: layer sizes and hidden activation.

    The output layer is always raw logits; the activation applies to all
    hidden layers only.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("need at least input and output layer sizes")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")

    @property
    def num_params(self) -> int:
        """Total parameter count D, biases included."""
        return sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    # sigmoid via tanh for stability at large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act_deriv(name: str, a: np.ndarray) -> np.ndarray:
    # Derivative expressed through the activation output a = act(z).
    # ReLU subgradient at 0 is taken as 0.
    if name == "linear":
        return np.ones_like(a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    return a * (1.0 - a)


def unpack_params(net: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (weights, bias) views."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != net.num_params:
        raise ShapeError(f"expected flat parameter vector of length {net.num_params}, got shape {params.shape}")
    layers = []
    pos = 0
    for fan_in, fan_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        w = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def pack_params(net: NetworkSpec, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`unpack_params`."""
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    out = np.concatenate(parts)
    if out.size != net.num_params:
        raise ShapeError(f"packed {out.size} values, architecture needs {net.num_params}")
    return out


def init_params(net: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Symmetric uniform init on +-sqrt(6/(fan_in+fan_out)); zero biases."""
    layers = []
    for fan_in, fan_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return pack_params(net, layers)


def _forward_pass(net, params, inputs, dropout_rate=0.0, rng=None):
    """Run the network, returning logits plus the tapes backprop needs.

    ``acts[l]`` is the (post-dropout) input that fed layer l; ``hidden[l]`` is
    the pre-dropout activation of hidden layer l, needed because activation
    derivatives must be evaluated before the dropout mask is applied.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != net.layer_sizes[0]:
        raise ShapeError(
            f"inputs must be (batch, {net.layer_sizes[0]}), got {inputs.shape}"
        )
    if dropout_rate and rng is None:
        raise ConfigError("dropout requires an rng")
    layers = unpack_params(net, params)
    a = inputs
    acts = [a]
    hidden = []
    masks = []
    for l, (w, b) in enumerate(layers):
        z = a @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation at layer {l}")
        if l < len(layers) - 1:
            a = _act(net.activation, z)
            hidden.append(a)
            if dropout_rate:
                a, mask = apply_dropout(a, dropout_rate, rng, return_mask=True)
            else:
                mask = None
            masks.append(mask)
            acts.append(a)
        else:
            a = z  # raw logits
    return a, acts, hidden, masks


def forward(net: NetworkSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Logits (batch x classes) for a batch of inputs."""
    logits, _, _, _ = _forward_pass(net, params, inputs)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be a 1-D index array, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"label outside [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, clip: float | None = None) -> float:
    """Mean softmax cross-entropy, optionally clipping per-sample losses to [0, clip].

    Clipping keeps the loss bounded so it is sub-Gaussian; it is off unless
    requested.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be (batch, C>=2), got {logits.shape}")
    labels = _check_labels(labels, logits.shape[1])
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(len(labels)), labels]
    if clip is not None:
        if clip <= 0:
            raise ConfigError("clip bound must be positive")
        losses = np.minimum(losses, clip)
    return float(losses.mean())


def _loss_deltas(net, logits, labels, clip):
    """Per-sample dloss/dlogits rows (no batch averaging).

    Samples whose (unclipped) loss reaches the clip bound contribute a
    constant to the clipped loss, hence a zero row.
    """
    probs = softmax(logits)
    labels = _check_labels(labels, net.num_classes)
    deltas = probs.copy()
    deltas[np.arange(len(labels)), labels] -= 1.0
    if clip is not None:
        z = logits - logits.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        losses = -log_probs[np.arange(len(labels)), labels]
        deltas[losses >= clip] = 0.0
    return deltas


def _backward_mean(net, layers, acts, hidden, masks, deltas, dropout_rate=0.0):
    """Gradient of sum_b <deltas_b, logits_b> w.r.t. the flat parameters."""
    grads = [None] * len(layers)
    d = deltas
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        a_in = acts[l]
        gw = a_in.T @ d
        gb = d.sum(axis=0)
        grads[l] = (gw, gb)
        if l > 0:
            d = d @ w.T
            if dropout_rate and masks[l - 1] is not None:
                d = d * masks[l - 1] / (1.0 - dropout_rate)
            d = d * _act_deriv(net.activation, hidden[l - 1])
    return pack_params(net, grads)


def loss_and_grad(
    net: NetworkSpec,
    params: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    clip: float | None = None,
    sample_weights: np.ndarray | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact analytic gradient.

    ``sample_weights`` reweights both loss and gradient as
    (1/B) sum_b w_b * loss_b; dropout, when requested, uses the same masks in
    the forward and backward pass so the gradient matches the realized loss.
    """
    logits, acts, hidden, masks = _forward_pass(net, params, inputs, dropout_rate, rng)
    labels = _check_labels(labels, net.num_classes)
    batch = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(batch), labels]
    if clip is not None:
        if clip <= 0:
            raise ConfigError("clip bound must be positive")
        losses = np.minimum(losses, clip)
    deltas = _loss_deltas(net, logits, labels, clip)
    if sample_weights is not None:
        sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if sample_weights.shape != (batch,):
            raise ShapeError("sample_weights must match the batch size")
        losses = losses * sample_weights
        deltas = deltas * sample_weights[:, None]
    loss = float(losses.mean())
    layers = unpack_params(net, params)
    grad = _backward_mean(net, layers, acts, hidden, masks, deltas / batch, dropout_rate)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return loss, grad


def _backward_per_sample(net, layers, acts, deltas):
    """Per-sample parameter gradients for arbitrary per-sample logit deltas.

    Returns a (batch x D) matrix; row b is the gradient of <deltas_b, logits_b>
    with respect to the flat parameters.
    """
    batch = deltas.shape[0]
    out = np.empty((batch, sum(w.size + b.size for w, b in layers)))
    d = deltas
    # fill from the last layer backwards, tracking the slice of each layer
    offsets = []
    pos = 0
    for w, b in layers:
        offsets.append((pos, pos + w.size, pos + w.size + b.size))
        pos = offsets[-1][2]
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        a_in = acts[l]
        gw = np.einsum("bi,bo->bio", a_in, d).reshape(batch, -1)
        start, bias_start, end = offsets[l]
        out[:, start:bias_start] = gw
        out[:, bias_start:end] = d
        if l > 0:
            d = (d @ w.T) * _act_deriv(net.activation, acts[l])
    return out


def per_sample_grads(
    net: NetworkSpec,
    params: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    clip: float | None = None,
) -> np.ndarray:
    """Matrix (batch x D) whose row b is the gradient of sample b's loss."""
    logits, acts, _, _ = _forward_pass(net, params, inputs)
    deltas = _loss_deltas(net, logits, labels, clip)
    return _backward_per_sample(net, unpack_params(net, params), acts, deltas)


def logits_jacobian(net: NetworkSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Jacobian of the logits w.r.t. the parameters, shape (batch, C, D)."""
    logits, acts, _, _ = _forward_pass(net, params, inputs)
    batch, classes = logits.shape
    layers = unpack_params(net, params)
    jac = np.empty((batch, classes, net.num_params))
    for c in range(classes):
        deltas = np.zeros_like(logits)
        deltas[:, c] = 1.0
        jac[:, c, :] = _backward_per_sample(net, layers, acts, deltas)
    return jac


def apply_dropout(
    activations: np.ndarray,
    rate: float,
    rng: np.random.Generator,
    return_mask: bool = False,
):
    """Inverted dropout: kept units are rescaled by 1/(1-rate).

    The expectation of the output equals the input, so no correction is
    needed at evaluation time.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        out = np.asarray(activations, dtype=np.float64)
        return (out, None) if return_mask else out
    mask = (rng.random(np.shape(activations)) >= rate).astype(np.float64)
    out = np.asarray(activations, dtype=np.float64) * mask / (1.0 - rate)
    return (out, mask) if return_mask else out


def accuracy(net: NetworkSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions matching labels; ties go to the lowest class."""
    inputs = np.asarray(inputs)
    if inputs.shape[0] == 0:
        raise ShapeError("accuracy of an empty dataset is undefined")
    logits = forward(net, params, inputs)
    preds = np.argmax(logits, axis=1)  # np.argmax returns the first (lowest) max index
    return float(np.mean(preds == np.asarray(labels)))


@dataclass
class OptimizerState:
    """State for plain SGD or Adam over the flat parameter vector."""

    kind: str
    learning_rate: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")


def optimizer_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    """One parameter update; SGD is exactly params - lr * grad."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError("gradient shape does not match parameters")
    state.step += 1
    if state.kind == "sgd":
        return params - state.learning_rate * grad, state
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps), state
