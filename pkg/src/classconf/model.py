"""Small fully connected classifiers with hand-written backpropagation.

Parameters live in a :class:`ClassifierParams` value; every function here
takes one and (where it changes anything) returns a new one, so independent
runs never share mutable state.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .exceptions import ConfigError, DimensionError, DomainError, NumericError, PreconditionError


@dataclass
class ClassifierParams:
    """Weights and biases of a ReLU MLP (a linear model when there is one layer).

    ``layers[i]`` is ``(W, b)`` with ``W`` of shape ``(out, in)``.
    ``momentum`` mirrors ``layers`` and holds the SGD velocity buffers.
    """

    layers: List[Tuple[np.ndarray, np.ndarray]]
    momentum: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise PreconditionError("a classifier needs at least one layer")
        for (w, b), (w_next, _) in zip(self.layers[:-1], self.layers[1:]):
            if w.shape[0] != w_next.shape[1]:
                raise DimensionError(
                    f"layer shapes do not chain: {w.shape} -> {w_next.shape}"
                )
        for w, b in self.layers:
            if b.shape != (w.shape[0],):
                raise DimensionError(f"bias shape {b.shape} does not match {w.shape}")
        if not self.momentum:
            self.momentum = [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers]

    @property
    def n_features(self):
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self):
        return self.layers[-1][0].shape[0]

    def copy(self):
        return ClassifierParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            momentum=[(w.copy(), b.copy()) for w, b in self.momentum],
        )

    def flat(self):
        """All weights and biases concatenated into one vector."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat(self, vector):
        """Copy of ``self`` whose parameters are read back from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        layers, pos = [], 0
        for w, b in self.layers:
            w_new = vector[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b_new = vector[pos:pos + b.size].copy()
            pos += b.size
            layers.append((w_new.copy(), b_new))
        if pos != vector.size:
            raise DimensionError("flat vector has the wrong length")
        return ClassifierParams(layers=layers, momentum=[(w.copy(), b.copy()) for w, b in self.momentum])


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD with (optionally Nesterov) momentum and a step-wise decay schedule.

    ``milestones`` are fractions of the total epoch budget; the learning rate
    is multiplied by ``decay`` once each milestone is reached.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    milestones: Tuple[float, ...] = (0.4, 0.6, 0.8)
    decay: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if not 0.0 < self.decay <= 1.0:
            raise DomainError("decay must lie in (0, 1]")
        ms = tuple(float(m) for m in self.milestones)
        if any(not 0.0 < m < 1.0 for m in ms) or any(a >= b for a, b in zip(ms[:-1], ms[1:])):
            raise DomainError("milestones must be strictly increasing fractions in (0, 1)")
        object.__setattr__(self, "milestones", ms)

    def lr_at(self, epoch, total_epochs):
        """Learning rate in effect during 0-based ``epoch``."""
        passed = sum(epoch >= m * total_epochs for m in self.milestones)
        return self.learning_rate * self.decay ** passed


def _uniform_layer(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def init_params(n_features, n_classes, hidden=(64,), seed=0):
    """Uniform(+-1/sqrt(fan_in)) initialisation of a ReLU MLP."""
    rng = np.random.default_rng(seed)
    sizes = [int(n_features), *[int(h) for h in hidden], int(n_classes)]
    layers = [_uniform_layer(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    return ClassifierParams(layers=layers)


def _forward_cache(params, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_features:
        raise DimensionError(
            f"expected inputs of shape (n, {params.n_features}), got {x.shape}"
        )
    activations = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        activations.append(h)
    return activations


def forward(params, inputs):
    """Logits of shape ``(n, K)``."""
    return _forward_cache(params, inputs)[-1]


def predict_proba(params, inputs):
    return softmax(forward(params, inputs), axis=1)


def backward(params, inputs, logit_grad, activations=None):
    """Gradients of a scalar loss w.r.t. the parameters given dL/dlogits."""
    if activations is None:
        activations = _forward_cache(params, inputs)
    delta = np.asarray(logit_grad, dtype=np.float64)
    if delta.shape != activations[-1].shape:
        raise DimensionError("logit gradient shape does not match the logits")
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        a_in = activations[i]
        grads[i] = (delta.T @ a_in, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w) * (a_in > 0.0)
    return grads


def classification_loss(logits, labels, loss_kind="cross_entropy", focal_gamma=3.0):
    """Mean classification loss and its gradient w.r.t. the logits.

    ``loss_kind`` is ``"cross_entropy"`` or ``"focal"``; the focal loss is
    ``-(1 - p_y) ** focal_gamma * log p_y``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    if n == 0:
        raise PreconditionError("empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(n)
    log_p = log_softmax(logits, axis=1)
    p = np.exp(log_p)
    log_py = log_p[rows, labels]
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    if loss_kind == "cross_entropy":
        loss = -log_py.mean()
        grad = (p - onehot) / n
        return loss, grad
    if loss_kind != "focal":
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    g = float(focal_gamma)
    if g < 0:
        raise DomainError("focal_gamma must be non-negative")
    py = p[rows, labels]
    one_minus = np.clip(1.0 - py, 0.0, None)
    weight = one_minus ** g
    loss = -(weight * log_py).mean()
    # dL/dp_y, per example
    if g == 0.0:
        dldp = -1.0 / py
    else:
        dldp = g * one_minus ** (g - 1.0) * log_py - weight / py
    # dp_y/dz_j = p_y (1[j=y] - p_j)
    grad = (dldp * py)[:, None] * (onehot - p) / n
    return loss, grad


def loss_and_grad(params, inputs, labels, loss_kind="cross_entropy", focal_gamma=3.0,
                  upstream=None):
    """Classification loss and parameter gradients.

    When ``upstream`` (a dL/dlogits array) is given the classification loss is
    skipped: the returned loss is ``nan`` and the gradients are the
    backpropagation of ``upstream``. This is how conformal losses, which are
    differentiated in logit space, reach the parameters.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise PreconditionError("empty batch")
    activations = _forward_cache(params, inputs)
    if upstream is not None:
        return float("nan"), backward(params, inputs, upstream, activations)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (inputs.shape[0],):
        raise DimensionError("labels must align with inputs")
    if labels.min() < 0 or labels.max() >= params.n_classes:
        raise PreconditionError("labels out of range")
    loss, dlogits = classification_loss(activations[-1], labels, loss_kind, focal_gamma)
    return loss, backward(params, inputs, dlogits, activations)


def sgd_step(params, gradients, config, epoch, total_epochs):
    """One SGD update with momentum; returns a new parameter value.

    Momentum follows the usual deep-learning convention: ``v <- mu v + g`` and
    the step is ``g + mu v`` with Nesterov, ``v`` otherwise.
    """
    if len(gradients) != len(params.layers):
        raise DimensionError("gradient list does not match the layers")
    lr = config.lr_at(epoch, total_epochs)
    mu = config.momentum
    layers, momentum = [], []
    for (w, b), (vw, vb), (gw, gb) in zip(params.layers, params.momentum, gradients):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise DimensionError("gradient shapes do not match parameters")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite gradient")
        if mu > 0:
            vw = mu * vw + gw
            vb = mu * vb + gb
            step_w = gw + mu * vw if config.nesterov else vw
            step_b = gb + mu * vb if config.nesterov else vb
        else:
            vw, vb = vw.copy(), vb.copy()
            step_w, step_b = gw, gb
        layers.append((w - lr * step_w, b - lr * step_b))
        momentum.append((vw, vb))
    return ClassifierParams(layers=layers, momentum=momentum)


def reinit_final_layer(params, seed):
    """Fresh uniform initialisation of the logit layer; other layers untouched."""
    rng = np.random.default_rng(seed)
    w_last, _ = params.layers[-1]
    new_last = _uniform_layer(rng, w_last.shape[1], w_last.shape[0])
    layers = [(w.copy(), b.copy()) for w, b in params.layers[:-1]] + [new_last]
    momentum = [(w.copy(), b.copy()) for w, b in params.momentum[:-1]]
    momentum.append((np.zeros_like(new_last[0]), np.zeros_like(new_last[1])))
    return ClassifierParams(layers=layers, momentum=momentum)


def flatten_grads(gradients):
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in gradients])
