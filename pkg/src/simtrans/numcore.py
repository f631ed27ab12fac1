"""Dense numeric core: MLPs with hand-written backprop, SGD, losses, gradient checking.

Matrices are plain float64 numpy arrays, row-major, one sample per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-7
ACTIVATIONS = ("relu", "sigmoid", "identity")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise ShapeError(
                    f"layer {k} outputs {self.layers[k].out_dim} but layer {k + 1} "
                    f"expects {self.layers[k + 1].in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             hidden: str = "relu", output: str = "identity") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    layers = []
    n = len(sizes) - 1
    for k in range(n):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = output if k == n - 1 else hidden
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # Two-branch form avoids overflow in exp for large |z|.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Return ``[x, a_1, ..., a_L]``; the last entry is the network output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input dim {params.in_dim}")
    acts = [x]
    for layer in params.layers:
        z = acts[-1] @ layer.weight.T + layer.bias
        acts.append(_activate(z, layer.activation))
    return acts


def mlp_backward(params: MlpParams, activations: list[np.ndarray],
                 output_grad: np.ndarray, param_grads: bool = True
                 ) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``output_grad`` (dL/d output).

    Returns gradients in the order of :meth:`MlpParams.arrays` and dL/d input.
    With ``param_grads=False`` the parameter list is empty (input gradient only).
    """
    if len(activations) != len(params.layers) + 1:
        raise ShapeError("activations do not belong to these params")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != activations[-1].shape:
        raise ShapeError(f"output grad {g.shape} != output {activations[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        a_out, a_in = activations[k + 1], activations[k]
        if layer.activation == "relu":
            g = g * (a_out > 0)
        elif layer.activation == "sigmoid":
            g = g * a_out * (1.0 - a_out)
        if param_grads:
            grads[2 * k] = g.T @ a_in
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return (grads if param_grads else []), g


def binary_ce(score, label):
    """Elementwise binary cross-entropy and its derivative w.r.t. the score.

    Scores are clamped to ``[PROB_EPS, 1 - PROB_EPS]``; the derivative is taken
    of the clamped expression, so it is zero where the clamp is active.
    """
    score = np.asarray(score, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    p = np.clip(score, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(label * np.log(p) + (1.0 - label) * np.log(1.0 - p))
    grad = -label / p + (1.0 - label) / (1.0 - p)
    grad = np.where((score < PROB_EPS) | (score > 1.0 - PROB_EPS), 0.0, grad)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``-log softmax(logits)[y]`` and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise IndexError(f"labels must lie in [0, {n_cls})")
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return losses, grad


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: SgdState) -> None:
    """In-place classic momentum SGD: ``v = mu*v + g + wd*p``; ``p -= lr*v``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError("optimizer state belongs to a different parameter list")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        if state.learning_rate:
            p -= state.learning_rate * v


def grad_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
               analytic: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn`` is re-evaluated after perturbing each entry of ``params`` in place.
    """
    worst = 0.0
    for p, a in zip(params, analytic):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != p.shape:
            raise ShapeError(f"analytic grad {a.shape} != param {p.shape}")
        flat = p.reshape(-1)
        a_flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn()
            flat[idx] = orig - eps
            down = loss_fn()
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("loss is not finite during gradient check")
            num = (up - down) / (2 * eps)
            err = abs(a_flat[idx] - num) / max(abs(a_flat[idx]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
