"""Small dense-network engine: forward pass, two-exit backprop, SGD.

Everything runs in float64. A model is a flat list of layers; dense layers
own a ``weight`` of shape (out_dim, in_dim) and a ``bias`` of shape
(out_dim,). Inputs are either a single vector or a 2-D batch with one
sample per row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")

GradientSet = list  # list[np.ndarray], one block per entry of LayeredModel.params()


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """A non-finite value showed up during training."""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense layer weight {self.weight.shape} does not match bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NumericalError("dense layer has non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]


@dataclass
class Activation:
    fn: str = "relu"

    def __post_init__(self):
        if self.fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.fn!r}")

    def params(self) -> list[np.ndarray]:
        return []


Layer = Dense | Activation


class LayeredModel:
    """Sequential stack of dense and activation layers."""

    def __init__(self, layers: Sequence[Layer], input_dim: int | None = None):
        self.layers = list(layers)
        dense = [l for l in self.layers if isinstance(l, Dense)]
        if input_dim is None:
            if not dense:
                raise ShapeError("input_dim is required for a model without dense layers")
            input_dim = dense[0].in_dim
        dim = input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim != dim:
                    raise ShapeError(f"layer {i} expects input dim {layer.in_dim}, got {dim}")
                dim = layer.out_dim
        self.input_dim = int(input_dim)
        self.output_dim = int(dim)

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        return (
            f"LayeredModel(layers={len(self.layers)}, {self.input_dim}->{self.output_dim}, "
            f"params={self.parameter_count})"
        )

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "LayeredModel":
        return self.with_params([p.copy() for p in self.params()])

    def with_params(self, blocks: Sequence[np.ndarray]) -> "LayeredModel":
        """New model with the same structure and the given parameter blocks."""
        blocks = list(blocks)
        if len(blocks) != len(self.params()):
            raise ShapeError(f"expected {len(self.params())} parameter blocks, got {len(blocks)}")
        it = iter(blocks)
        layers: list[Layer] = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                w, b = next(it), next(it)
                if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                    raise ShapeError("parameter block shape mismatch")
                layers.append(Dense(w, b))
            else:
                layers.append(Activation(layer.fn))
        return LayeredModel(layers, self.input_dim)

    def slice(self, start: int, stop: int | None = None) -> "LayeredModel":
        layers = self.layers[start:stop]
        dim = self.input_dim
        for layer in self.layers[:start]:
            if isinstance(layer, Dense):
                dim = layer.out_dim
        return LayeredModel([_clone_layer(l) for l in layers], dim)

    def __add__(self, other: "LayeredModel") -> "LayeredModel":
        if self.output_dim != other.input_dim:
            raise ShapeError(f"cannot chain {self.output_dim} -> {other.input_dim}")
        return LayeredModel(
            [_clone_layer(l) for l in self.layers + other.layers], self.input_dim
        )

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append(
                    {
                        "kind": "dense",
                        "in_dim": layer.in_dim,
                        "out_dim": layer.out_dim,
                        "weight": layer.weight.ravel().tolist(),
                        "bias": layer.bias.tolist(),
                    }
                )
            else:
                layers.append({"kind": "activation", "fn": layer.fn})
        return {"input_dim": self.input_dim, "output_dim": self.output_dim, "layers": layers}

    @classmethod
    def from_dict(cls, doc: dict) -> "LayeredModel":
        layers: list[Layer] = []
        for entry in doc["layers"]:
            if entry["kind"] == "dense":
                w = np.array(entry["weight"], dtype=np.float64).reshape(
                    entry["out_dim"], entry["in_dim"]
                )
                layers.append(Dense(w, np.array(entry["bias"], dtype=np.float64)))
            elif entry["kind"] == "activation":
                layers.append(Activation(entry["fn"]))
            else:
                raise ValueError(f"unknown layer kind {entry['kind']!r}")
        model = cls(layers, doc["input_dim"])
        if model.output_dim != doc["output_dim"]:
            raise ShapeError("checkpoint output_dim disagrees with its layers")
        return model

    def to_json(self) -> str:
        # json writes floats with repr(), which round-trips float64 exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LayeredModel":
        return cls.from_dict(json.loads(text))


def _clone_layer(layer: Layer) -> Layer:
    if isinstance(layer, Dense):
        return Dense(layer.weight.copy(), layer.bias.copy())
    return Activation(layer.fn)


def init_mlp(dims: Sequence[int], rng: np.random.Generator, activation: str = "relu") -> LayeredModel:
    """Dense stack ``dims[0] -> ... -> dims[-1]`` with activations between dense layers.

    Weights are uniform in +-sqrt(6/(in+out)), drawn layer by layer in order;
    biases start at zero.
    """
    layers: list[Layer] = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (d_in + d_out))
        layers.append(Dense(rng.uniform(-limit, limit, size=(d_out, d_in)), np.zeros(d_out)))
        if i < len(dims) - 2:
            layers.append(Activation(activation))
    return LayeredModel(layers, dims[0])


# -- forward / backward ---------------------------------------------------

def _as_batch(model: LayeredModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match model input_dim {model.input_dim}")
    return x, single


def _forward_cached(model: LayeredModel, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for layer in model.layers:
        a = acts[-1]
        if isinstance(layer, Dense):
            acts.append(a @ layer.weight.T + layer.bias)
        elif layer.fn == "relu":
            acts.append(np.maximum(a, 0.0))
        else:
            acts.append(a)
    return acts


def _backward(model: LayeredModel, acts: list[np.ndarray], dout: np.ndarray, need_input_grad: bool = True):
    grads: list[np.ndarray] = []
    d = dout
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        a_in = acts[i]
        if isinstance(layer, Dense):
            grads.append(d.sum(axis=0))
            grads.append(d.T @ a_in)
            if i > 0 or need_input_grad:
                d = d @ layer.weight
        elif layer.fn == "relu":
            d = d * (a_in > 0.0)
    grads.reverse()
    return grads, d


def forward(model: LayeredModel, x) -> np.ndarray:
    """Output activation for one sample (1-D) or a batch (2-D, rows are samples)."""
    batch, single = _as_batch(model, x)
    out = _forward_cached(model, batch)[-1]
    return out[0] if single else out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Stabilized softmax and cross-entropy.

    Accepts a single logit vector with an int label, or a batch of logits
    with an int array of labels (then the loss is per sample).
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label)
    n_classes = z.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    if z.ndim == 1:
        return float(-log_probs[int(labels)]), probs
    return -log_probs[np.arange(z.shape[0]), labels], probs


class MultiExitGrads(NamedTuple):
    phi: GradientSet
    h: GradientSet
    theta: GradientSet
    loss_client: float
    loss_server: float
    objective: float


def _check_finite(blocks, what: str, context: dict):
    for g in blocks:
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite {what}", **context)


def backward_multi_exit(
    phi: LayeredModel,
    h: LayeredModel,
    theta: LayeredModel,
    x,
    y,
    gamma: float,
    context: dict | None = None,
    weights=None,
) -> MultiExitGrads:
    """Exact gradients of ``gamma * loss_client + (1 - gamma) * loss_server``.

    Both losses are batch means of cross-entropy; the client exit is
    ``h(phi(x))`` and the server exit is ``theta(phi(x))``. The phi gradient
    collects both contributions. ``weights`` replaces the uniform 1/n sample
    weights of the batch mean.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    x, _ = _as_batch(phi, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.shape[0] != n:
        raise ShapeError(f"{n} inputs but {y.shape[0]} labels")
    context = context or {}

    phi_acts = _forward_cached(phi, x)
    feat = phi_acts[-1]
    h_acts = _forward_cached(h, feat)
    th_acts = _forward_cached(theta, feat)

    try:
        loss_c, p_c = softmax_cross_entropy(h_acts[-1], y)
        loss_s, p_s = softmax_cross_entropy(th_acts[-1], y)
    except NumericalError as err:
        raise NumericalError("non-finite logits", **context) from err
    onehot = np.zeros_like(p_c)
    onehot[np.arange(n), y] = 1.0
    if weights is None:
        d_c = (p_c - onehot) * (gamma / n)
        d_s = (p_s - onehot) * ((1.0 - gamma) / n)
        l_c = float(loss_c.mean())
        l_s = float(loss_s.mean())
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        d_c = (p_c - onehot) * (gamma * w)
        d_s = (p_s - onehot) * ((1.0 - gamma) * w)
        l_c = float(loss_c @ w[:, 0])
        l_s = float(loss_s @ w[:, 0])

    g_h, dfeat_c = _backward(h, h_acts, d_c)
    g_th, dfeat_s = _backward(theta, th_acts, d_s)
    g_phi, _ = _backward(phi, phi_acts, dfeat_c + dfeat_s, need_input_grad=False)
    obj = gamma * l_c + (1.0 - gamma) * l_s
    if not math.isfinite(obj):
        raise NumericalError("non-finite loss", **context)
    for blocks, name in ((g_phi, "phi gradient"), (g_h, "h gradient"), (g_th, "theta gradient")):
        _check_finite(blocks, name, context)
    return MultiExitGrads(g_phi, g_h, g_th, l_c, l_s, obj)


def backward_single_exit(
    model: LayeredModel, x, y, context: dict | None = None, weights=None
) -> tuple[GradientSet, float]:
    """Gradient of the mean cross-entropy of a plain (single-exit) model."""
    x, _ = _as_batch(model, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts = _forward_cached(model, x)
    loss, p = softmax_cross_entropy(acts[-1], y)
    p[np.arange(n), y] -= 1.0
    if weights is None:
        grads, _ = _backward(model, acts, p * (1.0 / n), need_input_grad=False)
        mean_loss = float(loss.mean())
    else:
        w = np.asarray(weights, dtype=np.float64)
        grads, _ = _backward(model, acts, p * w[:, None], need_input_grad=False)
        mean_loss = float(loss @ w)
    if not math.isfinite(mean_loss):
        raise NumericalError("non-finite loss", **(context or {}))
    _check_finite(grads, "gradient", context or {})
    return grads, mean_loss


def sgd_step(model: LayeredModel, grads: GradientSet, lr: float) -> LayeredModel:
    """Return a new model with every parameter ``p`` replaced by ``p - lr * g``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = model.params()
    if len(grads) != len(params) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("gradient set is not congruent with the model")
    return model.with_params([p - lr * g for p, g in zip(params, grads)])


def grad_norm_sq(*grad_sets: GradientSet) -> float:
    return float(sum(np.sum(g * g) for gs in grad_sets for g in gs))
