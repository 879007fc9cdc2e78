"""Small differentiable models with per-sample gradients.

The layer vocabulary is fixed (dense layers, ReLU between them, softmax
cross-entropy or squared error on top), so differentiation is hand-written
reverse mode rather than a general autodiff engine. Parameters live in one
flat float64 vector; per-layer weights/biases are views into it.

Conventions: ReLU subgradient at exactly 0 is 0; for the mse loss the target
is the one-hot label for multi-output models and the raw label value for
single-output models (which makes 1-parameter regression oracles possible).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ParameterError
from .numkit import RngState

CROSS_ENTROPY = "cross-entropy"
MSE = "mse"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: widths[0]=F inputs through widths[-1]=C outputs."""

    widths: tuple
    activation: str = "relu"
    loss: str = CROSS_ENTROPY
    init: str = "uniform-fan-in"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ParameterError(f"bad widths {self.widths}")
        if self.activation != "relu":
            raise ParameterError(f"unsupported activation {self.activation!r}")
        if self.loss not in (CROSS_ENTROPY, MSE):
            raise ParameterError(f"unsupported loss {self.loss!r}")
        if self.init != "uniform-fan-in":
            raise ParameterError(f"unsupported init {self.init!r}")

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        d = 0
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            d += n_in * n_out + (n_out if self.bias else 0)
        return d

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation,
                "loss": self.loss, "init": self.init, "bias": self.bias}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(tuple(d["widths"]), d.get("activation", "relu"),
                         d.get("loss", CROSS_ENTROPY), d.get("init", "uniform-fan-in"),
                         d.get("bias", True))


@dataclass
class ParamVector:
    """Flat parameter state tied to the spec that gives it shape."""

    flat: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.shape[0] != self.spec.n_params:
            raise DimensionError(
                f"param vector length {self.flat.shape[0]} != spec d={self.spec.n_params}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.spec)


def _layers(spec: ModelSpec, flat: np.ndarray):
    """Yield (W view (n_in,n_out), b view or None) per layer."""
    out = []
    offset = 0
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        w = flat[offset:offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = None
        if spec.bias:
            b = flat[offset:offset + n_out]
            offset += n_out
        out.append((w, b))
    return out


def init_params(spec: ModelSpec, rng: RngState) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, deterministic in rng."""
    g = rng.generator()
    flat = np.empty(spec.n_params)
    offset = 0
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / np.sqrt(n_in)
        size = n_in * n_out + (n_out if spec.bias else 0)
        flat[offset:offset + size] = g.uniform(-bound, bound, size)
        offset += size
    return ParamVector(flat, spec)


def _forward(params: ParamVector, x: np.ndarray):
    """Return (outputs (B,C), per-layer inputs, per-layer pre-activations)."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != params.spec.n_inputs:
        raise DimensionError(f"input width {h.shape[1]} != {params.spec.n_inputs}")
    layers = _layers(params.spec, params.flat)
    inputs, preacts = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(layers):
            inputs.append(h)
            z = h @ w
            if b is not None:
                z = z + b
            preacts.append(z)
            h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite forward activations")
    return h, inputs, preacts


def predict(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Raw model outputs (logits for cross-entropy models)."""
    out, _, _ = _forward(params, x)
    return out


def accuracy(params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    out = predict(params, x)
    return float(np.mean(np.argmax(out, axis=1) == np.asarray(y)))


def _targets(spec: ModelSpec, y: np.ndarray, batch: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if spec.loss == MSE and spec.n_outputs == 1:
        return y.astype(np.float64)[:, None]
    t = np.zeros((batch, spec.n_outputs))
    t[np.arange(batch), y.astype(int)] = 1.0
    return t


def _loss_and_delta(spec: ModelSpec, out: np.ndarray, y: np.ndarray):
    """Per-sample losses (B,) and d(loss_b)/d(out_b) (B,C)."""
    b = out.shape[0]
    if spec.loss == CROSS_ENTROPY:
        zmax = out.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(out - zmax).sum(axis=1))
        yi = np.asarray(y).astype(int).reshape(-1)
        losses = lse - out[np.arange(b), yi]
        p = np.exp(out - lse[:, None])
        delta = p.copy()
        delta[np.arange(b), yi] -= 1.0
        return losses, delta
    t = _targets(spec, y, b)
    diff = out - t
    return 0.5 * (diff * diff).sum(axis=1), diff


def per_sample_losses(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out, _, _ = _forward(params, x)
    losses, _ = _loss_and_delta(params.spec, out, y)
    return losses


def batch_loss(params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-sample loss over a non-empty batch."""
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ParameterError("batch_loss of an empty batch")
    return float(per_sample_losses(params, x, y).mean())


def per_sample_grads(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradients of each sample's loss w.r.t. the flat parameters, shape (B, d)."""
    spec = params.spec
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = x.shape[0]
    if b == 0:
        raise ParameterError("per_sample_grads of an empty batch")
    out, inputs, preacts = _forward(params, x)
    _, delta = _loss_and_delta(spec, out, y)

    layers = _layers(spec, params.flat)
    grads = np.empty((b, spec.n_params))
    # walk layers backwards, filling the flat slices in forward order offsets
    offsets = []
    offset = 0
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        offsets.append(offset)
        offset += n_in * n_out + (n_out if spec.bias else 0)

    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        n_in, n_out = w.shape
        o = offsets[i]
        grads[:, o:o + n_in * n_out] = np.einsum(
            "bi,bo->bio", inputs[i], delta).reshape(b, n_in * n_out)
        if spec.bias:
            grads[:, o + n_in * n_out:o + n_in * n_out + n_out] = delta
        if i > 0:
            delta = (delta @ w.T) * (preacts[i - 1] > 0)
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    return grads


def per_sample_grad(params: ParamVector, x: np.ndarray, y) -> np.ndarray:
    """Gradient of a single sample's loss, shape (d,)."""
    return per_sample_grads(params, np.atleast_2d(x), np.atleast_1d(y))[0]


def batch_grad(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean of the per-sample gradients (the SGD update direction)."""
    return per_sample_grads(params, x, y).mean(axis=0)


def hessian_vector_product(params: ParamVector, x: np.ndarray, y: np.ndarray,
                           v: np.ndarray) -> np.ndarray:
    """H v for the batch-mean loss, by central differences of analytic gradients.

    The perturbation has norm 1e-5 * (1 + ||theta||) regardless of ||v||, so
    scaling v scales the result exactly (same evaluation points, rescaled
    quotient); that keeps the product usable inside conjugate gradient.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != params.spec.n_params:
        raise DimensionError(f"v length {v.shape[0]} != d={params.spec.n_params}")
    vnorm = float(np.sqrt(np.dot(v, v)))
    if vnorm == 0.0:
        return np.zeros_like(v)
    if not np.isfinite(vnorm):
        raise NumericError("non-finite direction in hessian_vector_product")
    eps = 1e-5 * (1.0 + float(np.sqrt(np.dot(params.flat, params.flat)))) / vnorm
    plus = ParamVector(params.flat + eps * v, params.spec)
    minus = ParamVector(params.flat - eps * v, params.spec)
    return (batch_grad(plus, x, y) - batch_grad(minus, x, y)) / (2.0 * eps)


def save_params(params: ParamVector, path) -> None:
    """Raw little-endian float64 dump; pair with a ModelSpec sidecar for loading."""
    np.asarray(params.flat, dtype="<f8").tofile(path)


def load_params(path, spec: ModelSpec) -> ParamVector:
    flat = np.fromfile(path, dtype="<f8")
    return ParamVector(flat, spec)


def save_spec(spec: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_spec(path) -> ModelSpec:
    with open(path, encoding="utf-8") as f:
        return ModelSpec.from_dict(json.load(f))
