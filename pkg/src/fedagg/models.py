"""Differentiable models: linear softmax classifier and a one-hidden-layer MLP.

Parameters are handled as flat float64 vectors.  Layout per layer is
row-major ``[weights | bias]``: for a layer mapping ``a`` inputs to ``b``
outputs the weight matrix of shape ``(a, b)`` is flattened C-order and the
``b`` bias entries follow.  Layers are concatenated input-to-output, so a
checkpoint written by one process can be reloaded anywhere.

A third model kind ``"quadratic"`` (F(w) = mean_j 0.5*||w - a_j||^2 over the
batch rows a_j) exists purely as a test fixture with a closed-form gradient;
it is rejected by the experiment config parser.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericDivergenceError

LINEAR_SOFTMAX = "linear-softmax"
MLP_1HIDDEN = "mlp-1hidden"
QUADRATIC = "quadratic"

_KINDS = (LINEAR_SOFTMAX, MLP_1HIDDEN, QUADRATIC)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractError(f"unknown model kind: {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ContractError("input_dim and num_classes must be >= 1")
        if self.kind == MLP_1HIDDEN and self.hidden_dim < 1:
            raise ContractError("mlp-1hidden requires hidden_dim >= 1")

    @property
    def param_count(self):
        if self.kind == LINEAR_SOFTMAX:
            return (self.input_dim + 1) * self.num_classes
        if self.kind == MLP_1HIDDEN:
            return (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes
        return self.input_dim


@dataclass
class Batch:
    features: np.ndarray  # (m, input_dim) float64
    labels: np.ndarray    # (m,) int64, each in [0, num_classes)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def size(self):
        return self.features.shape[0]


def _check_inputs(spec, w, batch):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.param_count:
        raise ContractError(
            f"parameter vector has length {w.shape}, expected ({spec.param_count},)")
    if batch.size < 1:
        raise ContractError("batch must contain at least one sample")
    if batch.features.ndim != 2 or batch.features.shape[1] != spec.input_dim:
        raise ContractError(
            f"feature matrix shape {batch.features.shape} does not match input_dim {spec.input_dim}")
    if spec.kind != QUADRATIC:
        if batch.labels.shape != (batch.size,):
            raise ContractError("labels must be a vector matching the batch size")
        if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
            raise ContractError("labels out of range [0, num_classes)")
    if not np.all(np.isfinite(batch.features)):
        raise ContractError("batch features contain non-finite entries")
    if not np.all(np.isfinite(w)):
        raise NumericDivergenceError("parameter vector contains non-finite entries")
    return w


def unpack_linear(spec, w):
    """Split a flat vector into (W, b) for the linear softmax model."""
    d, k = spec.input_dim, spec.num_classes
    return w[: d * k].reshape(d, k), w[d * k:]


def unpack_mlp(spec, w):
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    off = 0
    w1 = w[off:off + d * h].reshape(d, h); off += d * h
    b1 = w[off:off + h]; off += h
    w2 = w[off:off + h * k].reshape(h, k); off += h * k
    b2 = w[off:off + k]
    return w1, b1, w2, b2


def _softmax_rows(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), shifted


def scores(spec, w, features):
    """Class scores (m, K) for classifier kinds."""
    if spec.kind == LINEAR_SOFTMAX:
        wmat, b = unpack_linear(spec, w)
        return features @ wmat + b
    if spec.kind == MLP_1HIDDEN:
        w1, b1, w2, b2 = unpack_mlp(spec, w)
        return np.tanh(features @ w1 + b1) @ w2 + b2
    raise ContractError(f"model kind {spec.kind!r} has no class scores")


def loss(spec, w, batch):
    """Mean loss over the batch: cross-entropy for classifiers, 0.5*||w-a||^2 for quadratic."""
    w = _check_inputs(spec, w, batch)
    if spec.kind == QUADRATIC:
        diff = w[None, :] - batch.features
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))
    s = scores(spec, w, batch.features)
    shifted = s - s.max(axis=1, keepdims=True)
    m = batch.size
    logz = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(logz - shifted[np.arange(m), batch.labels]))
    if not np.isfinite(value):
        raise NumericDivergenceError("loss evaluated to a non-finite value")
    return value


def gradient(spec, w, batch):
    """Analytic gradient of ``loss`` with respect to the flat parameter vector."""
    w = _check_inputs(spec, w, batch)
    m = batch.size
    if spec.kind == QUADRATIC:
        return w - batch.features.mean(axis=0)
    if spec.kind == LINEAR_SOFTMAX:
        s = scores(spec, w, batch.features)
        probs, _ = _softmax_rows(s)
        probs[np.arange(m), batch.labels] -= 1.0
        probs /= m
        grad_w = batch.features.T @ probs
        grad_b = probs.sum(axis=0)
        out = np.concatenate([grad_w.ravel(), grad_b])
    else:
        w1, b1, w2, b2 = unpack_mlp(spec, w)
        pre = batch.features @ w1 + b1
        hid = np.tanh(pre)
        probs, _ = _softmax_rows(hid @ w2 + b2)
        probs[np.arange(m), batch.labels] -= 1.0
        probs /= m
        grad_w2 = hid.T @ probs
        grad_b2 = probs.sum(axis=0)
        back = (probs @ w2.T) * (1.0 - hid * hid)
        grad_w1 = batch.features.T @ back
        grad_b1 = back.sum(axis=0)
        out = np.concatenate([grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2])
    if not np.all(np.isfinite(out)):
        raise NumericDivergenceError("gradient contains non-finite entries")
    return out


def finite_diff_gradient(spec, w, batch):
    """Central-difference approximation of the loss gradient, coordinate-wise.

    Step per coordinate: h_k = 1e-6 * (1 + |w_k|).  Test oracle; O(d) loss
    evaluations, intended for small instances only.
    """
    w = _check_inputs(spec, w, batch)
    out = np.empty_like(w)
    for k in range(w.shape[0]):
        h = 1e-6 * (1.0 + abs(w[k]))
        wp = w.copy(); wp[k] += h
        wm = w.copy(); wm[k] -= h
        out[k] = (loss(spec, wp, batch) - loss(spec, wm, batch)) / (2.0 * h)
    return out


def sgd_step(w, g, eta):
    """One gradient step: w - eta * g."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ContractError(f"shape mismatch: w {w.shape} vs g {g.shape}")
    if not np.isfinite(eta):
        raise ContractError("eta must be finite")
    if eta == 0.0:
        return w.copy()
    return w - eta * g


def init_params(spec, seed=0):
    """Initial parameter vector: zeros for linear/quadratic, seeded small normal for the MLP."""
    if spec.kind != MLP_1HIDDEN:
        return np.zeros(spec.param_count)
    rng = np.random.default_rng([int(seed), 97])
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=d * h)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=h * k)
    return np.concatenate([w1, np.zeros(h), w2, np.zeros(k)])
