"""Models, cross-entropy loss and gradients, one-bit quantization and sign descent.

Parameters live in one flat float64 vector. Layouts:

* logistic: ``W`` of shape ``(f + 1, C)``, last row is the bias; d = (f+1)*C
* mlp: ``W1`` of shape ``(f + 1, H)`` followed by ``W2`` of shape ``(H + 1, C)``,
  tanh hidden layer; d = (f+1)*H + (H+1)*C
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .data import Dataset
from .rng import stream

MODEL_KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    kind: str
    f: int
    C: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (param_dim(self.kind, self.f, self.C, self.hidden),):
            raise ValueError(
                f"{self.kind} params with f={self.f}, C={self.C}, H={self.hidden} "
                f"need d={param_dim(self.kind, self.f, self.C, self.hidden)}, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values, self.kind, self.f, self.C, self.hidden)


def param_dim(kind: str, f: int, C: int, hidden: int = 0) -> int:
    if kind == "logistic":
        return (f + 1) * C
    if kind == "mlp":
        return (f + 1) * hidden + (hidden + 1) * C
    raise ValueError(f"unknown model kind {kind!r}")


def init_params(kind: str, f: int, C: int, hidden: int = 32, seed: int = 0) -> ModelParams:
    """Zeros for logistic regression; U(-1/sqrt(f), 1/sqrt(f)) entries for the MLP."""
    if kind == "logistic":
        return ModelParams(np.zeros((f + 1) * C), kind, f, C)
    if kind == "mlp":
        if hidden < 1:
            raise ValueError("mlp needs hidden >= 1")
        bound = 1.0 / np.sqrt(f)
        d = param_dim(kind, f, C, hidden)
        return ModelParams(stream(seed, "init").uniform(-bound, bound, d), kind, f, C, hidden)
    raise ValueError(f"unknown model kind {kind!r}")


def _split(params: ModelParams):
    f, C, H = params.f, params.C, params.hidden
    v = params.values
    if params.kind == "logistic":
        return (v.reshape(f + 1, C),)
    cut = (f + 1) * H
    return v[:cut].reshape(f + 1, H), v[cut:].reshape(H + 1, C)


def _forward(params: ModelParams, X: np.ndarray):
    """Return logits and the hidden activations (None for logistic)."""
    if params.kind == "logistic":
        (W,) = _split(params)
        return X @ W[:-1] + W[-1], None
    W1, W2 = _split(params)
    hid = np.tanh(X @ W1[:-1] + W1[-1])
    return hid @ W2[:-1] + W2[-1], hid


def _check_indices(dataset: Dataset, indices) -> np.ndarray:
    if indices is None:
        return np.arange(len(dataset))
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("index list must be non-empty")
    return idx


def loss(params: ModelParams, dataset: Dataset, indices=None) -> float:
    """Mean cross-entropy over ``dataset[indices]`` (the full dataset when ``indices`` is None)."""
    idx = _check_indices(dataset, indices)
    logits, _ = _forward(params, dataset.features[idx])
    logp = log_softmax(logits, axis=1)
    return float(-logp[np.arange(idx.size), dataset.labels[idx]].mean())


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _residual(params, dataset, idx):
    """Inputs, hidden activations and softmax(logits) - onehot(labels) for ``dataset[idx]``."""
    X = dataset.features[idx]
    logits, hid = _forward(params, X)
    resid = _softmax(logits)
    np.put_along_axis(resid, dataset.labels[idx][..., None], np.take_along_axis(
        resid, dataset.labels[idx][..., None], axis=-1) - 1.0, axis=-1)
    return X, hid, resid


def gradient(params: ModelParams, dataset: Dataset, indices=None) -> np.ndarray:
    """Analytic gradient of :func:`loss` over the same samples."""
    idx = _check_indices(dataset, indices)
    X, hid, resid = _residual(params, dataset, idx)
    resid /= idx.size
    if params.kind == "logistic":
        return np.vstack([X.T @ resid, resid.sum(axis=0)]).ravel()
    _, W2 = _split(params)
    dW2 = np.vstack([hid.T @ resid, resid.sum(axis=0)])
    dz = (resid @ W2[:-1].T) * (1.0 - hid**2)
    dW1 = np.vstack([X.T @ dz, dz.sum(axis=0)])
    return np.concatenate([dW1.ravel(), dW2.ravel()])


def batch_gradients(params: ModelParams, dataset: Dataset, batches) -> np.ndarray:
    """Row b is :func:`gradient` over the mini-batch ``batches[b]``; batches is an (s, A) index array."""
    idx = np.asarray(batches, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[1] == 0:
        raise ValueError(f"batches must be a non-empty (s, A) array, got shape {idx.shape}")
    s, A = idx.shape
    X, hid, resid = _residual(params, dataset, idx)
    resid /= A
    if params.kind == "logistic":
        dW = np.concatenate([np.einsum("saf,sac->sfc", X, resid), resid.sum(axis=1)[:, None]], axis=1)
        return dW.reshape(s, -1)
    _, W2 = _split(params)
    dW2 = np.concatenate([np.einsum("sah,sac->shc", hid, resid), resid.sum(axis=1)[:, None]], axis=1)
    dz = (resid @ W2[:-1].T) * (1.0 - hid**2)
    dW1 = np.concatenate([np.einsum("saf,sah->sfh", X, dz), dz.sum(axis=1)[:, None]], axis=1)
    return np.hstack([dW1.reshape(s, -1), dW2.reshape(s, -1)])


def per_sample_gradients(params: ModelParams, dataset: Dataset, indices=None) -> np.ndarray:
    """Row n is the gradient of the loss on sample ``indices[n]`` alone."""
    idx = _check_indices(dataset, indices)
    X, hid, resid = _residual(params, dataset, idx)
    n = idx.size
    X1 = np.hstack([X, np.ones((n, 1))])
    if params.kind == "logistic":
        return np.einsum("ni,nc->nic", X1, resid).reshape(n, -1)
    _, W2 = _split(params)
    H1 = np.hstack([hid, np.ones((n, 1))])
    dW2 = np.einsum("nh,nc->nhc", H1, resid).reshape(n, -1)
    dz = (resid @ W2[:-1].T) * (1.0 - hid**2)
    dW1 = np.einsum("ni,nh->nih", X1, dz).reshape(n, -1)
    return np.hstack([dW1, dW2])


def sign_quantize(g: np.ndarray) -> np.ndarray:
    """Element-wise sign as int8, with sign(0) = +1."""
    g = np.asarray(g)
    return np.where(g < 0, -1, 1).astype(np.int8)


def sgd_step(params: ModelParams, direction: np.ndarray, eta: float) -> ModelParams:
    """omega <- omega - eta * direction."""
    direction = np.asarray(direction)
    if direction.shape != params.values.shape:
        raise ValueError(f"direction shape {direction.shape} != params shape {params.values.shape}")
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    return params.with_values(params.values - eta * direction.astype(np.float64))


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    logits, _ = _forward(params, np.asarray(features, dtype=np.float64))
    # argmax returns the first maximum, i.e. ties go to the smallest class index
    return np.argmax(logits, axis=1)


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    return float(np.mean(predict(params, dataset.features) == dataset.labels))
