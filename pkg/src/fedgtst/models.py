"""Small differentiable models on flat weight vectors.

Three model families share one interface: squared-loss linear regression,
softmax cross-entropy linear classifiers, and small MLP classifiers. All
operations are pure functions of (spec, weights, batch); weights live in a
single flat float64 vector so that federated averaging, finetuning splits,
and bound bookkeeping never need to know about internal structure.

The flat layout is always [feature-extractor block | classifier block], with
`split_index` marking the boundary. Linear models default to split 0 (the
whole vector is the classifier head, the feature map is the identity); MLPs
default to splitting in front of the last layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

LINEAR = "linear-regression"
LOGISTIC = "logistic-classifier"
MLP = "mlp"

_KINDS = (LINEAR, LOGISTIC, MLP)
_ACTIVATIONS = ("tanh", "relu")

# hvp modes
ANALYTIC = "analytic"
FINITE_DIFFERENCE = "finite-difference"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    kind: one of "linear-regression", "logistic-classifier", "mlp".
    input_dim: feature dimension m.
    num_classes: 1 for regression, >= 2 for classifiers.
    hidden: hidden layer widths (mlp only; () makes the mlp a bare
        softmax layer, useful as a convex reference point).
    activation: "tanh" or "relu" (mlp only).
    bias: include bias parameters in every layer.
    split_index: boundary between the frozen feature block and the
        classifier head in the flat weight vector. None picks the default
        for the kind (0 for linear models, last-layer boundary for mlp).
    """

    kind: str
    input_dim: int
    num_classes: int = 1
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    bias: bool = True
    split_index: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.kind == LINEAR:
            if self.num_classes != 1:
                raise ConfigError("linear-regression requires num_classes = 1")
        else:
            if self.num_classes < 2:
                raise ConfigError(f"{self.kind} requires num_classes >= 2")
        if self.kind == MLP:
            if self.activation not in _ACTIVATIONS:
                raise ConfigError(f"activation must be one of {_ACTIVATIONS}")
            if any(h < 1 for h in self.hidden):
                raise ConfigError("hidden layer widths must be >= 1")
        elif self.hidden:
            raise ConfigError(f"hidden layers only valid for mlp, not {self.kind}")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        split = self.split_index
        if split is None:
            split = self.default_split_index()
        if not 0 <= split <= self.total_dim:
            raise ConfigError(
                f"split_index {split} outside [0, {self.total_dim}]"
            )
        object.__setattr__(self, "split_index", split)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        if self.kind == MLP:
            return (self.input_dim, *self.hidden, self.num_classes)
        return (self.input_dim, self.num_classes)

    @property
    def total_dim(self) -> int:
        sizes = self.layer_sizes
        dim = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            dim += fan_out * fan_in + (fan_out if self.bias else 0)
        return dim

    def default_split_index(self) -> int:
        if self.kind == MLP:
            fan_in, fan_out = self.layer_sizes[-2], self.layer_sizes[-1]
            return self.total_dim - (fan_out * fan_in + (fan_out if self.bias else 0))
        return 0

    @property
    def is_classifier(self) -> bool:
        return self.kind != LINEAR

    @property
    def is_convex(self) -> bool:
        """True when the loss is convex in the weights (Assumption holds)."""
        return self.kind in (LINEAR, LOGISTIC)


@dataclass
class Batch:
    """A finite sample: features (n, m) and labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError("features must be a nonempty (n, m) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError("labels must be a vector of length n")
        if not np.isfinite(self.features).all():
            raise NumericalError("non-finite feature values in batch")

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _check_dims(spec: ModelSpec, w: np.ndarray, batch: Batch) -> None:
    if w.shape != (spec.total_dim,):
        raise DimensionError(
            f"weight vector has shape {w.shape}, expected ({spec.total_dim},)"
        )
    if batch.features.shape[1] != spec.input_dim:
        raise DimensionError(
            f"batch features have dim {batch.features.shape[1]}, "
            f"spec expects {spec.input_dim}"
        )
    if spec.is_classifier:
        labels = batch.labels
        if labels.min() < 0 or labels.max() >= spec.num_classes:
            raise ConfigError("labels outside [0, num_classes)")


def init_weights(spec: ModelSpec, seed: int, scale: float) -> np.ndarray:
    """Uniform init in [-scale, +scale], deterministic given seed."""
    if scale < 0:
        raise ConfigError("scale must be >= 0")
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=spec.total_dim)


# ---------------------------------------------------------------------------
# weight unpacking


def _unpack_layers(spec: ModelSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    sizes = spec.layer_sizes
    layers = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = w[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = None
        if spec.bias:
            b = w[offset : offset + fan_out]
            offset += fan_out
        layers.append((W, b))
    return layers


def _pack_layers(spec: ModelSpec, grads: Iterable[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    parts = []
    for gW, gb in grads:
        parts.append(gW.ravel())
        if spec.bias:
            parts.append(gb)
    return np.concatenate(parts)


def _affine(X: np.ndarray, W: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    Z = X @ W.T
    if b is not None:
        Z = Z + b
    return Z


def _augmented(X: np.ndarray, bias: bool) -> np.ndarray:
    if not bias:
        return X
    return np.hstack([X, np.ones((X.shape[0], 1))])


# ---------------------------------------------------------------------------
# forward passes


def _forward_mlp(spec: ModelSpec, w: np.ndarray, X: np.ndarray):
    """Returns (logits, activations) where activations[i] is layer i's input."""
    layers = _unpack_layers(spec, w)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        z = _affine(h, W, b)
        h = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
        acts.append(h)
    W, b = layers[-1]
    return _affine(acts[-1], W, b), acts


def predict(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Raw model output: (n,) predictions for regression, (n, C) logits else."""
    X = np.asarray(X, dtype=np.float64)
    if spec.kind == LINEAR:
        (W, b), = _unpack_layers(spec, w)
        return _affine(X, W, b)[:, 0]
    if spec.kind == LOGISTIC:
        (W, b), = _unpack_layers(spec, w)
        return _affine(X, W, b)
    logits, _ = _forward_mlp(spec, w, X)
    return logits


def features(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Feature-extractor output: what the classifier head sees.

    For linear models with split 0 this is the identity on inputs; for an
    mlp it is the activation feeding the last layer. Only the w_f block of
    `w` influences the result.
    """
    X = np.asarray(X, dtype=np.float64)
    if spec.kind != MLP:
        if spec.split_index != 0:
            raise ConfigError(
                "feature map undefined for linear models with split_index > 0"
            )
        return X
    _, acts = _forward_mlp(spec, w, X)
    return acts[-1]


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    shifted = Z - Z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(Z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(Z))


# ---------------------------------------------------------------------------
# loss / gradient / hvp


def loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    """Mean per-sample loss: squared error or softmax cross-entropy."""
    _check_dims(spec, w, batch)
    if spec.kind == LINEAR:
        r = predict(spec, w, batch.features) - batch.labels.astype(np.float64)
        return float(np.mean(r * r))
    logp = _log_softmax(predict(spec, w, batch.features))
    n = batch.size
    return float(-logp[np.arange(n), batch.labels.astype(int)].mean())


def gradient(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Exact gradient of `loss` with respect to the flat weight vector."""
    _check_dims(spec, w, batch)
    X = batch.features
    n = batch.size
    if spec.kind == LINEAR:
        (W, b), = _unpack_layers(spec, w)
        r = _affine(X, W, b)[:, 0] - batch.labels.astype(np.float64)
        gW = (2.0 / n) * (r @ X)[None, :]
        gb = np.array([(2.0 / n) * r.sum()]) if spec.bias else None
        return _pack_layers(spec, [(gW, gb)])
    labels = batch.labels.astype(int)
    if spec.kind == LOGISTIC:
        (W, b), = _unpack_layers(spec, w)
        P = _softmax(_affine(X, W, b))
        P[np.arange(n), labels] -= 1.0
        G = P / n
        return _pack_layers(spec, [(G.T @ X, G.sum(axis=0) if spec.bias else None)])
    # mlp backprop
    logits, acts = _forward_mlp(spec, w, X)
    layers = _unpack_layers(spec, w)
    delta = _softmax(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads: list[tuple[np.ndarray, np.ndarray | None]] = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        gW = delta.T @ h_in
        gb = delta.sum(axis=0) if spec.bias else None
        grads.append((gW, gb))
        if i > 0:
            back = delta @ W
            h = acts[i]
            if spec.activation == "tanh":
                back = back * (1.0 - h * h)
            else:
                back = back * (h > 0)
            delta = back
    grads.reverse()
    return _pack_layers(spec, grads)


def hvp(
    spec: ModelSpec,
    w: np.ndarray,
    batch: Batch,
    v: np.ndarray,
    mode: str = ANALYTIC,
) -> np.ndarray:
    """Hessian-vector product H(w) @ v of the batch loss.

    Analytic mode is exact and only available for the two linear model
    kinds. Finite-difference mode uses central differences of the gradient
    with step eps = 1e-5 * max(1, ||w||) and works for every kind.
    """
    _check_dims(spec, w, batch)
    if v.shape != w.shape:
        raise DimensionError("direction vector must match weight shape")
    if mode == FINITE_DIFFERENCE:
        eps = 1e-5 * max(1.0, float(np.linalg.norm(w)))
        gp = gradient(spec, w + eps * v, batch)
        gm = gradient(spec, w - eps * v, batch)
        return (gp - gm) / (2.0 * eps)
    if mode != ANALYTIC:
        raise ConfigError(f"unknown hvp mode {mode!r}")
    if spec.kind == MLP:
        raise ConfigError("analytic hvp not available for mlp; use finite-difference")
    X = batch.features
    n = batch.size
    Xa = _augmented(X, spec.bias)
    if spec.kind == LINEAR:
        # Hessian of mean squared error is (2/n) Xa^T Xa, constant in w.
        return (2.0 / n) * (Xa.T @ (Xa @ v))
    # softmax cross-entropy: per-sample (diag(p) - p p^T) kron x x^T
    (W, b), = _unpack_layers(spec, w)
    P = _softmax(_affine(X, W, b))
    C, m = W.shape
    Vt = np.empty((C, m + (1 if spec.bias else 0)))
    Vt[:, :m] = v[: C * m].reshape(C, m)
    if spec.bias:
        Vt[:, m] = v[C * m :]
    U = Xa @ Vt.T  # (n, C)
    S = P * U - P * (P * U).sum(axis=1, keepdims=True)
    Ht = (S.T @ Xa) / n  # (C, m+1)
    if spec.bias:
        return np.concatenate([Ht[:, :m].ravel(), Ht[:, m]])
    return Ht.ravel()


# ---------------------------------------------------------------------------
# smoothness


def _power_lambda_max(M: np.ndarray, tol: float = 1e-9, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    n = M.shape[0]
    v = np.random.default_rng(90469).standard_normal(n)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    lam = 0.0
    # iterate well past the requested tolerance; these matrices are tiny
    stop = min(tol, 1e-12)
    for _ in range(max_iter):
        Mv = M @ v
        norm = np.linalg.norm(Mv)
        if norm == 0.0:
            return 0.0
        lam = float(v @ Mv)
        v = Mv / norm
        if abs(lam - lam_prev) <= stop * max(1.0, abs(lam)):
            break
        lam_prev = lam
    return max(lam, 0.0)


def smoothness_constant(spec: ModelSpec, dataset: Batch) -> float:
    """Gradient-Lipschitz constant of the batch loss.

    Certified for the convex kinds: 2*lambda_max of the (bias-augmented)
    second-moment matrix for squared loss, and half of it for softmax
    cross-entropy (the softmax Hessian in logit space is at most I/2).
    For mlp the value is an empirical lower bound over 64 sampled weight
    pairs and must not be treated as certified.
    """
    if dataset.size < 1:
        raise ConfigError("empty dataset")
    Xa = _augmented(dataset.features, spec.bias)
    if spec.kind == LINEAR:
        return 2.0 * _power_lambda_max(Xa.T @ Xa / dataset.size)
    if spec.kind == LOGISTIC:
        return 0.5 * _power_lambda_max(Xa.T @ Xa / dataset.size)
    rng = np.random.default_rng(64225)
    best = 0.0
    for _ in range(64):
        w1 = rng.standard_normal(spec.total_dim)
        w2 = rng.standard_normal(spec.total_dim)
        gap = np.linalg.norm(w1 - w2)
        if gap == 0.0:
            continue
        diff = np.linalg.norm(gradient(spec, w1, dataset) - gradient(spec, w2, dataset))
        best = max(best, float(diff / gap))
    return best


def alpha_certified(spec: ModelSpec) -> bool:
    """Whether smoothness_constant returns a certified upper bound."""
    return spec.kind != MLP


def accuracy(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    """Fraction of argmax-correct predictions (ties go to the smaller class)."""
    if not spec.is_classifier:
        raise ConfigError("accuracy undefined for regression models")
    _check_dims(spec, w, batch)
    pred = np.argmax(predict(spec, w, batch.features), axis=1)
    return float(np.mean(pred == batch.labels.astype(int)))
