"""Fusion of sub-model embeddings with a two-layer tower MLP.

The aggregator concatenates the class-token embeddings of all sub-models (in
sub-model id order) and maps them ``in -> round(shrink * in) -> n_classes``
with a GELU in between.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import cost
from ._validation import check_features, check_labels
from .tensor_math import (
    DTYPE,
    Adam,
    DenseLayer,
    ShapeError,
    cross_entropy_with_grad,
    dense_backward,
    dense_forward,
    gelu,
    gelu_grad,
    softmax_rows,
)


@dataclass(frozen=True, eq=False)
class FusionMLP:
    hidden: DenseLayer
    out: DenseLayer
    shrink: float = 0.5

    @property
    def input_dim(self) -> int:
        return self.hidden.in_features

    @property
    def n_classes(self) -> int:
        return self.out.out_features

    @property
    def macs(self) -> int:
        return fusion_macs(self.input_dim, self.n_classes, self.shrink)

    def forward(self, features) -> tuple[np.ndarray, tuple]:
        """Logits plus the activations needed by :meth:`backward`."""
        pre = dense_forward(self.hidden, features)
        act = gelu(pre)
        return dense_forward(self.out, act), (features, pre, act)

    def backward(self, cache, grad_logits):
        """Parameter gradients ``[hidden.w, hidden.b, out.w, out.b]`` and the input gradient."""
        features, pre, act = cache
        gw2, gb2, g_act = dense_backward(self.out, act, grad_logits)
        g_pre = g_act * gelu_grad(pre)
        gw1, gb1, g_in = dense_backward(self.hidden, features, g_pre)
        return [gw1, gb1, gw2, gb2], g_in

    def predict_proba(self, features) -> np.ndarray:
        return softmax_rows(self.forward(features)[0])


def hidden_width(input_dim: int, shrink: float) -> int:
    if not 0.0 < shrink <= 1.0:
        raise ValueError(f"shrink factor must lie in (0, 1], got {shrink}")
    return max(1, cost.round_half_up(shrink * input_dim))


def fusion_macs(input_dim: int, n_classes: int, shrink: float = 0.5) -> int:
    hidden = hidden_width(input_dim, shrink)
    return cost.fc_macs(input_dim, hidden) + cost.fc_macs(hidden, n_classes)


def init_fusion_mlp(input_dim: int, n_classes: int, shrink: float = 0.5, seed: int = 0) -> FusionMLP:
    """Seeded init with weights ~ N(0, 1/fan_in) and zero biases."""
    hidden = hidden_width(input_dim, shrink)
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(hidden, input_dim)).astype(DTYPE)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_classes, hidden)).astype(DTYPE)
    return FusionMLP(
        DenseLayer(w1, np.zeros(hidden, DTYPE)),
        DenseLayer(w2, np.zeros(n_classes, DTYPE)),
        shrink,
    )


def concat_embeddings(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Join per-sub-model embeddings along the feature axis, in the given order."""
    if not embeddings:
        raise ValueError("no embeddings to concatenate")
    if any(e is None for e in embeddings):
        raise ValueError("missing embedding")
    arrays = [np.asarray(e, dtype=DTYPE) for e in embeddings]
    lead = {a.shape[:-1] for a in arrays}
    if len(lead) != 1:
        raise ShapeError(f"embedding batch shapes differ: {sorted(lead)}")
    return np.concatenate(arrays, axis=-1)


def sub_model_features(sub_models, X) -> np.ndarray:
    """Concatenated embeddings of ``X`` from every sub-model, in list order."""
    return concat_embeddings([sm.embed(X) for sm in sub_models])


class FusionMLPClassifier(ClassifierMixin, BaseEstimator):
    """Tower MLP over concatenated embeddings, trained with Adam on cross-entropy.

    Parameters
    ----------
    shrink : float
        Hidden width as a fraction of the input width.
    epochs, lr, batch_size : training schedule (defaults 10, 1e-4, 256).
    n_classes : int or None
        Output width; defaults to ``max(y) + 1``.
    random_state : int
        Seeds both the initialization and the mini-batch order.
    """

    def __init__(self, shrink=0.5, epochs=10, lr=1e-4, batch_size=256, n_classes=None, random_state=0):
        self.shrink = shrink
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = check_labels(y, len(X))
        n_classes = int(y.max()) + 1 if self.n_classes is None else self.n_classes
        if y.max() >= n_classes:
            raise ValueError(f"label {y.max()} out of range for {n_classes} classes")
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        mlp = init_fusion_mlp(X.shape[1], n_classes, self.shrink, self.random_state)
        self.mlp_, self.loss_curve_ = _train(mlp, X, y, self.epochs, self.lr, self.batch_size, self.random_state)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "mlp_")
        X = check_features(X, self.n_features_in_)
        return self.mlp_.predict_proba(X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


def _train(mlp: FusionMLP, X, y, epochs, lr, batch_size, seed):
    params = [mlp.hidden.weight.copy(), mlp.hidden.bias.copy(), mlp.out.weight.copy(), mlp.out.bias.copy()]

    def current():
        return FusionMLP(DenseLayer(params[0], params[1]), DenseLayer(params[2], params[3]), mlp.shrink)

    def full_loss():
        return cross_entropy_with_grad(current().forward(X)[0], y)[0]

    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = [full_loss()]
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            net = current()
            logits, cache = net.forward(X[idx])
            _, g = cross_entropy_with_grad(logits, y[idx])
            grads, _ = net.backward(cache, g)
            opt.step(grads)
        losses.append(full_loss())
    return current(), losses


def train_fusion(
    sub_models,
    X,
    y,
    shrink: float = 0.5,
    epochs: int = 10,
    lr: float = 1e-4,
    batch_size: int = 256,
    seed: int = 0,
    n_classes: int | None = None,
) -> FusionMLPClassifier:
    """Fit the fusion MLP on frozen sub-model embeddings (computed once)."""
    X = np.asarray(X, dtype=DTYPE)
    if len(X) == 0:
        raise ValueError("cannot train fusion on an empty dataset")
    features = sub_model_features(sub_models, X)
    clf = FusionMLPClassifier(shrink, epochs, lr, batch_size, n_classes, seed)
    return clf.fit(features, y)


def predict(clf: FusionMLPClassifier, sub_models, X):
    """Fused class and probability vector(s) for one input or a batch."""
    X = np.asarray(X, dtype=DTYPE)
    single = X.ndim == 3
    features = sub_model_features(sub_models, X[None] if single else X)
    if features.shape[1] != clf.n_features_in_:
        raise ShapeError(
            f"sub-models emit {features.shape[1]} features, fusion MLP expects {clf.n_features_in_}"
        )
    proba = clf.predict_proba(features)
    labels = clf.classes_[np.argmax(proba, axis=1)]
    return (labels[0], proba[0]) if single else (labels, proba)


def evaluate_accuracy(clf: FusionMLPClassifier, sub_models, X, y) -> float:
    labels, _ = predict(clf, sub_models, X)
    return float(np.mean(labels == np.asarray(y)))
